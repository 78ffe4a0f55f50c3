#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "apex/backbone.hpp"
#include "apex/nn.hpp"
#include "apex/ops.hpp"
#include "apex/rng.hpp"
#include "doctest.h"

using apex::BackboneConfig;
using apex::MultiScaleFeatures;
using apex::PixelEmbeddings;
using apex::ad::Tensor;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed,
                    bool zero_ch2 = true) {
  apex::Rng rng(seed);
  std::vector<double> v(3 * h * w);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  if (zero_ch2)
    for (std::size_t i = 2 * h * w; i < 3 * h * w; ++i) v[i] = 0.0;
  return Tensor::from_values({3, h, w}, std::move(v));
}

BackboneConfig test_cfg(std::size_t r_rounds = 1) {
  BackboneConfig cfg;
  cfg.d = 16;
  cfg.r_rounds = r_rounds;
  return cfg;
}

}  // namespace

TEST_CASE("extract_features: level shapes and strides") {
  apex::nn::ParamStore ps(7);
  Tensor img = random_image(64, 64, 1);
  MultiScaleFeatures f = apex::extract_features(ps, "backbone", img, test_cfg());
  REQUIRE(f.levels.size() == 4);
  std::vector<std::size_t> want_hw = {16, 8, 4, 2};
  std::vector<std::size_t> want_c = {16, 32, 64, 128};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(f.levels[i].shape()[0] == want_c[i]);
    CHECK(f.levels[i].shape()[1] == want_hw[i]);
    CHECK(f.levels[i].shape()[2] == want_hw[i]);
    CHECK(f.hs[i] == want_hw[i]);
    CHECK(f.ws[i] == want_hw[i]);
  }

  // Non-square but divisible input works and keeps the aspect ratio.
  Tensor rect = random_image(32, 64, 2);
  MultiScaleFeatures fr = apex::extract_features(ps, "backbone", rect, test_cfg());
  CHECK(fr.hs == std::vector<std::size_t>{8, 4, 2, 1});
  CHECK(fr.ws == std::vector<std::size_t>{16, 8, 4, 2});
}

TEST_CASE("extract_features: indivisible extent error names the divisor") {
  apex::nn::ParamStore ps(7);
  Tensor img = random_image(40, 64, 3);
  try {
    apex::extract_features(ps, "backbone", img, test_cfg());
    FAIL("expected ShapeError");
  } catch (const apex::ad::ShapeError& e) {
    CHECK(std::string(e.what()).find("divisible by 32") != std::string::npos);
  }
}

TEST_CASE("extract_features: all-zero image gives all-zero features with zero biases") {
  apex::nn::ParamStore ps(7);
  Tensor img = Tensor::zeros({3, 64, 64});
  MultiScaleFeatures f = apex::extract_features(ps, "backbone", img, test_cfg());
  for (const auto& lvl : f.levels)
    for (double v : lvl.value()) CHECK(v == 0.0);

  // With a bias on the first conv, interior pixels of the first level become
  // constant per channel (borders differ only through padding).
  apex::nn::ParamStore ps2(7);
  apex::extract_features(ps2, "backbone", img, test_cfg());  // materialize
  Tensor b1 = ps2.get("backbone.stage0.conv1.b", {16}, apex::nn::InitSpec::zeros());
  for (std::size_t c = 0; c < 16; ++c) b1.data()[c] = 0.1 * double(c + 1);
  MultiScaleFeatures f2 = apex::extract_features(ps2, "backbone", img, test_cfg());
  const Tensor& l0 = f2.levels[0];
  std::size_t hw = 16;
  for (std::size_t c = 0; c < l0.shape()[0]; ++c) {
    double ref = l0.value()[c * hw * hw + 1 * hw + 1];
    for (std::size_t y = 1; y + 1 < hw; ++y)
      for (std::size_t x = 1; x + 1 < hw; ++x)
        CHECK(l0.value()[c * hw * hw + y * hw + x] == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("extract_features: channel-2 content is inert once its weights are zeroed") {
  apex::nn::ParamStore ps(11);
  Tensor a = random_image(64, 64, 5, true);
  apex::extract_features(ps, "backbone", a, test_cfg());  // materialize params

  // Zero the first conv's input-channel-2 weights.
  Tensor w1 = ps.get("backbone.stage0.conv1.w", {16, 3, 3, 3},
                     apex::nn::InitSpec::zeros());
  for (std::size_t co = 0; co < 16; ++co)
    for (std::size_t k = 0; k < 9; ++k) w1.data()[co * 27 + 2 * 9 + k] = 0.0;

  Tensor b = random_image(64, 64, 5, true);
  apex::Rng rng(99);
  for (std::size_t i = 2 * 64 * 64; i < 3 * 64 * 64; ++i)
    b.data()[i] = rng.uniform(-1.0, 1.0);  // arbitrary channel-2 content

  MultiScaleFeatures fa = apex::extract_features(ps, "backbone", a, test_cfg());
  MultiScaleFeatures fb = apex::extract_features(ps, "backbone", b, test_cfg());
  for (std::size_t i = 0; i < 4; ++i) {
    REQUIRE(fa.levels[i].numel() == fb.levels[i].numel());
    CHECK(std::memcmp(fa.levels[i].data(), fb.levels[i].data(),
                      fa.levels[i].numel() * sizeof(double)) == 0);
  }
}

TEST_CASE("decode_pixels: level shapes, d channels, coarse token count") {
  apex::nn::ParamStore ps(13);
  Tensor img = random_image(64, 64, 6);
  BackboneConfig cfg = test_cfg(2);
  MultiScaleFeatures f = apex::extract_features(ps, "backbone", img, cfg);
  PixelEmbeddings j = apex::decode_pixels(ps, "pd", f, cfg);
  REQUIRE(j.tokens.size() == 4);
  std::size_t coarse_tokens = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(j.tokens[i].shape()[0] == f.hs[i] * f.ws[i]);
    CHECK(j.tokens[i].shape()[1] == cfg.d);
    if (i > 0) coarse_tokens += j.tokens[i].shape()[0];
  }
  CHECK(coarse_tokens == 84);  // 8*8 + 4*4 + 2*2
}

TEST_CASE("decode_pixels: R=0 degenerates to pure per-level projection") {
  apex::nn::ParamStore ps(17);
  Tensor img = random_image(64, 64, 7);
  BackboneConfig cfg = test_cfg(0);
  MultiScaleFeatures f = apex::extract_features(ps, "backbone", img, cfg);
  PixelEmbeddings j = apex::decode_pixels(ps, "pd", f, cfg);

  // Manually recompute J_1 = tokens(F_1) @ W + b from the stored weights.
  std::size_t c1 = 32, h1 = 8, w1 = 8, d = cfg.d;
  Tensor w = ps.get("pd.proj1.w", {c1, d}, apex::nn::InitSpec::zeros());
  Tensor b = ps.get("pd.proj1.b", {d}, apex::nn::InitSpec::zeros());
  const double* f1 = f.levels[1].data();
  for (std::size_t p = 0; p < h1 * w1; ++p)
    for (std::size_t colj = 0; colj < d; ++colj) {
      double acc = 0.0;
      for (std::size_t c = 0; c < c1; ++c) {
        double a = f1[c * h1 * w1 + p];
        if (a != 0.0) acc += a * w.data()[c * d + colj];
      }
      acc += b.data()[colj];
      CHECK(j.tokens[1].value()[p * d + colj] == acc);
    }

  // J_0 = proj(F_0) + 2x nearest upsampling of J_1.
  std::size_t h0 = 16, w0 = 16;
  Tensor w0p = ps.get("pd.proj0.w", {16, d}, apex::nn::InitSpec::zeros());
  Tensor b0p = ps.get("pd.proj0.b", {d}, apex::nn::InitSpec::zeros());
  const double* f0 = f.levels[0].data();
  for (std::size_t y = 0; y < h0; y += 5)
    for (std::size_t x = 0; x < w0; x += 3)
      for (std::size_t colj = 0; colj < d; ++colj) {
        std::size_t p = y * w0 + x;
        double acc = 0.0;
        for (std::size_t c = 0; c < 16; ++c) {
          double a = f0[c * h0 * w0 + p];
          if (a != 0.0) acc += a * w0p.data()[c * d + colj];
        }
        acc += b0p.data()[colj];
        double up = j.tokens[1].value()[((y / 2) * w1 + (x / 2)) * d + colj];
        CHECK(j.tokens[0].value()[p * d + colj] == acc + up);
      }
}

TEST_CASE("decode_pixels: identity projection with R=0 truncates channels") {
  apex::nn::ParamStore ps(19);
  Tensor img = random_image(64, 64, 8);
  BackboneConfig cfg = test_cfg(0);
  MultiScaleFeatures f = apex::extract_features(ps, "backbone", img, cfg);
  apex::decode_pixels(ps, "pd", f, cfg);  // materialize params

  std::vector<double> ident(32 * 16, 0.0);
  for (std::size_t c = 0; c < 16; ++c) ident[c * 16 + c] = 1.0;
  ps.set("pd.proj1.w", {32, 16}, ident);
  ps.set("pd.proj1.b", {16}, std::vector<double>(16, 0.0));

  PixelEmbeddings j = apex::decode_pixels(ps, "pd", f, cfg);
  const double* f1 = f.levels[1].data();
  for (std::size_t p = 0; p < 64; ++p)
    for (std::size_t c = 0; c < 16; ++c)
      CHECK(j.tokens[1].value()[p * 16 + c] == f1[c * 64 + p]);
}

TEST_CASE("decode_pixels: gradient flows from every level back to the input") {
  BackboneConfig cfg = test_cfg(1);
  for (std::size_t level = 0; level < 4; ++level) {
    apex::nn::ParamStore ps(23);
    Tensor img = random_image(64, 64, 40 + level);
    img.set_requires_grad(true);
    apex::ad::Tape tape;
    {
      apex::ad::TapeScope scope(tape);
      MultiScaleFeatures f = apex::extract_features(ps, "backbone", img, cfg);
      PixelEmbeddings j = apex::decode_pixels(ps, "pd", f, cfg);
      Tensor loss = apex::ad::sum_all(j.tokens[level]);
      tape.backward(loss);
    }
    double gnorm = 0.0;
    for (double g : img.grad()) gnorm += g * g;
    CHECK(gnorm > 0.0);
  }
}

TEST_CASE("backbone+decoder: no hidden state between calls") {
  apex::nn::ParamStore ps(29);
  BackboneConfig cfg = test_cfg(1);
  Tensor a = random_image(64, 64, 9);
  Tensor b = random_image(64, 64, 10);

  auto run = [&](const Tensor& x) {
    MultiScaleFeatures f = apex::extract_features(ps, "backbone", x, cfg);
    return apex::decode_pixels(ps, "pd", f, cfg);
  };
  PixelEmbeddings ja1 = run(a);
  PixelEmbeddings jb = run(b);  // interleaved other input
  PixelEmbeddings ja2 = run(a);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(std::memcmp(ja1.tokens[i].data(), ja2.tokens[i].data(),
                      ja1.tokens[i].numel() * sizeof(double)) == 0);
  CHECK(jb.tokens[0].numel() == ja1.tokens[0].numel());
}

TEST_CASE("pos_enc_2d: shape, range, and distinct positions") {
  Tensor pe = apex::nn::pos_enc_2d(8, 8, 16);
  REQUIRE(pe.shape() == apex::ad::Shape{64, 16});
  for (double v : pe.value()) {
    CHECK(v <= 1.0);
    CHECK(v >= -1.0);
  }
  // All rows pairwise distinct.
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t k = i + 1; k < 64; ++k) {
      bool same = true;
      for (std::size_t c = 0; c < 16; ++c)
        if (pe.value()[i * 16 + c] != pe.value()[k * 16 + c]) {
          same = false;
          break;
        }
      CHECK_FALSE(same);
    }
  CHECK_THROWS_AS(apex::nn::pos_enc_2d(4, 4, 10), std::invalid_argument);
}
