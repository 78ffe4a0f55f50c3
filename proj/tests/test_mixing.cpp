#include <cmath>
#include <cstring>
#include <vector>

#include "apex/mixing.hpp"
#include "apex/nn.hpp"
#include "apex/ops.hpp"
#include "apex/rng.hpp"
#include "doctest.h"

using apex::MixKind;
using apex::MixResult;
using apex::ad::Tensor;

namespace {

Tensor random_tensor(apex::ad::Shape shape, std::uint64_t seed,
                     double scale = 1.0) {
  apex::Rng rng(seed);
  std::size_t n = apex::ad::shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor::from_values(std::move(shape), std::move(v));
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.numel() == b.numel() &&
         std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("mix kind names round-trip; unknown name rejected") {
  for (MixKind k : {MixKind::kIdentity, MixKind::kSum, MixKind::kSum2Way,
                    MixKind::kMean, MixKind::kCrossAttention,
                    MixKind::kCrossAttentionPerLevel})
    CHECK(apex::parse_mix_kind(apex::mix_kind_name(k)) == k);
  CHECK_THROWS_AS(apex::parse_mix_kind("best_mixer"), std::invalid_argument);
}

TEST_CASE("mix: nonparametric algebra") {
  apex::nn::ParamStore ps(101);
  Tensor qa = random_tensor({6, 8}, 1, 0.5);
  Tensor qp = random_tensor({6, 8}, 2, 0.5);
  Tensor zero = Tensor::zeros({6, 8});

  // identity: both unchanged
  MixResult mi = apex::mix(ps, MixKind::kIdentity, qa, qp, 0);
  CHECK(bit_equal(mi.q_ana, qa));
  CHECK(bit_equal(mi.q_path, qp));

  // sum with zero anatomy leaves pathology unchanged
  MixResult ms0 = apex::mix(ps, MixKind::kSum, zero, qp, 0);
  CHECK(bit_equal(ms0.q_path, qp));
  CHECK(bit_equal(ms0.q_ana, zero));

  // sum adds elementwise; anatomy unchanged
  MixResult ms = apex::mix(ps, MixKind::kSum, qa, qp, 0);
  for (std::size_t i = 0; i < qa.numel(); ++i)
    CHECK(ms.q_path.value()[i] == qp.value()[i] + qa.value()[i]);
  CHECK(bit_equal(ms.q_ana, qa));

  // mean of identical sets is a fixed point
  MixResult mm = apex::mix(ps, MixKind::kMean, qp, qp, 0);
  CHECK(bit_equal(mm.q_path, qp));

  // sum_2way pushes the same sum into both branches
  MixResult m2 = apex::mix(ps, MixKind::kSum2Way, qa, qp, 0);
  CHECK(bit_equal(m2.q_ana, m2.q_path));
  for (std::size_t i = 0; i < qa.numel(); ++i)
    CHECK(m2.q_path.value()[i] == qp.value()[i] + qa.value()[i]);

  // no parameters touched by any of the above
  CHECK(ps.all().empty());
}

TEST_CASE("mix: shape mismatch rejected") {
  apex::nn::ParamStore ps(102);
  Tensor qa = random_tensor({5, 8}, 3);
  Tensor qp = random_tensor({6, 8}, 4);
  CHECK_THROWS_AS(apex::mix(ps, MixKind::kSum, qa, qp, 0),
                  std::invalid_argument);
  Tensor qd = random_tensor({5, 12}, 5);
  CHECK_THROWS_AS(apex::mix(ps, MixKind::kMean, qd, qa, 0),
                  std::invalid_argument);
}

TEST_CASE("mix: sum and mean commute with simultaneous row permutation") {
  apex::nn::ParamStore ps(103);
  std::size_t Q = 6, d = 8;
  Tensor qa = random_tensor({Q, d}, 6, 0.5);
  Tensor qp = random_tensor({Q, d}, 7, 0.5);
  std::vector<std::size_t> perm = {4, 0, 5, 2, 1, 3};

  auto permute = [&](const Tensor& t) {
    std::vector<double> v(Q * d);
    for (std::size_t i = 0; i < Q; ++i)
      for (std::size_t c = 0; c < d; ++c)
        v[i * d + c] = t.value()[perm[i] * d + c];
    return Tensor::from_values({Q, d}, std::move(v));
  };

  for (MixKind k : {MixKind::kSum, MixKind::kMean}) {
    MixResult plain = apex::mix(ps, k, qa, qp, 0);
    MixResult permuted = apex::mix(ps, k, permute(qa), permute(qp), 0);
    CHECK(bit_equal(permuted.q_path, permute(plain.q_path)));
  }
}

TEST_CASE("mix: cross-attention starts as layer-normed identity and leaves anatomy alone") {
  apex::nn::ParamStore ps(104);
  std::size_t Q = 6, d = 8;
  Tensor qa = random_tensor({Q, d}, 8, 0.5);
  Tensor qp = random_tensor({Q, d}, 9, 0.5);

  MixResult m = apex::mix(ps, MixKind::kCrossAttention, qa, qp, 0, 4);
  CHECK(bit_equal(m.q_ana, qa));
  REQUIRE(m.attn.defined());

  // Zero-initialized output projection: mixed = LN(q_path + 0).
  Tensor g = Tensor::full({d}, 1.0);
  Tensor b = Tensor::zeros({d});
  Tensor want = apex::ad::layer_norm(qp, g, b);
  for (std::size_t i = 0; i < want.numel(); ++i)
    CHECK(m.q_path.value()[i] == doctest::Approx(want.value()[i]).epsilon(1e-14));

  // Attention rows are simplexes.
  for (std::size_t p = 0; p < Q; ++p) {
    double sum = 0.0;
    for (std::size_t a = 0; a < Q; ++a) sum += m.attn.value()[p * Q + a];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("mix: cross-attention output is invariant to permuting anatomy rows") {
  apex::nn::ParamStore ps(105);
  std::size_t Q = 8, d = 8;
  Tensor qa = random_tensor({Q, d}, 10, 0.5);
  Tensor qp = random_tensor({Q, d}, 11, 0.5);
  // Give the output projection real weights so the attention result matters.
  apex::mix(ps, MixKind::kCrossAttention, qa, qp, 0, 4);
  {
    apex::Rng rng(12);
    std::vector<double> w(d * d);
    for (auto& x : w) x = rng.normal(0.0, 0.3);
    ps.set("mixer.ca.mha.out.w", {d, d}, w);
  }

  std::vector<std::size_t> perm = {3, 6, 0, 7, 2, 5, 1, 4};
  std::vector<double> pa(Q * d);
  for (std::size_t i = 0; i < Q; ++i)
    for (std::size_t c = 0; c < d; ++c)
      pa[i * d + c] = qa.value()[perm[i] * d + c];
  Tensor qa_p = Tensor::from_values({Q, d}, std::move(pa));

  MixResult m1 = apex::mix(ps, MixKind::kCrossAttention, qa, qp, 0, 4);
  MixResult m2 = apex::mix(ps, MixKind::kCrossAttention, qa_p, qp, 0, 4);
  double md = 0.0;
  for (std::size_t i = 0; i < m1.q_path.numel(); ++i)
    md = std::max(md, std::abs(m1.q_path.value()[i] - m2.q_path.value()[i]));
  CHECK(md < 1e-10);
}

TEST_CASE("mix: per-level variant owns one parameter bundle per stage") {
  apex::nn::ParamStore shared(106);
  Tensor qa = random_tensor({4, 8}, 13, 0.5);
  Tensor qp = random_tensor({4, 8}, 14, 0.5);
  apex::mix(shared, MixKind::kCrossAttention, qa, qp, 0, 4);
  std::size_t after_stage0 = shared.all().size();
  apex::mix(shared, MixKind::kCrossAttention, qa, qp, 3, 4);
  CHECK(shared.all().size() == after_stage0);  // same bundle reused

  apex::nn::ParamStore tied(106);
  apex::mix(tied, MixKind::kCrossAttentionPerLevel, qa, qp, 0, 4);
  std::size_t one_stage = tied.all().size();
  apex::mix(tied, MixKind::kCrossAttentionPerLevel, qa, qp, 3, 4);
  CHECK(tied.all().size() == 2 * one_stage);  // fresh bundle per stage
}

TEST_CASE("attended_anatomy_report: worked examples") {
  // Single anatomy query: all mass lands on its class.
  {
    std::vector<std::vector<double>> attn = {{1.0, 1.0, 1.0}};  // Qp=3, Qa=1
    auto rep = apex::attended_anatomy_report(MixKind::kCrossAttention, attn, 3,
                                             1, {5}, 5);
    REQUIRE(rep.size() == 1);
    CHECK(rep[0].first == 5);
    CHECK(rep[0].second == doctest::Approx(1.0));
  }
  // Uniform attention over 4 distinct classes: 0.25 each, full ranking even
  // when k exceeds the class count, ties broken by class id.
  {
    std::vector<std::vector<double>> attn = {
        std::vector<double>(2 * 4, 0.25)};  // Qp=2, Qa=4
    auto rep = apex::attended_anatomy_report(MixKind::kCrossAttention, attn, 2,
                                             4, {4, 2, 9, 1}, 10);
    REQUIRE(rep.size() == 4);
    CHECK(rep[0].first == 1);
    CHECK(rep[1].first == 2);
    CHECK(rep[2].first == 4);
    CHECK(rep[3].first == 9);
    for (const auto& [cls, mass] : rep)
      CHECK(mass == doctest::Approx(0.25).epsilon(1e-12));
  }
  // k truncates the ranking.
  {
    std::vector<std::vector<double>> attn = {{0.7, 0.2, 0.1}};  // Qp=1, Qa=3
    auto rep = apex::attended_anatomy_report(MixKind::kCrossAttentionPerLevel,
                                             attn, 1, 3, {1, 2, 3}, 2);
    REQUIRE(rep.size() == 2);
    CHECK(rep[0].first == 1);
    CHECK(rep[0].second == doctest::Approx(0.7));
    CHECK(rep[1].first == 2);
  }
  // Unmatched anatomy queries are excluded and mass renormalizes.
  {
    std::vector<std::vector<double>> attn = {{0.5, 0.25, 0.25}};
    auto rep = apex::attended_anatomy_report(MixKind::kCrossAttention, attn, 1,
                                             3, {7, -1, 3}, 5);
    REQUIRE(rep.size() == 2);
    CHECK(rep[0].first == 7);
    CHECK(rep[0].second == doctest::Approx(2.0 / 3.0));
    CHECK(rep[1].first == 3);
    CHECK(rep[1].second == doctest::Approx(1.0 / 3.0));
  }
  // Two stages, two queries each: masses aggregate before normalizing.
  {
    std::vector<std::vector<double>> attn = {{1.0, 0.0, 0.0, 1.0},
                                             {0.5, 0.5, 0.5, 0.5}};
    auto rep = apex::attended_anatomy_report(MixKind::kCrossAttention, attn, 2,
                                             2, {1, 2}, 5);
    REQUIRE(rep.size() == 2);
    CHECK(rep[0].second == doctest::Approx(0.5));
    CHECK(rep[1].second == doctest::Approx(0.5));
  }
}

TEST_CASE("attended_anatomy_report: non-attention strategy rejected") {
  std::vector<std::vector<double>> attn = {{1.0}};
  CHECK_THROWS_AS(
      apex::attended_anatomy_report(MixKind::kSum, attn, 1, 1, {1}, 3),
      std::invalid_argument);
  CHECK_THROWS_AS(
      apex::attended_anatomy_report(MixKind::kIdentity, attn, 1, 1, {1}, 3),
      std::invalid_argument);
}
