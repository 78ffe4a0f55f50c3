#include "apex/backbone.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "apex/ops.hpp"

namespace apex {

using ad::Tensor;

namespace {

// 3x3 conv + ReLU with He-style weight init.
Tensor conv_block(nn::ParamStore& ps, const std::string& name, const Tensor& x,
                  std::size_t cout, std::size_t stride) {
  std::size_t cin = x.shape()[0];
  double stddev = std::sqrt(2.0 / double(cin * 9));
  Tensor w = ps.get(name + ".w", {cout, cin, 3, 3}, nn::InitSpec::normal(stddev));
  Tensor b = ps.get(name + ".b", {cout}, nn::InitSpec::zeros());
  return ad::relu(ad::conv2d(x, w, b, stride, 1));
}

// [C,H,W] -> [H*W, C] token matrix.
Tensor to_tokens(const Tensor& fmap) {
  std::size_t c = fmap.shape()[0], h = fmap.shape()[1], w = fmap.shape()[2];
  return ad::transpose(ad::reshape(fmap, {c, h * w}));
}

// [H*W, C] -> [C,H,W].
Tensor to_fmap(const Tensor& tokens, std::size_t h, std::size_t w) {
  std::size_t c = tokens.shape()[1];
  return ad::reshape(ad::transpose(tokens), {c, h, w});
}

}  // namespace

MultiScaleFeatures extract_features(nn::ParamStore& ps,
                                    const std::string& prefix,
                                    const Tensor& image,
                                    const BackboneConfig& cfg) {
  if (image.rank() != 3 || image.shape()[0] != 3)
    throw ad::ShapeError("extract_features: expected [3,H,W] image, got " +
                         ad::shape_str(image.shape()));
  if (cfg.widths.size() != cfg.n_coarse + 1)
    throw std::invalid_argument(
        "extract_features: widths must list one channel count per level");
  std::size_t h = image.shape()[1], w = image.shape()[2];
  std::size_t divisor = std::size_t(1) << (cfg.n_coarse + 2);
  if (h % divisor != 0 || w % divisor != 0)
    throw ad::ShapeError("extract_features: input " + ad::shape_str(image.shape()) +
                         " requires H and W divisible by " +
                         std::to_string(divisor));

  MultiScaleFeatures out;
  Tensor x = image;
  for (std::size_t s = 0; s <= cfg.n_coarse; ++s) {
    std::string stage = prefix + ".stage" + std::to_string(s);
    x = conv_block(ps, stage + ".conv1", x, cfg.widths[s], 2);
    // Stage 0 downsamples twice (stride 4); later stages halve once.
    x = conv_block(ps, stage + ".conv2", x, cfg.widths[s], s == 0 ? 2 : 1);
    out.levels.push_back(x);
    out.hs.push_back(x.shape()[1]);
    out.ws.push_back(x.shape()[2]);
  }
  return out;
}

PixelEmbeddings decode_pixels(nn::ParamStore& ps, const std::string& prefix,
                              const MultiScaleFeatures& feats,
                              const BackboneConfig& cfg) {
  if (feats.levels.size() != cfg.n_coarse + 1)
    throw std::invalid_argument("decode_pixels: level count mismatch");
  std::size_t d = cfg.d;

  // Per-level 1x1 projection to d channels, as a linear map over tokens.
  std::vector<Tensor> proj(feats.levels.size());
  for (std::size_t i = 0; i < feats.levels.size(); ++i) {
    std::size_t cin = feats.levels[i].shape()[0];
    proj[i] = nn::linear(ps, prefix + ".proj" + std::to_string(i),
                         to_tokens(feats.levels[i]), d,
                         nn::InitSpec::normal(1.0 / std::sqrt(double(cin))));
  }

  // Joint self-attention over the concatenated coarse tokens (levels 1..n),
  // with per-level 2-D sinusoidal encodings on queries/keys only so that
  // r_rounds = 0 leaves the pure projections untouched.
  std::vector<Tensor> coarse(proj.begin() + 1, proj.end());
  std::vector<Tensor> pes;
  for (std::size_t i = 1; i < feats.levels.size(); ++i)
    pes.push_back(nn::pos_enc_2d(feats.hs[i], feats.ws[i], d));
  Tensor tokens = ad::concat(coarse, 0);
  Tensor pe = ad::concat(pes, 0);
  for (std::size_t r = 0; r < cfg.r_rounds; ++r) {
    std::string round = prefix + ".attn" + std::to_string(r);
    Tensor qk = ad::add(tokens, pe);
    nn::AttnResult att = nn::multi_head_attention(ps, round + ".mha", qk, qk,
                                                  tokens, cfg.heads, nullptr);
    tokens = nn::layer_norm_p(ps, round + ".ln1", ad::add(tokens, att.out));
    Tensor ff = nn::ffn(ps, round + ".ffn", tokens);
    tokens = nn::layer_norm_p(ps, round + ".ln2", ad::add(tokens, ff));
  }

  PixelEmbeddings out;
  out.d = d;
  out.hs = feats.hs;
  out.ws = feats.ws;
  out.tokens.resize(feats.levels.size());
  std::size_t off = 0;
  for (std::size_t i = 1; i < feats.levels.size(); ++i) {
    std::size_t len = feats.hs[i] * feats.ws[i];
    out.tokens[i] = ad::slice(tokens, 0, off, len);
    off += len;
  }

  // Top-down fusion for the finest level: projected F_0 plus nearest-
  // neighbor upsampled level 1.
  Tensor j1_map = to_fmap(out.tokens[1], feats.hs[1], feats.ws[1]);
  Tensor j1_up = to_tokens(ad::upsample2x_nearest(j1_map));
  out.tokens[0] = ad::add(proj[0], j1_up);
  return out;
}

}  // namespace apex
