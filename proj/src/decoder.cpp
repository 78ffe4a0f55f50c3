#include "apex/decoder.hpp"

#include <cmath>
#include <stdexcept>

#include "apex/ops.hpp"

namespace apex {

using ad::Tensor;

AttentionMask attention_mask_from_logits(const std::vector<double>& logits,
                                         std::size_t q_count, std::size_t h0,
                                         std::size_t w0, std::size_t hi,
                                         std::size_t wi) {
  if (logits.size() != q_count * h0 * w0)
    throw std::invalid_argument("attention_mask_from_logits: size mismatch");
  if (hi == 0 || wi == 0 || h0 % hi != 0 || w0 % wi != 0)
    throw std::invalid_argument(
        "attention_mask_from_logits: target resolution must divide source");
  std::size_t by = h0 / hi, bx = w0 / wi;
  double block = double(by * bx);

  AttentionMask out;
  out.forbid.assign(q_count * hi * wi, 0);
  out.fallback.assign(q_count, 0);
  for (std::size_t q = 0; q < q_count; ++q) {
    const double* src = logits.data() + q * h0 * w0;
    std::uint8_t* dst = out.forbid.data() + q * hi * wi;
    bool any_allowed = false;
    for (std::size_t y = 0; y < hi; ++y)
      for (std::size_t x = 0; x < wi; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < by; ++dy)
          for (std::size_t dx = 0; dx < bx; ++dx) {
            double z = src[(y * by + dy) * w0 + (x * bx + dx)];
            acc += 1.0 / (1.0 + std::exp(-z));
          }
        bool allowed = acc / block >= 0.5;
        dst[y * wi + x] = allowed ? 0 : 1;
        any_allowed |= allowed;
      }
    if (!any_allowed) {  // empty mask: fall back to full attention
      std::fill(dst, dst + hi * wi, std::uint8_t(0));
      out.fallback[q] = 1;
    }
  }
  return out;
}

DecoderLayerResult decoder_layer(nn::ParamStore& ps, const std::string& prefix,
                                 const Tensor& q, const Tensor& tokens,
                                 const Tensor& pe, std::size_t heads,
                                 const std::vector<std::uint8_t>* forbid) {
  Tensor keys = pe.defined() ? ad::add(tokens, pe) : tokens;
  nn::AttnResult ca = nn::multi_head_attention(ps, prefix + ".cross", q, keys,
                                               tokens, heads, forbid);
  Tensor x = nn::layer_norm_p(ps, prefix + ".ln1", ad::add(q, ca.out));
  nn::AttnResult sa =
      nn::multi_head_attention(ps, prefix + ".self", x, x, x, heads, nullptr);
  x = nn::layer_norm_p(ps, prefix + ".ln2", ad::add(x, sa.out));
  Tensor ff = nn::ffn(ps, prefix + ".ffn", x);
  x = nn::layer_norm_p(ps, prefix + ".ln3", ad::add(x, ff));
  return {x, ca.out, ca.attn};
}

namespace {

// Detached mask logits of every query against the level-0 embeddings:
// logits[k, p] = sum_c q[k,c] * j0[p,c], as plain numbers.
std::vector<double> raw_mask_logits(const Tensor& q, const Tensor& j0) {
  std::size_t qn = q.shape()[0], d = q.shape()[1], hw = j0.shape()[0];
  std::vector<double> out(qn * hw, 0.0);
  const double* qd = q.data();
  const double* jd = j0.data();
  for (std::size_t k = 0; k < qn; ++k)
    for (std::size_t p = 0; p < hw; ++p) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += qd[k * d + c] * jd[p * d + c];
      out[k * hw + p] = acc;
    }
  return out;
}

AttentionMask stage_mask(const Tensor& q, const PixelEmbeddings& j,
                         std::size_t level) {
  std::vector<double> logits = raw_mask_logits(q, j.tokens[0]);
  return attention_mask_from_logits(logits, q.shape()[0], j.hs[0], j.ws[0],
                                    j.hs[level], j.ws[level]);
}

std::size_t cycle_level(std::size_t stage, std::size_t n_coarse) {
  // coarsest first: J_n, J_{n-1}, ..., J_1, repeat
  return n_coarse - (stage % n_coarse);
}

}  // namespace

DecoderRun run_decoders(nn::ParamStore& ps, const PixelEmbeddings& j_ana,
                        const PixelEmbeddings& j_path, const Tensor& q0_ana,
                        const Tensor& q0_path, MixKind mixer,
                        std::size_t layers, std::size_t heads,
                        const std::string& ana_prefix,
                        const std::string& path_prefix) {
  std::size_t n_coarse = j_ana.tokens.size() - 1;
  std::vector<Tensor> pe_ana(n_coarse + 1), pe_path(n_coarse + 1);
  for (std::size_t i = 1; i <= n_coarse; ++i) {
    pe_ana[i] = nn::pos_enc_2d(j_ana.hs[i], j_ana.ws[i], j_ana.d);
    pe_path[i] = nn::pos_enc_2d(j_path.hs[i], j_path.ws[i], j_path.d);
  }

  DecoderRun run;
  run.q_ana = q0_ana;
  run.q_path = q0_path;
  for (std::size_t l = 0; l < layers; ++l) {
    std::size_t lvl = cycle_level(l, n_coarse);
    DecoderStage st;
    st.level = lvl;

    AttentionMask m_ana = stage_mask(run.q_ana, j_ana, lvl);
    AttentionMask m_path = stage_mask(run.q_path, j_path, lvl);
    st.fallback_ana = m_ana.fallback;
    st.fallback_path = m_path.fallback;

    DecoderLayerResult la =
        decoder_layer(ps, ana_prefix + ".stage" + std::to_string(l), run.q_ana,
                      j_ana.tokens[lvl], pe_ana[lvl], heads, &m_ana.forbid);
    DecoderLayerResult lp = decoder_layer(
        ps, path_prefix + ".stage" + std::to_string(l), run.q_path,
        j_path.tokens[lvl], pe_path[lvl], heads, &m_path.forbid);

    MixResult mixed = mix(ps, mixer, la.q, lp.q, l, heads);
    run.q_ana = mixed.q_ana;
    run.q_path = mixed.q_path;
    st.q_ana = mixed.q_ana;
    st.q_path = mixed.q_path;
    st.mix_attn = mixed.attn;
    run.trace.push_back(std::move(st));
  }
  return run;
}

SingleDecoderRun run_single_decoder(nn::ParamStore& ps,
                                    const PixelEmbeddings& j, const Tensor& q0,
                                    std::size_t layers, std::size_t heads,
                                    const std::string& prefix) {
  std::size_t n_coarse = j.tokens.size() - 1;
  std::vector<Tensor> pe(n_coarse + 1);
  for (std::size_t i = 1; i <= n_coarse; ++i)
    pe[i] = nn::pos_enc_2d(j.hs[i], j.ws[i], j.d);

  SingleDecoderRun run;
  run.q = q0;
  for (std::size_t l = 0; l < layers; ++l) {
    std::size_t lvl = cycle_level(l, n_coarse);
    AttentionMask m = stage_mask(run.q, j, lvl);
    DecoderLayerResult lr =
        decoder_layer(ps, prefix + ".stage" + std::to_string(l), run.q,
                      j.tokens[lvl], pe[lvl], heads, &m.forbid);
    run.q = lr.q;
    run.stage_q.push_back(lr.q);
    run.levels.push_back(lvl);
  }
  return run;
}

}  // namespace apex
