#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "apex/backbone.hpp"
#include "apex/mixing.hpp"
#include "apex/nn.hpp"
#include "apex/tensor.hpp"

namespace apex {

// Thresholded per-query attention masks derived from mask logits at the
// finest level, average-pooled to a coarser level's resolution. forbid is
// row-major [Q, hi*wi] with nonzero = blocked; fallback[q] is set when query
// q's mask came out empty and the row was reset to all-permissive.
struct AttentionMask {
  std::vector<std::uint8_t> forbid;
  std::vector<std::uint8_t> fallback;
};

// logits: [Q, h0*w0] raw mask logits (plain numbers, already detached).
// Pixels with mean sigmoid >= 0.5 over each (h0/hi x w0/wi) block are
// permitted. hi/wi must divide h0/w0.
AttentionMask attention_mask_from_logits(const std::vector<double>& logits,
                                         std::size_t q_count, std::size_t h0,
                                         std::size_t w0, std::size_t hi,
                                         std::size_t wi);

struct DecoderLayerResult {
  ad::Tensor q;          // [Q, d] layer output
  ad::Tensor cross_out;  // masked cross-attention sub-block output, pre-residual
  ad::Tensor cross_attn; // [Q, Nk] head-averaged cross-attention weights
};

// One masked-transformer decoder layer:
//   q' = LN(q + MaskedCrossAttn(q, tokens)), then LN(q' + SelfAttn(q')),
//   then LN(q'' + FFN(q'')).
// Position encodings are added to the cross-attention keys only; values stay
// plain. forbid (optional) blocks cross-attention logits at -1e9.
DecoderLayerResult decoder_layer(nn::ParamStore& ps, const std::string& prefix,
                                 const ad::Tensor& q, const ad::Tensor& tokens,
                                 const ad::Tensor& pe, std::size_t heads,
                                 const std::vector<std::uint8_t>* forbid);

struct DecoderStage {
  std::size_t level = 0;        // which embedding level this stage attended
  ad::Tensor q_ana, q_path;     // post-layer (and post-mix) queries
  ad::Tensor mix_attn;          // defined only for attention mixers
  std::vector<std::uint8_t> fallback_ana, fallback_path;
};

struct DecoderRun {
  ad::Tensor q_ana, q_path;  // final queries
  std::vector<DecoderStage> trace;
};

// Runs both branches for `layers` total stages, cycling over the coarse
// levels from coarsest to finest (J_n, ..., J_1, repeat). Attention masks
// for each stage come from the current queries' dot products with level-0
// embeddings (detached, thresholded, pooled). After each pathology layer the
// mixer runs; anatomy computation never reads any pathology-derived value,
// so for every mixer except sum_2way the anatomy trace is bit-identical to
// the identity-mixer run. Branch parameter bundles are disjoint:
// "<ana_prefix>.stage<l>.*" vs "<path_prefix>.stage<l>.*".
DecoderRun run_decoders(nn::ParamStore& ps, const PixelEmbeddings& j_ana,
                        const PixelEmbeddings& j_path,
                        const ad::Tensor& q0_ana, const ad::Tensor& q0_path,
                        MixKind mixer, std::size_t layers, std::size_t heads,
                        const std::string& ana_prefix = "decoder.ana",
                        const std::string& path_prefix = "decoder.path");

struct SingleDecoderRun {
  ad::Tensor q;                      // final queries
  std::vector<ad::Tensor> stage_q;   // post-layer queries per stage
  std::vector<std::size_t> levels;   // level visited per stage
};

// Single-branch variant (baseline / multitask / pretrain / conditioned
// input): same layer structure and masking, no mixing.
SingleDecoderRun run_single_decoder(nn::ParamStore& ps,
                                    const PixelEmbeddings& j,
                                    const ad::Tensor& q0, std::size_t layers,
                                    std::size_t heads,
                                    const std::string& prefix = "decoder.path");

}  // namespace apex
