#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "apex/nn.hpp"
#include "apex/tensor.hpp"

namespace apex {

// Query-communication strategies between the anatomy and pathology decoder
// branches. Identity/sum/sum_2way/mean carry no parameters; the
// cross-attention variants own one parameter bundle (shared across stages,
// or one per stage for the per-level variant).
enum class MixKind {
  kIdentity,
  kSum,
  kSum2Way,
  kMean,
  kCrossAttention,
  kCrossAttentionPerLevel,
};

std::string mix_kind_name(MixKind k);
MixKind parse_mix_kind(const std::string& name);  // throws invalid_argument
bool mix_is_attention(MixKind k);

struct MixResult {
  ad::Tensor q_ana;  // unchanged except for sum_2way
  ad::Tensor q_path;
  ad::Tensor attn;  // [Qp, Qa] head-averaged weights; defined only for CA
};

// Applies one mixing step after a pathology decoder layer. `stage` selects
// the parameter bundle for the per-level variant; `heads` applies to the
// attention variants. Throws invalid_argument when the two query sets
// disagree in Q or d.
MixResult mix(nn::ParamStore& ps, MixKind kind, const ad::Tensor& q_ana,
              const ad::Tensor& q_path, std::size_t stage,
              std::size_t heads = 4);

// Aggregates cross-attention mass spent by pathology queries on anatomy
// queries across decoder stages, groups it by each anatomy query's matched
// class, and returns the top-k (class, mass) pairs, mass-descending (ties by
// class id). Masses are normalized over the matched queries so they sum to 1
// when anything matched. anatomy_assignment[i] is the class of anatomy query
// i, or -1 if unmatched. Throws invalid_argument for non-attention kinds.
std::vector<std::pair<int, double>> attended_anatomy_report(
    MixKind kind,
    const std::vector<std::vector<double>>& stage_attn,  // each [Qp*Qa]
    std::size_t q_path, std::size_t q_ana,
    const std::vector<int>& anatomy_assignment, std::size_t k);

}  // namespace apex
