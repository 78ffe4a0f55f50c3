#include "apex/mixing.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "apex/ops.hpp"

namespace apex {

using ad::Tensor;

std::string mix_kind_name(MixKind k) {
  switch (k) {
    case MixKind::kIdentity: return "identity";
    case MixKind::kSum: return "sum";
    case MixKind::kSum2Way: return "sum_2way";
    case MixKind::kMean: return "mean";
    case MixKind::kCrossAttention: return "cross_attention";
    case MixKind::kCrossAttentionPerLevel: return "cross_attention_per_level";
  }
  throw std::invalid_argument("mix_kind_name: bad kind");
}

MixKind parse_mix_kind(const std::string& name) {
  for (MixKind k : {MixKind::kIdentity, MixKind::kSum, MixKind::kSum2Way,
                    MixKind::kMean, MixKind::kCrossAttention,
                    MixKind::kCrossAttentionPerLevel})
    if (mix_kind_name(k) == name) return k;
  throw std::invalid_argument("unknown mixing kind: '" + name + "'");
}

bool mix_is_attention(MixKind k) {
  return k == MixKind::kCrossAttention ||
         k == MixKind::kCrossAttentionPerLevel;
}

MixResult mix(nn::ParamStore& ps, MixKind kind, const Tensor& q_ana,
              const Tensor& q_path, std::size_t stage, std::size_t heads) {
  if (!ad::shape_eq(q_ana.shape(), q_path.shape()))
    throw std::invalid_argument(
        "mix: branches need equal query counts and dims, got " +
        ad::shape_str(q_ana.shape()) + " vs " + ad::shape_str(q_path.shape()));
  switch (kind) {
    case MixKind::kIdentity:
      return {q_ana, q_path, Tensor()};
    case MixKind::kSum:
      return {q_ana, ad::add(q_path, q_ana), Tensor()};
    case MixKind::kSum2Way: {
      Tensor s = ad::add(q_path, q_ana);
      return {s, s, Tensor()};
    }
    case MixKind::kMean:
      return {q_ana, ad::mul_scalar(ad::add(q_path, q_ana), 0.5), Tensor()};
    case MixKind::kCrossAttention:
    case MixKind::kCrossAttentionPerLevel: {
      std::string prefix = kind == MixKind::kCrossAttention
                               ? std::string("mixer.ca")
                               : "mixer.ca.stage" + std::to_string(stage);
      nn::AttnResult att = nn::multi_head_attention(
          ps, prefix + ".mha", q_path, q_ana, q_ana, heads, nullptr,
          /*zero_init_out=*/true);
      Tensor mixed =
          nn::layer_norm_p(ps, prefix + ".ln", ad::add(q_path, att.out));
      return {q_ana, mixed, att.attn};
    }
  }
  throw std::invalid_argument("mix: bad kind");
}

std::vector<std::pair<int, double>> attended_anatomy_report(
    MixKind kind, const std::vector<std::vector<double>>& stage_attn,
    std::size_t q_path, std::size_t q_ana,
    const std::vector<int>& anatomy_assignment, std::size_t k) {
  if (!mix_is_attention(kind))
    throw std::invalid_argument(
        "attended_anatomy_report: mixing strategy '" + mix_kind_name(kind) +
        "' produces no attention maps");
  if (anatomy_assignment.size() != q_ana)
    throw std::invalid_argument(
        "attended_anatomy_report: assignment size mismatch");

  std::map<int, double> mass;
  double total = 0.0;
  for (const auto& attn : stage_attn) {
    if (attn.size() != q_path * q_ana)
      throw std::invalid_argument(
          "attended_anatomy_report: attention map size mismatch");
    for (std::size_t p = 0; p < q_path; ++p)
      for (std::size_t a = 0; a < q_ana; ++a) {
        int cls = anatomy_assignment[a];
        if (cls < 0) continue;  // unmatched anatomy query
        double m = attn[p * q_ana + a];
        mass[cls] += m;
        total += m;
      }
  }
  std::vector<std::pair<int, double>> ranked(mass.begin(), mass.end());
  if (total > 0.0)
    for (auto& [cls, m] : ranked) m /= total;
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > k) ranked.resize(k);
  return ranked;
}

}  // namespace apex
