#include "apex/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "apex/hungarian.hpp"
#include "apex/ops.hpp"

namespace apex {

using ad::Tensor;

SegmentPrediction predict_segments(nn::ParamStore& ps,
                                   const std::string& head_prefix,
                                   const Tensor& queries,
                                   const Tensor& j0_tokens, std::size_t h0,
                                   std::size_t w0, std::size_t classes) {
  SegmentPrediction out;
  out.classes = classes;
  out.h0 = h0;
  out.w0 = w0;
  out.class_logits = nn::linear(ps, head_prefix + ".cls", queries, classes + 1,
                                nn::InitSpec::normal(0.02));
  out.mask_logits = ad::matmul(queries, ad::transpose(j0_tokens));
  return out;
}

std::vector<TargetSegment> coverage_targets(
    const std::vector<std::uint16_t>& instance_grid,
    const std::vector<std::uint16_t>& label_grid, std::size_t h, std::size_t w,
    std::size_t pool, int class_offset) {
  if (instance_grid.size() != h * w || label_grid.size() != h * w)
    throw std::invalid_argument("coverage_targets: grid size mismatch");
  if (pool == 0 || h % pool != 0 || w % pool != 0)
    throw std::invalid_argument(
        "coverage_targets: pool must divide both extents");

  // id -> class, discovered over the grid
  std::map<std::uint16_t, int> cls_of;
  for (std::size_t i = 0; i < h * w; ++i)
    if (instance_grid[i] != 0)
      cls_of.emplace(instance_grid[i], int(label_grid[i]) + class_offset);

  std::size_t hp = h / pool, wp = w / pool;
  double block = double(pool * pool);
  std::vector<TargetSegment> out;
  for (const auto& [id, cls] : cls_of) {
    TargetSegment seg;
    seg.cls = cls;
    seg.mask.assign(hp * wp, 0.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (instance_grid[y * w + x] == id)
          seg.mask[(y / pool) * wp + (x / pool)] += 1.0;
    for (double& v : seg.mask) v /= block;
    out.push_back(std::move(seg));
  }
  return out;
}

namespace {

// Stable single-element pieces of the matching cost, on plain numbers.
double bce_raw(double z, double t) {
  return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid_raw(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

MatchResult hungarian_match(const SegmentPrediction& pred,
                            const std::vector<TargetSegment>& targets,
                            const LossWeights& w) {
  std::size_t q_count = pred.class_logits.shape()[0];
  std::size_t hw = pred.h0 * pred.w0;
  MatchResult res;
  if (targets.empty()) {
    for (std::size_t q = 0; q < q_count; ++q)
      res.unmatched_queries.push_back(q);
    return res;
  }
  if (targets.size() > q_count)
    throw std::invalid_argument(
        "hungarian_match: more targets than queries (" +
        std::to_string(targets.size()) + " > " + std::to_string(q_count) +
        ")");

  // Per-query class probabilities (row softmax, stable).
  std::size_t cc = pred.class_logits.shape()[1];
  const double* cl = pred.class_logits.data();
  std::vector<double> prob(q_count * cc);
  for (std::size_t q = 0; q < q_count; ++q) {
    const double* row = cl + q * cc;
    double mx = *std::max_element(row, row + cc);
    double sum = 0.0;
    for (std::size_t c = 0; c < cc; ++c) {
      prob[q * cc + c] = std::exp(row[c] - mx);
      sum += prob[q * cc + c];
    }
    for (std::size_t c = 0; c < cc; ++c) prob[q * cc + c] /= sum;
  }

  const double* ml = pred.mask_logits.data();
  std::vector<double> cost(targets.size() * q_count);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const TargetSegment& seg = targets[t];
    if (seg.mask.size() != hw)
      throw std::invalid_argument("hungarian_match: target mask size mismatch");
    if (seg.cls < 1 || std::size_t(seg.cls) > pred.classes)
      throw std::invalid_argument("hungarian_match: target class out of range");
    double tsum = 0.0;
    for (double v : seg.mask) tsum += v;
    for (std::size_t q = 0; q < q_count; ++q) {
      const double* row = ml + q * hw;
      double bce = 0.0, inter = 0.0, psum = 0.0;
      for (std::size_t p = 0; p < hw; ++p) {
        bce += bce_raw(row[p], seg.mask[p]);
        double s = sigmoid_raw(row[p]);
        inter += s * seg.mask[p];
        psum += s;
      }
      double dice = (2.0 * inter + 1.0) / (psum + tsum + 1.0);
      double c = w.w_cls * (-prob[q * cc + std::size_t(seg.cls - 1)]) +
                 w.w_bce * (bce / double(hw)) + w.w_dice * (1.0 - dice);
      cost[t * q_count + q] = c;
    }
  }

  std::vector<std::size_t> t2q = solve_assignment(cost, targets.size(), q_count);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    pairs.emplace_back(t2q[t], t);
    res.total_cost += cost[t * q_count + t2q[t]];
  }
  std::sort(pairs.begin(), pairs.end());
  res.pairs = std::move(pairs);
  std::vector<bool> used(q_count, false);
  for (const auto& [q, t] : res.pairs) used[q] = true;
  for (std::size_t q = 0; q < q_count; ++q)
    if (!used[q]) res.unmatched_queries.push_back(q);
  return res;
}

Tensor soft_dice_loss(const Tensor& probs, const Tensor& target) {
  Tensor inter = ad::sum_all(ad::mul(probs, target));
  Tensor num = ad::add_scalar(ad::mul_scalar(inter, 2.0), 1.0);
  Tensor den = ad::add_scalar(
      ad::add(ad::sum_all(probs), ad::sum_all(target)), 1.0);
  return ad::add_scalar(ad::neg(ad::div(num, den)), 1.0);
}

Tensor segmentation_loss(const SegmentPrediction& pred,
                         const MatchResult& match,
                         const std::vector<TargetSegment>& targets,
                         const LossWeights& w,
                         const std::vector<double>* class_weight) {
  std::size_t q_count = pred.class_logits.shape()[0];
  std::size_t hw = pred.h0 * pred.w0;

  std::vector<double> weights;
  if (class_weight) {
    if (class_weight->size() != pred.classes + 1)
      throw std::invalid_argument(
          "segmentation_loss: class_weight needs classes+1 entries");
    weights = *class_weight;
  } else {
    weights.assign(pred.classes + 1, 1.0);
    weights.back() = w.no_object;
  }

  std::vector<std::size_t> cls_target(q_count, pred.classes);  // "no object"
  for (const auto& [q, t] : match.pairs)
    cls_target[q] = std::size_t(targets[t].cls - 1);
  Tensor loss = ad::mul_scalar(
      ad::cross_entropy_rows(pred.class_logits, cls_target, weights), w.w_cls);

  if (!match.pairs.empty()) {
    Tensor mask_sum;
    for (const auto& [q, t] : match.pairs) {
      Tensor row = ad::slice(pred.mask_logits, 0, q, 1);  // [1, hw]
      const TargetSegment& seg = targets[t];
      Tensor tgt;
      if (!seg.fine.empty()) {
        if (seg.fine.size() != seg.fine_h * seg.fine_w ||
            seg.fine_h % pred.h0 != 0 ||
            seg.fine_h / pred.h0 != seg.fine_w / pred.w0)
          throw std::invalid_argument(
              "segmentation_loss: fine mask resolution not an integer "
              "multiple of the prediction resolution");
        std::size_t factor = seg.fine_h / pred.h0;
        if (factor > 1) row = ad::upsample_bilinear(row, pred.h0, pred.w0,
                                                    factor);
        tgt = Tensor::from_values({1, seg.fine.size()}, seg.fine);
      } else {
        tgt = Tensor::from_values({1, hw}, seg.mask);
      }
      Tensor bce = ad::mean_all(ad::bce_with_logits(row, tgt));
      Tensor dice = soft_dice_loss(ad::sigmoid(row), tgt);
      Tensor pair_loss = ad::add(ad::mul_scalar(bce, w.w_bce),
                                 ad::mul_scalar(dice, w.w_dice));
      mask_sum = mask_sum.defined() ? ad::add(mask_sum, pair_loss) : pair_loss;
    }
    loss = ad::add(loss,
                   ad::mul_scalar(mask_sum, 1.0 / double(match.pairs.size())));
  }
  return loss;
}

Tensor multitask_loss(const SegmentPrediction& pred, const MatchResult& match,
                      const std::vector<TargetSegment>& targets,
                      const LossWeights& w, std::size_t anatomy_classes,
                      double gamma) {
  if (gamma <= 0.0)
    throw std::invalid_argument("multitask_loss: gamma must be positive, got " +
                                std::to_string(gamma));
  if (pred.classes <= anatomy_classes)
    throw std::invalid_argument(
        "multitask_loss: head must cover anatomy plus pathology classes");
  std::vector<double> weights(pred.classes + 1, 1.0);
  for (std::size_t c = anatomy_classes; c < pred.classes; ++c)
    weights[c] = gamma;
  weights.back() = w.no_object;
  return segmentation_loss(pred, match, targets, w, &weights);
}

}  // namespace apex
