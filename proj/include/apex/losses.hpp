#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "apex/nn.hpp"
#include "apex/tensor.hpp"

namespace apex {

// One head's output: per-query mask logits at the finest embedding
// resolution (row k = J_0 tokens dotted with query k) and per-query class
// logits whose last column is the "no object" class.
struct SegmentPrediction {
  ad::Tensor class_logits;  // [Q, classes+1]
  ad::Tensor mask_logits;   // [Q, h0*w0]
  std::size_t h0 = 0, w0 = 0;
  std::size_t classes = 0;  // real classes; class ids are 1..classes
};

// A ground-truth segment: fractional pixel coverage at the loss resolution
// (average-pooled from the full-resolution binary mask) plus its class id.
// When `fine` is present (fine_h*fine_w entries), the mask losses are
// computed against it on bilinearly upsampled logits; the coarse coverage
// then only drives the assignment. Matching stays cheap, supervision stays
// at label resolution.
struct TargetSegment {
  std::vector<double> mask;  // [h0*w0], values in [0,1]
  int cls = 1;               // 1..classes
  std::vector<double> fine;  // optional [fine_h*fine_w] binary mask
  std::size_t fine_h = 0, fine_w = 0;
};

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, target)
  std::vector<std::size_t> unmatched_queries;
  double total_cost = 0.0;
};

struct LossWeights {
  double w_cls = 2.0;
  double w_bce = 5.0;
  double w_dice = 5.0;
  double no_object = 0.1;  // CE weight of the "no object" class
};

// Dot-product head: mask_logits = queries @ j0_tokens^T, class_logits =
// linear classifier on the queries (parameters under "<head_prefix>.cls").
SegmentPrediction predict_segments(nn::ParamStore& ps,
                                   const std::string& head_prefix,
                                   const ad::Tensor& queries,
                                   const ad::Tensor& j0_tokens, std::size_t h0,
                                   std::size_t w0, std::size_t classes);

// Converts an instance-id grid (0 = none) into per-instance coverage
// targets at (h/pool, w/pool) resolution. Classes are read from the label
// grid at each instance's pixels. class_offset shifts the class ids (used
// when pasting pathology classes after anatomy classes). Instances are
// emitted in increasing id order.
std::vector<TargetSegment> coverage_targets(
    const std::vector<std::uint16_t>& instance_grid,
    const std::vector<std::uint16_t>& label_grid, std::size_t h, std::size_t w,
    std::size_t pool, int class_offset = 0);

// Pairwise assignment cost: w_cls * (-softmax prob of the target class)
//   + w_bce * mean sigmoid-BCE(mask logits, coverage)
//   + w_dice * (1 - soft dice). Computed on plain numbers (matching is not
// differentiated). Minimum-cost injective assignment of every target to a
// distinct query; Q >= #targets required.
MatchResult hungarian_match(const SegmentPrediction& pred,
                            const std::vector<TargetSegment>& targets,
                            const LossWeights& w);

// Smoothed soft dice loss on probabilities:
//   1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1).
// Exactly zero when p == t and t is binary.
ad::Tensor soft_dice_loss(const ad::Tensor& probs, const ad::Tensor& target);

// Set-prediction loss for one head:
//   w_cls * CE(class logits; matched class, others "no object" at weight
//   no_object) + (1/#targets) * sum over matched pairs of
//   [w_bce * BCE(mask) + w_dice * dice loss].
// class_weight, when given, must have classes+1 entries and replaces the
// default all-ones (real classes) + no_object weighting.
ad::Tensor segmentation_loss(const SegmentPrediction& pred,
                             const MatchResult& match,
                             const std::vector<TargetSegment>& targets,
                             const LossWeights& w,
                             const std::vector<double>* class_weight = nullptr);

// Single-head pasted-label loss: anatomy classes 1..A at weight 1, pathology
// classes A+1..A+P at weight gamma; gamma <= 0 is an error.
ad::Tensor multitask_loss(const SegmentPrediction& pred,
                          const MatchResult& match,
                          const std::vector<TargetSegment>& targets,
                          const LossWeights& w, std::size_t anatomy_classes,
                          double gamma);

}  // namespace apex
