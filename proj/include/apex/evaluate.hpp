#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "apex/metrics.hpp"
#include "apex/model.hpp"

namespace apex {

struct EvalReport {
  std::size_t samples = 0;
  std::map<int, double> iou_per_class;  // pathology class -> dataset IoU
  std::map<int, double> biou_per_class;
  double miou = 0.0;
  double mbiou = 0.0;
  double instance_map = 0.0;  // thresholds 0.50:0.05:0.95
  // Anatomy classes receiving pathology cross-attention, aggregated over the
  // matched queries of the whole dataset (attention mixers only).
  bool has_attended = false;
  std::vector<std::pair<int, double>> attended_anatomy;
};

// Bilinear upsampling by an integer factor with half-pixel alignment and
// clamped borders. src is row-major [h*w]; the result is [(h*f)*(w*f)].
std::vector<double> bilinear_upsample(const std::vector<double>& src,
                                      std::size_t h, std::size_t w,
                                      std::size_t factor);

// Aggregated per-class scores at full resolution: for each class c (1-based
// within [offset+1, offset+count]), S_c = min(1, sum_q softmax(class)_qc *
// sigmoid(upsampled mask logit_q)). Returned as `count` maps of out_h*out_w.
std::vector<std::vector<double>> class_score_maps(const SegmentPrediction& pred,
                                                  std::size_t class_offset,
                                                  std::size_t class_count,
                                                  std::size_t out_h,
                                                  std::size_t out_w);

// Per-pixel hard label map (0 = none): the class of the highest score map
// where that score reaches 0.5.
std::vector<std::uint8_t> predicted_label_map(const SegmentPrediction& pred,
                                              std::size_t class_offset,
                                              std::size_t class_count,
                                              std::size_t out_h,
                                              std::size_t out_w);

// Full evaluation pass: dataset-aggregated semantic IoU / boundary IoU per
// pathology class, instance mAP, and (for attention mixers) the attended
// anatomy distribution truncated to `attended_k` classes.
EvalReport evaluate_model(ApexModel& model,
                          const std::vector<SampleRecord>& data,
                          std::size_t attended_k = 6);

}  // namespace apex
