#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace apex {

struct BinaryMask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> v;  // row-major, nonzero = inside

  BinaryMask() = default;
  BinaryMask(std::size_t h_, std::size_t w_) : h(h_), w(w_), v(h_ * w_, 0) {}

  std::uint8_t& at(std::size_t i, std::size_t j) { return v[i * w + j]; }
  std::uint8_t at(std::size_t i, std::size_t j) const { return v[i * w + j]; }
  std::size_t count() const;
};

// |a∧b| / |a∨b|; both-empty pairs count as a perfect match (1.0).
double iou(const BinaryMask& a, const BinaryMask& b);

// Mask pixels 4-adjacent to background; the image border counts as
// background.
BinaryMask mask_contour(const BinaryMask& m);

// Exact squared Euclidean distance to the nearest nonzero seed pixel
// (Felzenszwalb-Huttenlocher two-pass transform). Empty seed set -> +inf
// everywhere (1e18).
std::vector<double> edt_squared(const BinaryMask& seeds);

// Pixels within Euclidean distance r of the mask's contour.
BinaryMask boundary_band(const BinaryMask& m, double r);

// IoU restricted to each mask's boundary band:
//   iou(pred ∧ band(pred), gt ∧ band(gt))
// with band radius max(1, dilation_fraction * image diagonal).
double boundary_iou(const BinaryMask& pred, const BinaryMask& gt,
                    double dilation_fraction = 0.02);

struct InstancePred {
  BinaryMask mask;
  int cls = 0;
  double score = 0.0;
  int image = 0;  // matching never crosses image boundaries
};

struct InstanceGt {
  BinaryMask mask;
  int cls = 0;
  int image = 0;
};

// AP for one class at one IoU threshold: predictions ranked by score
// (descending, ties by ascending list index), greedily matched to the
// highest-IoU unmatched ground truth of the same class and image; 101-point
// interpolated precision.
double average_precision(const std::vector<InstancePred>& preds,
                         const std::vector<InstanceGt>& gts, int cls,
                         double thr);

// Mean AP over classes present in the ground truth, averaged over IoU
// thresholds 0.50:0.05:0.95. No ground-truth instances at all -> 0.
double instance_map(const std::vector<InstancePred>& preds,
                    const std::vector<InstanceGt>& gts);

// Dataset-aggregated semantic IoU / boundary IoU: intersections and unions
// are accumulated per class across images and divided once at the end.
class SemanticAccumulator {
 public:
  explicit SemanticAccumulator(double dilation_fraction = 0.02)
      : dilation_fraction_(dilation_fraction) {}

  void add(int cls, const BinaryMask& pred, const BinaryMask& gt);

  // Classes whose accumulated union is zero never occurred and are left out.
  std::map<int, double> per_class_iou() const;
  std::map<int, double> per_class_biou() const;
  double mean_iou() const;
  double mean_biou() const;

 private:
  struct Acc {
    double i = 0, u = 0, bi = 0, bu = 0;
  };
  double dilation_fraction_;
  std::map<int, Acc> acc_;
};

struct FoldSummary {
  double mean = 0, std = 0;
};

// Sample statistics over fold values ((k-1) std denominator); needs >= 2.
FoldSummary aggregate_folds(const std::vector<double>& folds);

// "54.34 ± 1.46" style, two decimals.
std::string format_mean_std(double mean, double std);

}  // namespace apex
