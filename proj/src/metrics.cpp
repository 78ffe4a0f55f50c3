#include "apex/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <stdexcept>

namespace apex {

std::size_t BinaryMask::count() const {
  std::size_t n = 0;
  for (std::uint8_t x : v) n += x != 0;
  return n;
}

namespace {

void check_same_shape(const BinaryMask& a, const BinaryMask& b) {
  if (a.h != b.h || a.w != b.w)
    throw std::invalid_argument("mask shapes differ: " + std::to_string(a.h) +
                                "x" + std::to_string(a.w) + " vs " +
                                std::to_string(b.h) + "x" +
                                std::to_string(b.w));
}

}  // namespace

double iou(const BinaryMask& a, const BinaryMask& b) {
  check_same_shape(a, b);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    bool pa = a.v[i] != 0, pb = b.v[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMask mask_contour(const BinaryMask& m) {
  BinaryMask out(m.h, m.w);
  for (std::size_t i = 0; i < m.h; ++i)
    for (std::size_t j = 0; j < m.w; ++j) {
      if (!m.at(i, j)) continue;
      bool edge = i == 0 || i + 1 == m.h || j == 0 || j + 1 == m.w;
      if (!edge && (!m.at(i - 1, j) || !m.at(i + 1, j) || !m.at(i, j - 1) ||
                    !m.at(i, j + 1)))
        edge = true;
      if (edge) out.at(i, j) = 1;
    }
  return out;
}

namespace {

constexpr double kInf = 1e18;

// Felzenszwalb & Huttenlocher 1-D squared distance transform: lower
// envelope of parabolas rooted at (q, f[q]).
void dt1d(const double* f, double* d, std::size_t n, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < static_cast<int>(n); ++q) {
    double s;
    for (;;) {
      int p = v[k];
      s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p);
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < static_cast<int>(n); ++q) {
    while (z[k + 1] < q) ++k;
    double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace

std::vector<double> edt_squared(const BinaryMask& seeds) {
  std::size_t h = seeds.h, w = seeds.w;
  std::vector<double> d(h * w);
  for (std::size_t i = 0; i < h * w; ++i) d[i] = seeds.v[i] ? 0.0 : kInf;

  std::size_t n = std::max(h, w);
  std::vector<double> f(n), tmp(n), z(n + 1);
  std::vector<int> v(n);

  for (std::size_t j = 0; j < w; ++j) {  // along columns
    for (std::size_t i = 0; i < h; ++i) f[i] = d[i * w + j];
    dt1d(f.data(), tmp.data(), h, v.data(), z.data());
    for (std::size_t i = 0; i < h; ++i) d[i * w + j] = tmp[i];
  }
  for (std::size_t i = 0; i < h; ++i) {  // along rows
    for (std::size_t j = 0; j < w; ++j) f[j] = d[i * w + j];
    dt1d(f.data(), tmp.data(), w, v.data(), z.data());
    for (std::size_t j = 0; j < w; ++j) d[i * w + j] = tmp[j];
  }
  return d;
}

BinaryMask boundary_band(const BinaryMask& m, double r) {
  BinaryMask band(m.h, m.w);
  std::vector<double> d2 = edt_squared(mask_contour(m));
  double r2 = r * r;
  for (std::size_t i = 0; i < d2.size(); ++i)
    if (d2[i] <= r2) band.v[i] = 1;
  return band;
}

double boundary_iou(const BinaryMask& pred, const BinaryMask& gt,
                    double dilation_fraction) {
  check_same_shape(pred, gt);
  double diag = std::hypot(static_cast<double>(pred.h),
                           static_cast<double>(pred.w));
  double r = std::max(1.0, dilation_fraction * diag);
  BinaryMask bp = boundary_band(pred, r);
  BinaryMask bg = boundary_band(gt, r);
  BinaryMask a(pred.h, pred.w), b(pred.h, pred.w);
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    a.v[i] = pred.v[i] && bp.v[i];
    b.v[i] = gt.v[i] && bg.v[i];
  }
  return iou(a, b);
}

double average_precision(const std::vector<InstancePred>& preds,
                         const std::vector<InstanceGt>& gts, int cls,
                         double thr) {
  std::vector<std::size_t> gt_idx;
  for (std::size_t i = 0; i < gts.size(); ++i)
    if (gts[i].cls == cls) gt_idx.push_back(i);
  std::size_t npos = gt_idx.size();
  if (npos == 0) return 0.0;

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i].cls == cls) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a,
                                                   std::size_t b) {
    return preds[a].score > preds[b].score;  // ties keep ascending index
  });

  std::vector<bool> matched(gts.size(), false);
  std::vector<int> tp(order.size(), 0);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const InstancePred& p = preds[order[k]];
    double best = 0.0;
    std::size_t best_gt = gts.size();
    for (std::size_t gi : gt_idx) {
      if (matched[gi] || gts[gi].image != p.image) continue;
      double ov = iou(p.mask, gts[gi].mask);
      if (ov > best) {
        best = ov;
        best_gt = gi;
      }
    }
    // tiny slack so an IoU that mathematically equals the threshold is not
    // lost to floating-point rounding of either side
    if (best >= thr - 1e-12 && best_gt < gts.size()) {
      matched[best_gt] = true;
      tp[k] = 1;
    }
  }

  // precision/recall after each rank, then 101-point interpolation
  std::vector<double> prec(order.size()), rec(order.size());
  int cum = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    cum += tp[k];
    prec[k] = static_cast<double>(cum) / static_cast<double>(k + 1);
    rec[k] = static_cast<double>(cum) / static_cast<double>(npos);
  }
  double ap = 0.0;
  for (int ri = 0; ri <= 100; ++ri) {
    double r = ri / 100.0;
    double best = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k)
      if (rec[k] >= r - 1e-12) best = std::max(best, prec[k]);
    ap += best;
  }
  return ap / 101.0;
}

double instance_map(const std::vector<InstancePred>& preds,
                    const std::vector<InstanceGt>& gts) {
  std::set<int> classes;
  for (const InstanceGt& g : gts) classes.insert(g.cls);
  if (classes.empty()) return 0.0;
  double total = 0.0;
  int terms = 0;
  for (int t = 0; t < 10; ++t) {
    double thr = (50 + 5 * t) / 100.0;
    for (int c : classes) {
      total += average_precision(preds, gts, c, thr);
      ++terms;
    }
  }
  return total / terms;
}

void SemanticAccumulator::add(int cls, const BinaryMask& pred,
                              const BinaryMask& gt) {
  check_same_shape(pred, gt);
  Acc& a = acc_[cls];
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    bool pp = pred.v[i] != 0, pg = gt.v[i] != 0;
    a.i += pp && pg;
    a.u += pp || pg;
  }
  double diag =
      std::hypot(static_cast<double>(pred.h), static_cast<double>(pred.w));
  double r = std::max(1.0, dilation_fraction_ * diag);
  BinaryMask bp = boundary_band(pred, r);
  BinaryMask bg = boundary_band(gt, r);
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    bool pp = pred.v[i] && bp.v[i], pg = gt.v[i] && bg.v[i];
    a.bi += pp && pg;
    a.bu += pp || pg;
  }
}

std::map<int, double> SemanticAccumulator::per_class_iou() const {
  std::map<int, double> out;
  for (const auto& [c, a] : acc_)
    if (a.u > 0) out[c] = a.i / a.u;
  return out;
}

std::map<int, double> SemanticAccumulator::per_class_biou() const {
  std::map<int, double> out;
  for (const auto& [c, a] : acc_)
    if (a.bu > 0) out[c] = a.bi / a.bu;
  return out;
}

namespace {

double mean_of(const std::map<int, double>& m) {
  if (m.empty()) return 0.0;
  double s = 0;
  for (const auto& [c, v] : m) s += v;
  return s / static_cast<double>(m.size());
}

}  // namespace

double SemanticAccumulator::mean_iou() const { return mean_of(per_class_iou()); }
double SemanticAccumulator::mean_biou() const {
  return mean_of(per_class_biou());
}

FoldSummary aggregate_folds(const std::vector<double>& folds) {
  if (folds.size() < 2)
    throw std::invalid_argument("aggregate_folds: need at least 2 folds, got " +
                                std::to_string(folds.size()));
  double mean = std::accumulate(folds.begin(), folds.end(), 0.0) /
                static_cast<double>(folds.size());
  double ss = 0;
  for (double v : folds) ss += (v - mean) * (v - mean);
  double std = std::sqrt(ss / static_cast<double>(folds.size() - 1));
  return {mean, std};
}

std::string format_mean_std(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", mean, std);
  return buf;
}

}  // namespace apex
