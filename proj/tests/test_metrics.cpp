#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "apex/metrics.hpp"
#include "apex/rng.hpp"

using namespace apex;

namespace {

BinaryMask rect(std::size_t h, std::size_t w, std::size_t r0, std::size_t r1,
                std::size_t c0, std::size_t c1) {
  BinaryMask m(h, w);
  for (std::size_t i = r0; i < r1; ++i)
    for (std::size_t j = c0; j < c1; ++j) m.at(i, j) = 1;
  return m;
}

BinaryMask random_blobs(std::size_t h, std::size_t w, Rng& rng) {
  BinaryMask m(h, w);
  int blobs = rng.uniform_int(0, 3);
  for (int b = 0; b < blobs; ++b) {
    double cy = rng.uniform(0, static_cast<double>(h));
    double cx = rng.uniform(0, static_cast<double>(w));
    double r = rng.uniform(1.0, h / 3.0);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        if ((i - cy) * (i - cy) + (j - cx) * (j - cx) <= r * r) m.at(i, j) = 1;
  }
  return m;
}

// Brute-force band oracle: squared distance to the nearest contour pixel by
// direct enumeration.
BinaryMask brute_band(const BinaryMask& m, double r) {
  BinaryMask c = mask_contour(m);
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < m.h; ++i)
    for (std::size_t j = 0; j < m.w; ++j)
      if (c.at(i, j)) pts.emplace_back(i, j);
  BinaryMask band(m.h, m.w);
  for (std::size_t i = 0; i < m.h; ++i)
    for (std::size_t j = 0; j < m.w; ++j) {
      double best = 1e18;
      for (auto [y, x] : pts) {
        double d2 = (y - i) * (y - i) + (x - j) * (x - j);
        best = std::min(best, d2);
      }
      if (best <= r * r) band.at(i, j) = 1;
    }
  return band;
}

double brute_boundary_iou(const BinaryMask& pred, const BinaryMask& gt,
                          double frac) {
  double diag = std::hypot(static_cast<double>(pred.h),
                           static_cast<double>(pred.w));
  double r = std::max(1.0, frac * diag);
  BinaryMask bp = brute_band(pred, r), bg = brute_band(gt, r);
  BinaryMask a(pred.h, pred.w), b(pred.h, pred.w);
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    a.v[i] = pred.v[i] && bp.v[i];
    b.v[i] = gt.v[i] && bg.v[i];
  }
  return iou(a, b);
}

}  // namespace

TEST_CASE("iou basics") {
  BinaryMask a = rect(8, 8, 2, 6, 2, 6);
  CHECK(iou(a, a) == 1.0);

  BinaryMask b = rect(8, 8, 0, 2, 0, 2);
  BinaryMask c = rect(8, 8, 4, 6, 4, 6);
  CHECK(iou(b, c) == 0.0);

  BinaryMask full = rect(8, 8, 0, 8, 0, 8);
  BinaryMask left = rect(8, 8, 0, 8, 0, 4);
  CHECK(iou(left, full) == 0.5);

  BinaryMask empty(8, 8);
  CHECK(iou(empty, empty) == 1.0);
  CHECK(iou(empty, full) == 0.0);

  CHECK(iou(left, full) == iou(full, left));
  CHECK_THROWS(iou(BinaryMask(4, 4), BinaryMask(5, 5)));
}

TEST_CASE("exact distance transform matches brute force") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    BinaryMask seeds(13, 17);
    for (auto& x : seeds.v) x = rng.uniform() < 0.08;
    std::vector<double> d2 = edt_squared(seeds);
    for (std::size_t i = 0; i < 13; ++i)
      for (std::size_t j = 0; j < 17; ++j) {
        double best = 1e18;
        for (std::size_t y = 0; y < 13; ++y)
          for (std::size_t x = 0; x < 17; ++x)
            if (seeds.at(y, x)) {
              double dd = (double(y) - i) * (double(y) - i) +
                          (double(x) - j) * (double(x) - j);
              best = std::min(best, dd);
            }
        CHECK(d2[i * 17 + j] == doctest::Approx(best).epsilon(1e-9));
      }
  }
}

TEST_CASE("boundary band matches the brute-force oracle on random masks") {
  Rng rng(77);
  for (int trial = 0; trial < 15; ++trial) {
    BinaryMask m = random_blobs(16, 16, rng);
    double r = rng.uniform(0.8, 4.0);
    BinaryMask fast = boundary_band(m, r);
    BinaryMask slow = brute_band(m, r);
    CHECK(fast.v == slow.v);
  }
}

TEST_CASE("boundary_iou identical masks and frozen shifted-square value") {
  BinaryMask gt = rect(10, 10, 2, 8, 2, 8);
  CHECK(boundary_iou(gt, gt) == 1.0);

  // 6x6 square vs the same square shifted right by one, r = max(1, .02*diag)
  // = 1. Band-restricted masks intersect in 24 pixels over a 40-pixel union.
  BinaryMask pred = rect(10, 10, 2, 8, 3, 9);
  CHECK(iou(pred, gt) == doctest::Approx(30.0 / 42.0).epsilon(1e-12));
  double b = boundary_iou(pred, gt);
  CHECK(b == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(b == doctest::Approx(brute_boundary_iou(pred, gt, 0.02)).epsilon(1e-12));
  CHECK(boundary_iou(gt, pred) == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("boundary_iou equals iou when the band covers everything") {
  Rng rng(31337);
  for (int trial = 0; trial < 100; ++trial) {
    BinaryMask a = random_blobs(12, 12, rng);
    BinaryMask b = random_blobs(12, 12, rng);
    // dilation_fraction 1.0 -> r = diagonal >= any in-image distance
    CHECK(boundary_iou(a, b, 1.0) == doctest::Approx(iou(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("instance_map on the worked examples") {
  BinaryMask g1 = rect(16, 16, 2, 10, 2, 10);

  SUBCASE("single exact match with score 1") {
    std::vector<InstanceGt> gts = {{g1, 1, 0}};
    std::vector<InstancePred> preds = {{g1, 1, 1.0, 0}};
    CHECK(instance_map(preds, gts) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("no predictions") {
    std::vector<InstanceGt> gts = {{g1, 1, 0}};
    CHECK(instance_map({}, gts) == 0.0);
  }

  SUBCASE("hand-enumerated PR curve") {
    // pred1 (score .9) overlaps gt1 at IoU .6; pred2 (score .8) misses both.
    // Ranked sequence is TP then FP: precision 1.0 at recall 0.5, precision
    // 0.5 at recall 0.5. Interpolated precision is 1 for recalls 0.00..0.50
    // and 0 above, so 101-point AP@0.5 = 51/101.
    BinaryMask gt1 = rect(16, 16, 0, 12, 0, 8);     // 96 px
    BinaryMask pred1 = rect(16, 16, 0, 12, 2, 10);  // inter 72, union 120
    CHECK(iou(pred1, gt1) == doctest::Approx(0.6).epsilon(1e-12));
    BinaryMask gt2 = rect(16, 16, 13, 16, 13, 16);
    BinaryMask pred2 = rect(16, 16, 0, 3, 13, 16);  // disjoint from both

    std::vector<InstanceGt> gts = {{gt1, 1, 0}, {gt2, 1, 0}};
    std::vector<InstancePred> preds = {{pred1, 1, 0.9, 0},
                                       {pred2, 1, 0.8, 0}};
    double ap50 = average_precision(preds, gts, 1, 0.5);
    CHECK(ap50 == doctest::Approx(51.0 / 101.0).epsilon(1e-12));
    // IoU .6 clears thresholds .50/.55/.60; the seven higher ones score 0
    double expected_map = 3.0 * (51.0 / 101.0) / 10.0;
    CHECK(instance_map(preds, gts) ==
          doctest::Approx(expected_map).epsilon(1e-12));
  }

  SUBCASE("prediction list order does not matter for distinct scores") {
    BinaryMask gt2 = rect(16, 16, 10, 16, 10, 16);
    std::vector<InstanceGt> gts = {{g1, 1, 0}, {gt2, 2, 0}};
    std::vector<InstancePred> preds = {{g1, 1, 0.9, 0},
                                       {gt2, 2, 0.7, 0},
                                       {rect(16, 16, 0, 3, 0, 3), 1, 0.5, 0}};
    double m1 = instance_map(preds, gts);
    std::reverse(preds.begin(), preds.end());
    double m2 = instance_map(preds, gts);
    CHECK(m1 == doctest::Approx(m2).epsilon(1e-12));
  }

  SUBCASE("classes absent from gt are excluded") {
    std::vector<InstanceGt> gts = {{g1, 1, 0}};
    std::vector<InstancePred> preds = {{g1, 1, 1.0, 0},
                                       {g1, 9, 1.0, 0}};  // class 9 ignored
    CHECK(instance_map(preds, gts) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("matching never crosses images") {
    std::vector<InstanceGt> gts = {{g1, 1, 0}};
    std::vector<InstancePred> preds = {{g1, 1, 1.0, 1}};  // right mask, wrong image
    CHECK(instance_map(preds, gts) == 0.0);
  }
}

TEST_CASE("aggregate_folds and formatting") {
  FoldSummary s = aggregate_folds({50.0, 60.0});
  CHECK(s.mean == doctest::Approx(55.0).epsilon(1e-12));
  CHECK(s.std == doctest::Approx(std::sqrt(50.0)).epsilon(1e-12));
  CHECK(format_mean_std(s.mean, s.std) == "55.00 ± 7.07");

  FoldSummary same = aggregate_folds({4.2, 4.2, 4.2});
  CHECK(same.std == 0.0);

  CHECK_THROWS(aggregate_folds({1.0}));
  CHECK_THROWS(aggregate_folds({}));

  CHECK(format_mean_std(54.342, 1.456) == "54.34 ± 1.46");
}

TEST_CASE("semantic accumulator aggregates over the dataset") {
  SemanticAccumulator acc;
  BinaryMask g = rect(8, 8, 0, 4, 0, 8);
  BinaryMask p = rect(8, 8, 0, 2, 0, 8);
  acc.add(1, p, g);   // I 16, U 32
  acc.add(1, g, g);   // I 32, U 32
  auto per = acc.per_class_iou();
  REQUIRE(per.count(1) == 1);
  CHECK(per[1] == doctest::Approx(48.0 / 64.0).epsilon(1e-12));
  // class never seen anywhere stays out of the mean
  acc.add(2, BinaryMask(8, 8), BinaryMask(8, 8));
  CHECK(acc.per_class_iou().count(2) == 0);
  CHECK(acc.mean_iou() == doctest::Approx(0.75).epsilon(1e-12));
}
