#include "apex/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>
#include <stdexcept>
#include <string>

#include "apex/metrics.hpp"
#include "apex/rng.hpp"

namespace apex {

void GeneratorConfig::validate() const {
  if (rho < 0.0 || rho > 1.0)
    throw std::invalid_argument("generator: rho " + std::to_string(rho) +
                                " outside [0,1]");
  if (anatomy_classes < 2)
    throw std::invalid_argument("generator: need at least 2 anatomy classes");
  if (pathology_classes < 1)
    throw std::invalid_argument("generator: need at least 1 pathology class");
  if (h < 16 || w < 16)
    throw std::invalid_argument("generator: image too small");
  if (min_pathologies < 1 || max_pathologies < min_pathologies)
    throw std::invalid_argument("generator: bad pathology count range");
}

int host_of(int pathology_class, int anatomy_classes) {
  return ((pathology_class - 1) % anatomy_classes) + 1;
}

int donor_of(int pathology_class, int anatomy_classes) {
  return (host_of(pathology_class, anatomy_classes) % anatomy_classes) + 1;
}

namespace {

constexpr double kTau = 6.283185307179586476925286766559;

struct Layout {
  std::vector<std::uint8_t> body;     // 1 = inside
  std::vector<std::uint16_t> region;  // 0 bg, 1..A
  std::vector<std::size_t> region_size;
};

Layout build_layout(const GeneratorConfig& cfg, std::uint64_t index,
                    int attempt) {
  std::size_t h = cfg.h, w = cfg.w;
  int A = cfg.anatomy_classes;
  Rng rng(hash_combine(hash_combine(hash_combine(cfg.seed, "layout"), index),
                       static_cast<std::uint64_t>(attempt)));

  double cy = h / 2.0 + rng.uniform(-2.0, 2.0);
  double cx = w / 2.0 + rng.uniform(-2.0, 2.0);
  double ry = h * rng.uniform(0.34, 0.405);
  double rx = w * rng.uniform(0.34, 0.405);
  // radial deformation harmonics give the body a lumpy organic outline
  double amp[3], pha[3];
  for (int k = 0; k < 3; ++k) {
    amp[k] = rng.uniform(0.0, 0.055);
    pha[k] = rng.uniform(0.0, kTau);
  }

  // anatomy seeds sorted by angle so class identity is a consistent body plan
  std::vector<double> sy(A), sx(A);
  double spacing = kTau / A;
  for (int s = 0; s < A; ++s) {
    double ang = spacing * (s + 0.5) + rng.uniform(-0.35, 0.35) * spacing;
    double f = rng.uniform(0.40, 0.62);
    sy[s] = cy + f * ry * std::sin(ang);
    sx[s] = cx + f * rx * std::cos(ang);
  }

  // smooth coordinate warp wobbles the straight Voronoi edges
  double wy_amp = rng.uniform(1.2, 2.8), wy_ph = rng.uniform(0.0, kTau);
  double wx_amp = rng.uniform(1.2, 2.8), wx_ph = rng.uniform(0.0, kTau);
  int wy_f = rng.uniform_int(1, 2), wx_f = rng.uniform_int(1, 2);

  Layout lay;
  lay.body.assign(h * w, 0);
  lay.region.assign(h * w, 0);
  lay.region_size.assign(A + 1, 0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double dy = (i - cy) / ry, dx = (j - cx) / rx;
      double rho_n = std::sqrt(dy * dy + dx * dx);
      double theta = std::atan2(dy, dx);
      double lim = 1.0;
      for (int k = 0; k < 3; ++k)
        lim += amp[k] * std::sin((k + 2) * theta + pha[k]);
      if (rho_n > lim) continue;
      lay.body[i * w + j] = 1;

      double iw = i + wy_amp * std::sin(kTau * wy_f * j / w + wy_ph);
      double jw = j + wx_amp * std::sin(kTau * wx_f * i / h + wx_ph);
      int best = 0;
      double best_d = 1e300;
      for (int s = 0; s < A; ++s) {
        double ddy = (iw - sy[s]) / ry, ddx = (jw - sx[s]) / rx;
        double d = ddy * ddy + ddx * ddx;
        if (d < best_d) {
          best_d = d;
          best = s;
        }
      }
      lay.region[i * w + j] = static_cast<std::uint16_t>(best + 1);
      ++lay.region_size[best + 1];
    }
  return lay;
}

// Pixels of a region at least `margin` away (Euclidean) from anything that
// is not this region; falls back to the whole region when the interior is
// empty.
std::vector<std::size_t> interior_pixels(const Layout& lay, std::size_t h,
                                         std::size_t w, int region,
                                         double margin) {
  BinaryMask outside(h, w);
  for (std::size_t i = 0; i < h * w; ++i)
    outside.v[i] = lay.region[i] != region;
  std::vector<double> d2 = edt_squared(outside);
  std::vector<std::size_t> out;
  double m2 = margin * margin;
  for (std::size_t i = 0; i < h * w; ++i)
    if (lay.region[i] == region && d2[i] >= m2) out.push_back(i);
  if (out.empty())
    for (std::size_t i = 0; i < h * w; ++i)
      if (lay.region[i] == region) out.push_back(i);
  return out;
}

struct Island {
  std::vector<std::size_t> pixels;
  double cy = 0, cx = 0, r = 0;
  int texture = 0;     // anatomy class whose intensity it copies
  int path_class = 0;  // 0 = distractor
  double bump = 0;
};

// Disc around the center clipped to the center's region, connected part
// containing the center. Empty result when the center is already occupied.
std::vector<std::size_t> carve_island(const Layout& lay,
                                      const std::vector<std::uint8_t>& occ,
                                      std::size_t h, std::size_t w,
                                      std::size_t center, double r) {
  if (occ[center]) return {};
  int region = lay.region[center];
  std::size_t ci = center / w, cj = center % w;
  std::vector<std::uint8_t> seen(h * w, 0);
  std::vector<std::size_t> pixels;
  std::deque<std::size_t> queue{center};
  seen[center] = 1;
  bool clean = true;
  while (!queue.empty()) {
    std::size_t p = queue.front();
    queue.pop_front();
    pixels.push_back(p);
    std::size_t pi = p / w, pj = p % w;
    const std::ptrdiff_t di[4] = {1, -1, 0, 0}, dj[4] = {0, 0, 1, -1};
    for (int k = 0; k < 4; ++k) {
      std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(pi) + di[k];
      std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(pj) + dj[k];
      if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(h) ||
          nj >= static_cast<std::ptrdiff_t>(w))
        continue;
      std::size_t np = ni * w + nj;
      if (seen[np] || lay.region[np] != region) continue;
      double dy = ni - static_cast<double>(ci), dx = nj - static_cast<double>(cj);
      if (dy * dy + dx * dx > r * r) continue;
      if (occ[np]) {
        clean = false;
        continue;
      }
      seen[np] = 1;
      queue.push_back(np);
    }
  }
  // rejecting on any brush with an existing island keeps instances disjoint
  // and non-touching
  if (!clean) return {};
  return pixels;
}

}  // namespace

std::pair<std::vector<std::uint16_t>, int> label_connected_components(
    const std::vector<std::uint16_t>& labels, std::size_t h, std::size_t w,
    int first_id) {
  std::vector<std::uint16_t> inst(h * w, 0);
  int next = first_id;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (labels[start] == 0 || inst[start] != 0) continue;
    std::uint16_t cls = labels[start];
    std::deque<std::size_t> queue{start};
    inst[start] = static_cast<std::uint16_t>(next);
    while (!queue.empty()) {
      std::size_t p = queue.front();
      queue.pop_front();
      std::size_t pi = p / w, pj = p % w;
      const std::ptrdiff_t di[4] = {1, -1, 0, 0}, dj[4] = {0, 0, 1, -1};
      for (int k = 0; k < 4; ++k) {
        std::ptrdiff_t ni = static_cast<std::ptrdiff_t>(pi) + di[k];
        std::ptrdiff_t nj = static_cast<std::ptrdiff_t>(pj) + dj[k];
        if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(h) ||
            nj >= static_cast<std::ptrdiff_t>(w))
          continue;
        std::size_t np = ni * w + nj;
        if (inst[np] == 0 && labels[np] == cls) {
          inst[np] = static_cast<std::uint16_t>(next);
          queue.push_back(np);
        }
      }
    }
    ++next;
  }
  return {std::move(inst), next - first_id};
}

SampleRecord generate_sample(const GeneratorConfig& cfg, std::uint64_t index) {
  cfg.validate();
  std::size_t h = cfg.h, w = cfg.w;
  int A = cfg.anatomy_classes, P = cfg.pathology_classes;

  // deterministic fallback chain: retry the layout with a perturbed stream
  // until every region is large enough to host an island
  Layout lay;
  const std::size_t min_region = (h * w) / 28;
  for (int attempt = 0; attempt < 8; ++attempt) {
    lay = build_layout(cfg, index, attempt);
    bool ok = true;
    for (int c = 1; c <= A; ++c)
      if (lay.region_size[c] < min_region) ok = false;
    if (ok) break;
  }

  std::vector<std::vector<std::size_t>> margin(A + 1);
  std::vector<std::size_t> body_margin;
  for (int c = 1; c <= A; ++c) {
    margin[c] = interior_pixels(lay, h, w, c, 4.0);
    body_margin.insert(body_margin.end(), margin[c].begin(), margin[c].end());
  }
  std::sort(body_margin.begin(), body_margin.end());

  std::set<std::pair<int, int>> signatures;  // (texture, region) = pathology
  for (int z = 1; z <= P; ++z)
    signatures.insert({donor_of(z, A), host_of(z, A)});

  std::vector<Island> islands;
  std::vector<std::uint8_t> occupied(h * w, 0);

  auto place = [&](Rng& rng, const std::vector<std::size_t>& candidates,
                   double radius, int texture, int path_class,
                   double bump) -> bool {
    if (candidates.empty()) return false;
    double r = radius;
    for (int attempt = 0; attempt < 40; ++attempt) {
      if (attempt > 0 && attempt % 8 == 0) r = std::max(2.5, r * 0.85);
      std::size_t center = candidates[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
      std::vector<std::size_t> px = carve_island(lay, occupied, h, w, center, r);
      if (px.empty()) continue;
      Island isl;
      isl.pixels = std::move(px);
      isl.cy = static_cast<double>(center / w);
      isl.cx = static_cast<double>(center % w);
      isl.r = r;
      isl.texture = texture;
      isl.path_class = path_class;
      isl.bump = bump;
      for (std::size_t p : isl.pixels) occupied[p] = 1;
      islands.push_back(std::move(isl));
      return true;
    }
    return false;
  };

  // pathology islands first so at least one always finds room
  {
    Rng rng(hash_combine(hash_combine(cfg.seed, "pathology"), index));
    int n = rng.uniform_int(cfg.min_pathologies, cfg.max_pathologies);
    for (int k = 0; k < n; ++k) {
      int z = rng.uniform_int(1, P);
      bool in_host = rng.uniform() < cfg.rho;
      double r = rng.uniform(cfg.min_island_radius, cfg.max_island_radius);
      double bump = std::clamp(rng.normal(0.55, 0.12), 0.15, 1.2);
      const std::vector<std::size_t>& cand =
          in_host ? margin[host_of(z, A)] : body_margin;
      place(rng, cand, r, donor_of(z, A), z, bump);
    }
    if (islands.empty()) {
      // degenerate fallback: tiny island, first free interior pixel
      Island isl;
      for (std::size_t p : body_margin)
        if (!occupied[p]) {
          isl.pixels = {p};
          isl.cy = static_cast<double>(p / w);
          isl.cx = static_cast<double>(p % w);
          isl.r = 1.0;
          isl.texture = donor_of(1, A);
          isl.path_class = 1;
          isl.bump = 0.55;
          occupied[p] = 1;
          break;
        }
      if (!isl.pixels.empty()) islands.push_back(std::move(isl));
    }
  }

  {
    Rng rng(hash_combine(hash_combine(cfg.seed, "distractor"), index));
    int n = rng.uniform_int(cfg.min_distractors, cfg.max_distractors);
    for (int k = 0; k < n; ++k) {
      bool avoid_sig = rng.uniform() < cfg.rho;
      int region = 0, texture = 0;
      for (int tries = 0; tries < 30; ++tries) {
        region = rng.uniform_int(1, A);
        texture = rng.uniform_int(1, A);
        if (texture == region) continue;
        if (avoid_sig && signatures.count({texture, region})) continue;
        break;
      }
      if (texture == region) continue;
      double r = rng.uniform(cfg.min_island_radius, cfg.max_island_radius);
      double bump = std::clamp(rng.normal(0.35, 0.12), 0.08, 1.0);
      place(rng, margin[region], r, texture, 0, bump);
    }
  }

  // render; all noise is drawn first in pixel order so it never depends on
  // how many islands were placed
  Rng rng_t(hash_combine(hash_combine(cfg.seed, "texture"), index));
  std::vector<double> n0(h * w), n1(h * w);
  for (double& v : n0) v = rng_t.normal(0.0, 1.0);
  for (double& v : n1) v = rng_t.normal(0.0, 1.0);

  std::vector<double> ch0(h * w), ch1(h * w);
  auto class_mu = [&](int c) {
    return 0.25 + 0.55 * (c - 1) / static_cast<double>(A - 1);
  };
  for (std::size_t i = 0; i < h * w; ++i) {
    int c = lay.region[i];
    ch0[i] = c == 0 ? 0.05 : class_mu(c);
    ch1[i] = c == 0 ? 0.02 : 0.12;
  }
  for (const Island& isl : islands)
    for (std::size_t p : isl.pixels) ch0[p] = class_mu(isl.texture);
  for (const Island& isl : islands) {
    double sigma = std::max(1.5, isl.r / 1.6);
    int reach = static_cast<int>(std::ceil(2.5 * sigma));
    int ci = static_cast<int>(isl.cy), cj = static_cast<int>(isl.cx);
    for (int i = std::max(0, ci - reach);
         i <= std::min(static_cast<int>(h) - 1, ci + reach); ++i)
      for (int j = std::max(0, cj - reach);
           j <= std::min(static_cast<int>(w) - 1, cj + reach); ++j) {
        std::size_t p = static_cast<std::size_t>(i) * w + j;
        if (!lay.body[p]) continue;
        double dy = i - isl.cy, dx = j - isl.cx;
        ch1[p] += isl.bump *
                  std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      }
  }
  for (std::size_t i = 0; i < h * w; ++i) {
    ch0[i] = std::clamp(ch0[i] + cfg.noise * n0[i], 0.0, 1.6);
    ch1[i] = std::clamp(ch1[i] + 0.03 * n1[i], 0.0, 1.6);
  }

  SampleRecord rec;
  rec.h = static_cast<std::uint32_t>(h);
  rec.w = static_cast<std::uint32_t>(w);
  rec.image.assign(3 * h * w, 0.0f);
  for (std::size_t i = 0; i < h * w; ++i) {
    rec.image[i] = static_cast<float>(ch0[i]);
    rec.image[h * w + i] = static_cast<float>(ch1[i]);
    // channel 2 stays exactly zero
  }

  rec.anatomy_label = lay.region;
  auto [ana_inst, ana_count] =
      label_connected_components(lay.region, h, w, 1);
  rec.anatomy_instance = std::move(ana_inst);

  rec.pathology_label.assign(h * w, 0);
  rec.pathology_instance.assign(h * w, 0);
  int next_id = 1 + ana_count;
  for (const Island& isl : islands) {
    if (isl.path_class == 0) continue;
    for (std::size_t p : isl.pixels) {
      rec.pathology_label[p] = static_cast<std::uint16_t>(isl.path_class);
      rec.pathology_instance[p] = static_cast<std::uint16_t>(next_id);
    }
    ++next_id;
  }
  return rec;
}

std::vector<SampleRecord> generate_dataset(const GeneratorConfig& cfg,
                                           std::size_t count,
                                           std::uint64_t first_index) {
  std::vector<SampleRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(generate_sample(cfg, first_index + i));
  return out;
}

std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2)
    throw std::invalid_argument("kfold_split: need k >= 2, got " +
                                std::to_string(k));
  if (n < k)
    throw std::invalid_argument("kfold_split: " + std::to_string(n) +
                                " samples cannot fill " + std::to_string(k) +
                                " folds");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(hash_combine(seed, "kfold"));
  rng.shuffle(idx);

  std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
      folds(k);
  std::size_t base = n / k, extra = n % k, pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    std::size_t len = base + (f < extra ? 1 : 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= pos && i < pos + len)
        folds[f].second.push_back(idx[i]);
      else
        folds[f].first.push_back(idx[i]);
    }
    pos += len;
  }
  return folds;
}

}  // namespace apex
