#include "apex/evaluate.hpp"

#include <algorithm>
#include <cmath>

#include "apex/train.hpp"

namespace apex {

std::vector<double> bilinear_upsample(const std::vector<double>& src,
                                      std::size_t h, std::size_t w,
                                      std::size_t factor) {
  if (src.size() != h * w)
    throw std::invalid_argument("bilinear_upsample: size mismatch");
  if (factor == 0) throw std::invalid_argument("bilinear_upsample: factor 0");
  std::size_t oh = h * factor, ow = w * factor;
  std::vector<double> out(oh * ow);
  double inv = 1.0 / double(factor);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    double sy = (double(oy) + 0.5) * inv - 0.5;
    double y0f = std::floor(sy);
    double fy = sy - y0f;
    std::ptrdiff_t y0 = std::ptrdiff_t(y0f);
    std::size_t ya = std::size_t(std::clamp<std::ptrdiff_t>(y0, 0, h - 1));
    std::size_t yb = std::size_t(std::clamp<std::ptrdiff_t>(y0 + 1, 0, h - 1));
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double sx = (double(ox) + 0.5) * inv - 0.5;
      double x0f = std::floor(sx);
      double fx = sx - x0f;
      std::ptrdiff_t x0 = std::ptrdiff_t(x0f);
      std::size_t xa = std::size_t(std::clamp<std::ptrdiff_t>(x0, 0, w - 1));
      std::size_t xb =
          std::size_t(std::clamp<std::ptrdiff_t>(x0 + 1, 0, w - 1));
      double top = src[ya * w + xa] * (1.0 - fx) + src[ya * w + xb] * fx;
      double bot = src[yb * w + xa] * (1.0 - fx) + src[yb * w + xb] * fx;
      out[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
    }
  }
  return out;
}

namespace {

// Row-wise softmax of plain values.
std::vector<double> softmax_rows(const ad::Tensor& logits) {
  std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  std::vector<double> out(rows * cols);
  const double* v = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v + r * cols;
    double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = std::exp(row[c] - mx);
      z += out[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  return out;
}

// Per-query sigmoid mask probabilities at out_h x out_w.
std::vector<std::vector<double>> query_masks(const SegmentPrediction& pred,
                                             std::size_t out_h,
                                             std::size_t out_w) {
  std::size_t q_count = pred.mask_logits.shape()[0];
  std::size_t hw = pred.h0 * pred.w0;
  if (out_h % pred.h0 != 0 || out_w / pred.w0 != out_h / pred.h0)
    throw std::invalid_argument("query_masks: resolutions not commensurate");
  std::size_t factor = out_h / pred.h0;
  const double* ml = pred.mask_logits.data();
  std::vector<std::vector<double>> masks(q_count);
  for (std::size_t q = 0; q < q_count; ++q) {
    // Upsample the logits, then squash: this is the same soft mask the
    // training loss supervises at full resolution.
    std::vector<double> logit(ml + q * hw, ml + (q + 1) * hw);
    std::vector<double> up = factor == 1
                                 ? std::move(logit)
                                 : bilinear_upsample(logit, pred.h0, pred.w0,
                                                     factor);
    for (double& x : up) x = 1.0 / (1.0 + std::exp(-x));
    masks[q] = std::move(up);
  }
  return masks;
}

}  // namespace

std::vector<std::vector<double>> class_score_maps(const SegmentPrediction& pred,
                                                  std::size_t class_offset,
                                                  std::size_t class_count,
                                                  std::size_t out_h,
                                                  std::size_t out_w) {
  if (class_offset + class_count > pred.classes)
    throw std::invalid_argument("class_score_maps: class range out of head");
  std::size_t q_count = pred.class_logits.shape()[0];
  std::size_t cols = pred.classes + 1;
  std::vector<double> probs = softmax_rows(pred.class_logits);
  std::vector<std::vector<double>> masks = query_masks(pred, out_h, out_w);

  std::vector<std::vector<double>> scores(
      class_count, std::vector<double>(out_h * out_w, 0.0));
  for (std::size_t c = 0; c < class_count; ++c) {
    std::vector<double>& s = scores[c];
    for (std::size_t q = 0; q < q_count; ++q) {
      double p = probs[q * cols + class_offset + c];
      if (p < 1e-12) continue;
      const std::vector<double>& m = masks[q];
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += p * m[i];
    }
    for (double& x : s) x = std::min(x, 1.0);
  }
  return scores;
}

std::vector<std::uint8_t> predicted_label_map(const SegmentPrediction& pred,
                                              std::size_t class_offset,
                                              std::size_t class_count,
                                              std::size_t out_h,
                                              std::size_t out_w) {
  auto scores = class_score_maps(pred, class_offset, class_count, out_h, out_w);
  std::vector<std::uint8_t> labels(out_h * out_w, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double best = 0.5;
    for (std::size_t c = 0; c < class_count; ++c)
      if (scores[c][i] >= best) {
        best = scores[c][i];
        labels[i] = std::uint8_t(c + 1);
      }
  }
  return labels;
}

EvalReport evaluate_model(ApexModel& model,
                          const std::vector<SampleRecord>& data,
                          std::size_t attended_k) {
  ad::NoTapeScope no_tape;
  const AblationConfig& cfg = model.config();
  std::size_t P = model.pathology_classes();
  std::size_t A = model.anatomy_classes();
  std::size_t offset = model.pathology_class_offset();
  LossWeights lw;

  SemanticAccumulator sem;
  std::vector<InstancePred> ipreds;
  std::vector<InstanceGt> igts;
  std::map<int, double> attended_mass;
  bool attention = mix_is_attention(cfg.mixing) && model.has_anatomy_branch();

  EvalReport rep;
  for (std::size_t si = 0; si < data.size(); ++si) {
    const SampleRecord& s = data[si];
    ModelOutputs out = model.forward(s);
    const SegmentPrediction& pred = out.path_stages.back();
    std::size_t h = s.h, w = s.w;

    // Semantic: thresholded aggregated class scores against the label grid.
    auto scores = class_score_maps(pred, offset, P, h, w);
    for (std::size_t c = 1; c <= P; ++c) {
      BinaryMask pm(h, w), gm(h, w);
      const std::vector<double>& sc = scores[c - 1];
      for (std::size_t i = 0; i < h * w; ++i) {
        pm.v[i] = sc[i] >= 0.5 ? 1 : 0;
        gm.v[i] = s.pathology_label[i] == c ? 1 : 0;
      }
      sem.add(int(c), pm, gm);
    }

    // Instances: every query becomes a candidate with its best pathology
    // class; ground truth comes from the instance grid.
    std::vector<double> probs = softmax_rows(pred.class_logits);
    std::vector<std::vector<double>> masks = query_masks(pred, h, w);
    std::size_t cols = pred.classes + 1;
    for (std::size_t q = 0; q < masks.size(); ++q) {
      int best_c = 1;
      double best_p = -1.0;
      for (std::size_t c = 1; c <= P; ++c) {
        double p = probs[q * cols + offset + c - 1];
        if (p > best_p) {
          best_p = p;
          best_c = int(c);
        }
      }
      InstancePred ip;
      ip.cls = best_c;
      ip.score = best_p;
      ip.image = int(si);
      ip.mask = BinaryMask(h, w);
      for (std::size_t i = 0; i < h * w; ++i)
        ip.mask.v[i] = masks[q][i] >= 0.5 ? 1 : 0;
      ipreds.push_back(std::move(ip));
    }
    std::map<std::uint16_t, std::size_t> gt_index;
    for (std::size_t i = 0; i < h * w; ++i) {
      std::uint16_t id = s.pathology_instance[i];
      if (id == 0) continue;
      auto [it, fresh] = gt_index.try_emplace(id, igts.size());
      if (fresh) {
        InstanceGt g;
        g.cls = int(s.pathology_label[i]);
        g.image = int(si);
        g.mask = BinaryMask(h, w);
        igts.push_back(std::move(g));
      }
      igts[it->second].mask.v[i] = 1;
    }

    // Attended anatomy: aggregate mixing attention of the matched pathology
    // queries over anatomy queries, keyed by each anatomy query's matched
    // ground-truth class.
    if (attention && !out.mix_attn.empty()) {
      std::size_t pool = h / out.ana_stages.back().h0;
      std::vector<TargetSegment> ana_t = anatomy_targets(s, pool);
      std::vector<TargetSegment> path_t = pathology_targets(s, pool);
      if (!ana_t.empty() && !path_t.empty()) {
        MatchResult ma =
            hungarian_match(out.ana_stages.back(), ana_t, lw);
        MatchResult mp =
            hungarian_match(out.path_stages.back(), path_t, lw);
        std::vector<int> assignment(cfg.queries, -1);
        for (const auto& [q, t] : ma.pairs) assignment[q] = ana_t[t].cls;
        std::vector<std::uint8_t> matched_path(cfg.queries, 0);
        for (const auto& [q, t] : mp.pairs) matched_path[q] = 1;
        std::vector<std::vector<double>> filtered = out.mix_attn;
        for (std::vector<double>& stage : filtered)
          for (std::size_t p = 0; p < cfg.queries; ++p)
            if (!matched_path[p])
              std::fill(stage.begin() + p * cfg.queries,
                        stage.begin() + (p + 1) * cfg.queries, 0.0);
        auto sample_rep = attended_anatomy_report(
            cfg.mixing, filtered, cfg.queries, cfg.queries, assignment, A);
        for (const auto& [cls, mass] : sample_rep) attended_mass[cls] += mass;
      }
    }
  }

  rep.samples = data.size();
  rep.iou_per_class = sem.per_class_iou();
  rep.biou_per_class = sem.per_class_biou();
  rep.miou = sem.mean_iou();
  rep.mbiou = sem.mean_biou();
  rep.instance_map = apex::instance_map(ipreds, igts);
  rep.has_attended = attention;
  if (attention) {
    double total = 0.0;
    for (const auto& [cls, mass] : attended_mass) total += mass;
    if (total > 0.0) {
      std::vector<std::pair<int, double>> ranked;
      for (const auto& [cls, mass] : attended_mass)
        ranked.emplace_back(cls, mass / total);
      std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
      });
      if (ranked.size() > attended_k) ranked.resize(attended_k);
      rep.attended_anatomy = std::move(ranked);
    }
  }
  return rep;
}

}  // namespace apex
