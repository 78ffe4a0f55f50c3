#include "apex/train.hpp"

#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "apex/ops.hpp"
#include "apex/rng.hpp"

namespace apex {

namespace {

// Adds the full-resolution binary mask of each instance to the coverage
// targets. Instance ids enumerate in increasing order, mirroring
// coverage_targets.
void attach_fine_masks(std::vector<TargetSegment>& targets,
                       const std::vector<std::uint16_t>& instance_grid,
                       std::size_t h, std::size_t w) {
  std::set<std::uint16_t> ids(instance_grid.begin(), instance_grid.end());
  ids.erase(std::uint16_t{0});
  if (ids.size() != targets.size())
    throw std::logic_error("attach_fine_masks: target count mismatch");
  std::size_t at = 0;
  for (std::uint16_t id : ids) {
    TargetSegment& seg = targets[at++];
    seg.fine_h = h;
    seg.fine_w = w;
    seg.fine.assign(h * w, 0.0);
    for (std::size_t i = 0; i < h * w; ++i)
      if (instance_grid[i] == id) seg.fine[i] = 1.0;
  }
}

}  // namespace

std::vector<TargetSegment> pathology_targets(const SampleRecord& s,
                                             std::size_t pool) {
  std::vector<TargetSegment> out = coverage_targets(
      s.pathology_instance, s.pathology_label, s.h, s.w, pool);
  attach_fine_masks(out, s.pathology_instance, s.h, s.w);
  return out;
}

std::vector<TargetSegment> anatomy_targets(const SampleRecord& s,
                                           std::size_t pool) {
  std::vector<TargetSegment> out =
      coverage_targets(s.anatomy_instance, s.anatomy_label, s.h, s.w, pool);
  attach_fine_masks(out, s.anatomy_instance, s.h, s.w);
  return out;
}

std::vector<TargetSegment> multitask_targets(const SampleRecord& s,
                                             std::size_t pool,
                                             std::size_t anatomy_classes) {
  std::size_t hw = std::size_t(s.h) * s.w;
  std::vector<std::uint16_t> ana_label = s.anatomy_label;
  std::vector<std::uint16_t> ana_inst = s.anatomy_instance;
  for (std::size_t i = 0; i < hw; ++i)
    if (s.pathology_label[i] != 0) {
      ana_label[i] = 0;  // pathology is pasted atop the anatomy
      ana_inst[i] = 0;
    }
  std::vector<TargetSegment> out =
      coverage_targets(ana_inst, ana_label, s.h, s.w, pool);
  attach_fine_masks(out, ana_inst, s.h, s.w);
  std::vector<TargetSegment> path =
      coverage_targets(s.pathology_instance, s.pathology_label, s.h, s.w, pool,
                       int(anatomy_classes));
  attach_fine_masks(path, s.pathology_instance, s.h, s.w);
  out.insert(out.end(), std::make_move_iterator(path.begin()),
             std::make_move_iterator(path.end()));
  return out;
}

namespace {

ad::Tensor staged_loss(const std::vector<SegmentPrediction>& stages,
                       const std::vector<TargetSegment>& targets,
                       const LossWeights& w, bool multitask,
                       std::size_t anatomy_classes, double gamma) {
  ad::Tensor total;
  for (const SegmentPrediction& pred : stages) {
    MatchResult m = hungarian_match(pred, targets, w);
    ad::Tensor term =
        multitask ? multitask_loss(pred, m, targets, w, anatomy_classes, gamma)
                  : segmentation_loss(pred, m, targets, w);
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

}  // namespace

ad::Tensor sample_loss(ApexModel& model, const ModelOutputs& out,
                       const SampleRecord& s, int phase) {
  const AblationConfig& cfg = model.config();
  LossWeights w;
  std::size_t pool = std::size_t(s.h) / out.path_stages.front().h0;

  if (cfg.sharing == Sharing::kNone) {
    bool anatomy_phase = cfg.incorporation == Incorporation::kPretrain &&
                         phase == ApexModel::kPhaseAnatomy;
    if (anatomy_phase)
      return staged_loss(out.path_stages, anatomy_targets(s, pool), w, false,
                         0, 1.0);
    bool multitask = cfg.incorporation == Incorporation::kMultitask ||
                     cfg.incorporation == Incorporation::kAnaInAux;
    if (multitask)
      return staged_loss(
          out.path_stages,
          multitask_targets(s, pool, model.anatomy_classes()), w, true,
          model.anatomy_classes(), cfg.gamma);
    return staged_loss(out.path_stages, pathology_targets(s, pool), w, false,
                       0, 1.0);
  }

  ad::Tensor ana = staged_loss(out.ana_stages, anatomy_targets(s, pool), w,
                               false, 0, 1.0);
  ad::Tensor path = staged_loss(out.path_stages, pathology_targets(s, pool), w,
                                false, 0, 1.0);
  return ad::add(ana, path);
}

TrainResult train_model(ApexModel& model,
                        const std::vector<SampleRecord>& data) {
  if (data.empty())
    throw std::invalid_argument("train: dataset must not be empty");
  const AblationConfig& cfg = model.config();
  // beta2 = 0.99: the second moment must adapt within the few thousand
  // steps a desk-scale run has, not the tens of thousands the default
  // assumes.
  nn::Adam opt(cfg.lr, 0.9, 0.99);
  TrainResult res;
  std::size_t anatomy_epochs =
      cfg.incorporation == Incorporation::kPretrain ? cfg.epochs / 2 : 0;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    int phase = epoch < anatomy_epochs ? ApexModel::kPhaseAnatomy
                                       : ApexModel::kPhasePathology;
    double lr_scale =
        cfg.lr_schedule == "constant"
            ? 1.0
            : 0.5 * (1.0 + std::cos(M_PI * double(epoch) / double(cfg.epochs)));
    Rng shuffle_rng = Rng::substream(cfg.seed, "shuffle", epoch);
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t step = 0; step < order.size(); ++step) {
      const SampleRecord& s = data[order[step]];
      try {
        model.params().zero_grads();
        ad::Tape tape;
        ad::TapeScope scope(tape);
        ModelOutputs out = model.forward(s, phase);
        ad::Tensor loss = sample_loss(model, out, s, phase);
        double lv = loss.item();
        if (!std::isfinite(lv))
          throw ad::NumericsError("loss is not finite");
        tape.backward(loss);
        loss_sum += lv;
      } catch (const ad::NumericsError& e) {
        throw TrainError("training aborted at epoch " + std::to_string(epoch) +
                         ", step " + std::to_string(step) + ": " + e.what());
      }
      opt.step(model.params(), lr_scale);
    }
    res.epoch_losses.push_back(loss_sum / double(order.size()));
  }
  return res;
}

}  // namespace apex
