#pragma once

#include <stdexcept>
#include <vector>

#include "apex/model.hpp"

namespace apex {

// Raised when a training step produces a non-finite loss or gradient; the
// message carries the epoch and step where it happened.
struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  std::vector<double> epoch_losses;  // mean per-sample total loss per epoch
};

// Target builders at the loss (J_0) resolution. `pool` is the integer factor
// between the sample resolution and the prediction's h0/w0.
std::vector<TargetSegment> pathology_targets(const SampleRecord& s,
                                             std::size_t pool);
std::vector<TargetSegment> anatomy_targets(const SampleRecord& s,
                                           std::size_t pool);
// Pasted single-head targets: anatomy segments minus pathology pixels, then
// pathology segments with their classes shifted past the anatomy classes.
std::vector<TargetSegment> multitask_targets(const SampleRecord& s,
                                             std::size_t pool,
                                             std::size_t anatomy_classes);

// Total training loss for one forward pass: every supervision stage of every
// branch is matched and scored independently and the terms are summed.
ad::Tensor sample_loss(ApexModel& model, const ModelOutputs& out,
                       const SampleRecord& s, int phase);

// Adaptive-moment training with a per-epoch cosine learning-rate schedule and
// per-sample updates. The pretrain row trains its first half of epochs on
// anatomy labels (phase 1), the rest on pathology. Sample order reshuffles
// every epoch from a named substream of the config seed.
TrainResult train_model(ApexModel& model,
                        const std::vector<SampleRecord>& data);

}  // namespace apex
