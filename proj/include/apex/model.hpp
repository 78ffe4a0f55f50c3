#pragma once

#include <cstddef>
#include <vector>

#include "apex/backbone.hpp"
#include "apex/config.hpp"
#include "apex/decoder.hpp"
#include "apex/losses.hpp"
#include "apex/nn.hpp"
#include "apex/synthetic.hpp"

namespace apex {

// Everything one forward pass produces. Stage lists hold one prediction per
// supervision point: the initial queries plus each decoder stage, so
// layers+1 entries; the last entry is the model's final output.
struct ModelOutputs {
  std::vector<SegmentPrediction> path_stages;
  std::vector<SegmentPrediction> ana_stages;  // empty without an anatomy branch
  // Per pathology stage, the head-averaged mixing attention [Qp*Qa]
  // (attention mixers only, one entry per decoder stage).
  std::vector<std::vector<double>> mix_attn;
};

// Assembled segmentation model for one ablation row. Parameters live in a
// name-keyed store whose initial values depend only on (seed, name), so two
// configs sharing a component initialize it identically regardless of which
// other components exist.
class ApexModel {
 public:
  // Phase selects the training stage for the pretrain row: 1 = anatomy
  // pretraining, 2 = pathology fine-tuning (the default everywhere else).
  static constexpr int kPhaseAnatomy = 1;
  static constexpr int kPhasePathology = 2;

  ApexModel(const AblationConfig& cfg, std::size_t anatomy_classes,
            std::size_t pathology_classes);

  ModelOutputs forward(const SampleRecord& s, int phase = kPhasePathology);

  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  const AblationConfig& config() const { return cfg_; }

  std::size_t anatomy_classes() const { return a_; }
  std::size_t pathology_classes() const { return p_; }
  bool has_anatomy_branch() const { return cfg_.sharing != Sharing::kNone; }

  // Number of classes the active pathology-side head predicts (before the
  // implicit no-object class).
  std::size_t head_classes(int phase = kPhasePathology) const;
  // Index offset of pathology class 1 within that head (A for the multitask
  // variants, else 0).
  std::size_t pathology_class_offset() const;

  std::size_t param_count() const;
  // Scalars in components that exist only because of the anatomy branch or
  // the query mixer. Zero for the plain baseline.
  std::size_t anatomy_param_count() const;

 private:
  ad::Tensor input_tensor(const SampleRecord& s) const;

  AblationConfig cfg_;
  std::size_t a_, p_;
  BackboneConfig bb_;
  nn::ParamStore ps_;
};

}  // namespace apex
