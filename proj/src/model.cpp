#include "apex/model.hpp"

#include <string>

#include "apex/ops.hpp"
#include "apex/rng.hpp"

namespace apex {

namespace {

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.size() >= prefix.size() &&
         s.compare(0, prefix.size(), prefix) == 0;
}

}  // namespace

ApexModel::ApexModel(const AblationConfig& cfg, std::size_t anatomy_classes,
                     std::size_t pathology_classes)
    : cfg_(cfg),
      a_(anatomy_classes),
      p_(pathology_classes),
      ps_(hash_combine(cfg.seed, "init")) {
  cfg_.validate();
  if (a_ == 0 || p_ == 0)
    throw std::invalid_argument("model: class counts must be positive");
  bb_.d = cfg_.d;
  bb_.r_rounds = cfg_.r_rounds;
  bb_.heads = cfg_.heads;

  // Materialize every parameter now (creation is lazy by name): checkpoints
  // and parameter counts must not depend on whether forward ran yet.
  SampleRecord dummy;
  dummy.h = dummy.w = 32;
  dummy.image.assign(3 * 32 * 32, 0.0f);
  dummy.anatomy_label.assign(32 * 32, 0);
  dummy.anatomy_instance.assign(32 * 32, 0);
  dummy.pathology_label.assign(32 * 32, 0);
  dummy.pathology_instance.assign(32 * 32, 0);
  ad::NoTapeScope no_tape;
  forward(dummy, kPhasePathology);
  if (cfg_.incorporation == Incorporation::kPretrain)
    forward(dummy, kPhaseAnatomy);
}

std::size_t ApexModel::head_classes(int phase) const {
  if (cfg_.incorporation == Incorporation::kPretrain && phase == kPhaseAnatomy)
    return a_;
  if (cfg_.incorporation == Incorporation::kMultitask ||
      cfg_.incorporation == Incorporation::kAnaInAux)
    return a_ + p_;
  return p_;
}

std::size_t ApexModel::pathology_class_offset() const {
  if (cfg_.incorporation == Incorporation::kMultitask ||
      cfg_.incorporation == Incorporation::kAnaInAux)
    return a_;
  return 0;
}

ad::Tensor ApexModel::input_tensor(const SampleRecord& s) const {
  std::size_t hw = std::size_t(s.h) * s.w;
  std::vector<double> v(3 * hw);
  for (std::size_t i = 0; i < 3 * hw; ++i) v[i] = double(s.image[i]);
  if (cfg_.incorporation == Incorporation::kAnaIn ||
      cfg_.incorporation == Incorporation::kAnaInAux) {
    // Anatomy conditioning: label index, normalized to [0,1], written into
    // the otherwise-empty third channel.
    for (std::size_t i = 0; i < hw; ++i)
      v[2 * hw + i] = double(s.anatomy_label[i]) / double(a_);
  }
  return ad::Tensor::from_values({3, std::size_t(s.h), std::size_t(s.w)},
                                 std::move(v));
}

ModelOutputs ApexModel::forward(const SampleRecord& s, int phase) {
  ModelOutputs out;
  ad::Tensor image = input_tensor(s);
  MultiScaleFeatures feats = extract_features(ps_, "backbone", image, bb_);
  nn::InitSpec qinit = nn::InitSpec::normal(0.02);

  if (cfg_.sharing == Sharing::kNone) {
    PixelEmbeddings j = decode_pixels(ps_, "pd", feats, bb_);
    ad::Tensor q0 =
        ps_.get("queries.path", {cfg_.queries, cfg_.d}, qinit);
    SingleDecoderRun run =
        run_single_decoder(ps_, j, q0, cfg_.layers, cfg_.heads, "decoder.path");
    bool anatomy_phase = cfg_.incorporation == Incorporation::kPretrain &&
                         phase == kPhaseAnatomy;
    std::string head = anatomy_phase ? "head.ana" : "head.path";
    std::size_t classes = head_classes(phase);
    std::size_t h0 = j.hs[0], w0 = j.ws[0];
    out.path_stages.push_back(
        predict_segments(ps_, head, q0, j.tokens[0], h0, w0, classes));
    for (const ad::Tensor& q : run.stage_q)
      out.path_stages.push_back(
          predict_segments(ps_, head, q, j.tokens[0], h0, w0, classes));
    return out;
  }

  PixelEmbeddings j_ana, j_path;
  if (cfg_.sharing == Sharing::kSharedBackbone) {
    j_ana = decode_pixels(ps_, "pd.ana", feats, bb_);
    j_path = decode_pixels(ps_, "pd.path", feats, bb_);
  } else {
    j_ana = decode_pixels(ps_, "pd", feats, bb_);
    j_path = j_ana;
  }
  ad::Tensor q0_ana = ps_.get("queries.ana", {cfg_.queries, cfg_.d}, qinit);
  ad::Tensor q0_path = ps_.get("queries.path", {cfg_.queries, cfg_.d}, qinit);
  DecoderRun run = run_decoders(ps_, j_ana, j_path, q0_ana, q0_path,
                                cfg_.mixing, cfg_.layers, cfg_.heads);

  std::size_t ha = j_ana.hs[0], wa = j_ana.ws[0];
  std::size_t hp = j_path.hs[0], wp = j_path.ws[0];
  out.ana_stages.push_back(
      predict_segments(ps_, "head.ana", q0_ana, j_ana.tokens[0], ha, wa, a_));
  out.path_stages.push_back(predict_segments(ps_, "head.path", q0_path,
                                             j_path.tokens[0], hp, wp, p_));
  for (const DecoderStage& st : run.trace) {
    out.ana_stages.push_back(predict_segments(ps_, "head.ana", st.q_ana,
                                              j_ana.tokens[0], ha, wa, a_));
    out.path_stages.push_back(predict_segments(ps_, "head.path", st.q_path,
                                               j_path.tokens[0], hp, wp, p_));
    if (mix_is_attention(cfg_.mixing)) {
      const auto vals = st.mix_attn.value();
      out.mix_attn.emplace_back(vals.begin(), vals.end());
    }
  }
  return out;
}

std::size_t ApexModel::param_count() const { return ps_.scalar_count(); }

std::size_t ApexModel::anatomy_param_count() const {
  static const std::vector<std::string> prefixes = {
      "pd.ana.", "decoder.ana.", "head.ana.", "queries.ana", "mixer."};
  std::size_t n = 0;
  for (const auto& [name, t] : ps_.all()) {
    for (const std::string& p : prefixes)
      if (starts_with(name, p)) {
        n += t.numel();
        break;
      }
  }
  return n;
}

}  // namespace apex
