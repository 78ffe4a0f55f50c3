#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "apex/config.hpp"
#include "apex/evaluate.hpp"
#include "apex/model.hpp"
#include "apex/synthetic.hpp"
#include "apex/train.hpp"
#include "doctest.h"

using apex::AblationConfig;
using apex::ApexModel;
using apex::Incorporation;
using apex::MixKind;
using apex::Sharing;

namespace {

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

AblationConfig tiny_cfg() {
  AblationConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.queries = 12;
  cfg.r_rounds = 1;
  cfg.epochs = 2;
  cfg.seed = 404;
  return cfg;
}

apex::SampleRecord sample64(std::uint64_t idx) {
  apex::GeneratorConfig g;
  g.seed = 77;
  return apex::generate_sample(g, idx);
}

}  // namespace

TEST_CASE("config: nesting rules are enforced with rule citations") {
  AblationConfig cfg = tiny_cfg();
  cfg.validate();  // baseline passes

  cfg.incorporation = Incorporation::kMultitask;
  cfg.sharing = Sharing::kSharedPixelDecoder;
  CHECK_THROWS_WITH_AS(cfg.validate(),
                       doctest::Contains("single-branch"),
                       std::invalid_argument);

  cfg = tiny_cfg();
  cfg.mixing = MixKind::kSum;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("+Shared PD"),
                       std::invalid_argument);

  cfg = tiny_cfg();
  cfg.incorporation = Incorporation::kPretrain;
  cfg.mixing = MixKind::kMean;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = tiny_cfg();
  cfg.incorporation = Incorporation::kMultitask;
  cfg.gamma = 0.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("gamma"),
                       std::invalid_argument);

  cfg = tiny_cfg();
  cfg.d = 10;  // not a multiple of 4
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_cfg();
  cfg.heads = 3;  // does not divide d=8
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_cfg();
  cfg.fold = 7;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("config: key-value round trip and file parsing") {
  AblationConfig cfg = tiny_cfg();
  cfg.incorporation = Incorporation::kMultitask;
  cfg.gamma = 10.0;
  cfg.lr = 1.5e-4;
  cfg.rho = 0.95;
  cfg.fold = 3;
  auto kv = cfg.to_kv();
  AblationConfig back = AblationConfig::from_kv(kv);
  CHECK(back.to_kv() == kv);
  CHECK(back.incorporation == Incorporation::kMultitask);
  CHECK(back.gamma == 10.0);
  CHECK(back.lr == 1.5e-4);
  CHECK(back.rho == 0.95);

  auto parsed = apex::parse_kv_text(
      "# comment\n\n  mixing = cross_attention \nd=16\r\n");
  CHECK(parsed.at("mixing") == "cross_attention");
  CHECK(parsed.at("d") == "16");
  CHECK_THROWS_AS(apex::parse_kv_text("a=1\na=2\n"), std::invalid_argument);
  CHECK_THROWS_AS(apex::parse_kv_text("not a pair\n"), std::invalid_argument);
  CHECK_THROWS_AS(AblationConfig::from_kv({{"bogus", "1"}}),
                  std::invalid_argument);
}

TEST_CASE("config: grid covers the 13 table rows x folds, deterministically") {
  auto g = apex::grid(6, 5, 1000);
  REQUIRE(g.size() == 13 * 5);

  const std::vector<std::string> want = {
      "Baseline",  "Pretrain",  "Multitask", "Multitask",
      "Multitask", "Ana In",    "+Shared BB", "+Shared PD",
      "Query Sum", "Query Sum 2-ways", "Query Mean",
      "Cross Attention (CA)", "CA per feature level"};
  for (std::size_t r = 0; r < 13; ++r)
    for (std::size_t f = 0; f < 5; ++f) {
      const AblationConfig& cfg = g[r * 5 + f];
      CHECK(apex::method_label(cfg) == want[r]);
      CHECK(cfg.fold == f);
      CHECK_NOTHROW(cfg.validate());
    }
  // The three multitask rows carry gamma 1, 10, A.
  CHECK(g[2 * 5].gamma == 1.0);
  CHECK(g[3 * 5].gamma == 10.0);
  CHECK(g[4 * 5].gamma == 6.0);
  // Methods share each fold's seed (paired comparisons).
  CHECK(g[0].seed == g[12 * 5].seed);  // row 12 fold 0 vs row 0 fold 0
  CHECK(g[0].seed != g[1].seed);

  auto g2 = apex::grid(6, 5, 1000);
  for (std::size_t i = 0; i < g.size(); ++i)
    CHECK(g[i].to_kv() == g2[i].to_kv());

  // Flag columns mirror the table.
  apex::MethodFlags f0 = apex::method_flags(g[0]);
  CHECK(f0.a_cond == "--");
  CHECK(f0.a_pred == "--");
  CHECK(f0.gamma == "--");
  apex::MethodFlags fp = apex::method_flags(g[5]);  // Pretrain fold 0
  CHECK(fp.a_cond == "✓");
  apex::MethodFlags fm = apex::method_flags(g[3 * 5]);
  CHECK(fm.a_pred == "✓");
  CHECK(fm.gamma == "10");
}

TEST_CASE("model: baseline owns no anatomy parameters; sharing rows do") {
  ApexModel base(tiny_cfg(), 6, 3);
  CHECK(base.anatomy_param_count() == 0);
  CHECK(base.param_count() > 0);
  CHECK_FALSE(base.has_anatomy_branch());

  AblationConfig cfg = tiny_cfg();
  cfg.sharing = Sharing::kSharedPixelDecoder;
  ApexModel shared_pd(cfg, 6, 3);
  CHECK(shared_pd.anatomy_param_count() > 0);
  CHECK(shared_pd.has_anatomy_branch());

  cfg.sharing = Sharing::kSharedBackbone;
  ApexModel shared_bb(cfg, 6, 3);
  CHECK(shared_bb.params().has("pd.ana.proj0.w"));
  CHECK(shared_bb.params().has("pd.path.proj0.w"));
  CHECK_FALSE(shared_bb.params().has("pd.proj0.w"));
  // Separate pixel decoders cost more than a shared one.
  CHECK(shared_bb.param_count() > shared_pd.param_count());
}

TEST_CASE("model: nonparametric mixers add no parameters, attention does") {
  AblationConfig cfg = tiny_cfg();
  cfg.sharing = Sharing::kSharedPixelDecoder;
  ApexModel identity(cfg, 6, 3);
  cfg.mixing = MixKind::kSum;
  ApexModel sum(cfg, 6, 3);
  CHECK(identity.param_count() == sum.param_count());
  cfg.mixing = MixKind::kMean;
  ApexModel mean(cfg, 6, 3);
  CHECK(identity.param_count() == mean.param_count());

  cfg.mixing = MixKind::kCrossAttention;
  ApexModel ca(cfg, 6, 3);
  CHECK(ca.param_count() > identity.param_count());
  cfg.mixing = MixKind::kCrossAttentionPerLevel;
  ApexModel capl(cfg, 6, 3);
  // Per-level owns one bundle per stage instead of one shared bundle.
  std::size_t bundle = ca.param_count() - identity.param_count();
  CHECK(capl.param_count() - identity.param_count() == cfg.layers * bundle);
}

TEST_CASE("model: head widths follow the incorporation strategy") {
  AblationConfig cfg = tiny_cfg();
  ApexModel base(cfg, 6, 3);
  CHECK(base.head_classes() == 3);
  CHECK(base.pathology_class_offset() == 0);

  cfg.incorporation = Incorporation::kMultitask;
  ApexModel mt(cfg, 6, 3);
  CHECK(mt.head_classes() == 9);
  CHECK(mt.pathology_class_offset() == 6);

  cfg.incorporation = Incorporation::kPretrain;
  ApexModel pre(cfg, 6, 3);
  CHECK(pre.head_classes(ApexModel::kPhaseAnatomy) == 6);
  CHECK(pre.head_classes(ApexModel::kPhasePathology) == 3);
  CHECK(pre.params().has("head.ana.cls.w"));
  CHECK(pre.params().has("head.path.cls.w"));
}

TEST_CASE("model: forward shapes and determinism") {
  AblationConfig cfg = tiny_cfg();
  cfg.sharing = Sharing::kSharedPixelDecoder;
  cfg.mixing = MixKind::kCrossAttention;
  apex::SampleRecord s = sample64(0);

  ApexModel m1(cfg, 6, 3);
  apex::ModelOutputs o1 = m1.forward(s);
  REQUIRE(o1.path_stages.size() == cfg.layers + 1);
  REQUIRE(o1.ana_stages.size() == cfg.layers + 1);
  REQUIRE(o1.mix_attn.size() == cfg.layers);
  const apex::SegmentPrediction& p = o1.path_stages.back();
  CHECK(p.h0 == 16);
  CHECK(p.w0 == 16);
  CHECK(p.classes == 3);
  CHECK(p.class_logits.shape() == apex::ad::Shape{12, 4});
  CHECK(p.mask_logits.shape() == apex::ad::Shape{12, 256});
  CHECK(o1.ana_stages.back().classes == 6);
  for (const auto& a : o1.mix_attn) CHECK(a.size() == 144);

  ApexModel m2(cfg, 6, 3);
  apex::ModelOutputs o2 = m2.forward(s);
  CHECK(bit_equal(o1.path_stages.back().mask_logits.value(),
                  o2.path_stages.back().mask_logits.value()));
  CHECK(bit_equal(o1.path_stages.back().class_logits.value(),
                  o2.path_stages.back().class_logits.value()));
}

TEST_CASE("model: anatomy conditioning reads the label channel") {
  apex::SampleRecord s = sample64(1);
  apex::SampleRecord s2 = s;
  // Flip the anatomy labels; image bytes untouched.
  for (auto& v : s2.anatomy_label) v = v == 0 ? 1 : 0;

  ApexModel base(tiny_cfg(), 6, 3);
  CHECK(bit_equal(base.forward(s).path_stages.back().mask_logits.value(),
                  base.forward(s2).path_stages.back().mask_logits.value()));

  AblationConfig cfg = tiny_cfg();
  cfg.incorporation = Incorporation::kAnaIn;
  ApexModel cond(cfg, 6, 3);
  CHECK_FALSE(
      bit_equal(cond.forward(s).path_stages.back().mask_logits.value(),
                cond.forward(s2).path_stages.back().mask_logits.value()));
}

TEST_CASE("model: anatomy branch is unaffected by the mixer choice") {
  apex::SampleRecord s = sample64(2);
  AblationConfig cfg = tiny_cfg();
  cfg.sharing = Sharing::kSharedPixelDecoder;

  std::vector<apex::ModelOutputs> outs;
  for (MixKind k : {MixKind::kIdentity, MixKind::kSum, MixKind::kMean,
                    MixKind::kCrossAttention}) {
    cfg.mixing = k;
    ApexModel m(cfg, 6, 3);
    outs.push_back(m.forward(s));
  }
  for (std::size_t i = 1; i < outs.size(); ++i)
    for (std::size_t st = 0; st < outs[0].ana_stages.size(); ++st) {
      CHECK(bit_equal(outs[0].ana_stages[st].mask_logits.value(),
                      outs[i].ana_stages[st].mask_logits.value()));
      CHECK(bit_equal(outs[0].ana_stages[st].class_logits.value(),
                      outs[i].ana_stages[st].class_logits.value()));
    }

  // sum_2way is the one mixer that feeds back into the anatomy stream.
  cfg.mixing = MixKind::kSum2Way;
  ApexModel two(cfg, 6, 3);
  apex::ModelOutputs o2 = two.forward(s);
  CHECK_FALSE(bit_equal(outs[0].ana_stages.back().mask_logits.value(),
                        o2.ana_stages.back().mask_logits.value()));
}

TEST_CASE("train: runs, shrinks the loss curve deterministically") {
  apex::GeneratorConfig g;
  g.seed = 99;
  std::vector<apex::SampleRecord> data = apex::generate_dataset(g, 2);

  AblationConfig cfg = tiny_cfg();
  cfg.epochs = 3;
  ApexModel m(cfg, 6, 3);
  apex::TrainResult r = apex::train_model(m, data);
  REQUIRE(r.epoch_losses.size() == 3);
  for (double l : r.epoch_losses) CHECK(std::isfinite(l));

  ApexModel m2(cfg, 6, 3);
  apex::TrainResult r2 = apex::train_model(m2, data);
  CHECK(r.epoch_losses == r2.epoch_losses);

  cfg.epochs = 0;
  ApexModel m0(cfg, 6, 3);
  CHECK(apex::train_model(m0, data).epoch_losses.empty());
  CHECK_THROWS_AS(apex::train_model(m0, {}), std::invalid_argument);
}

TEST_CASE("train: pretrain phases and dual-branch training run") {
  apex::GeneratorConfig g;
  g.seed = 100;
  std::vector<apex::SampleRecord> data = apex::generate_dataset(g, 2);

  AblationConfig cfg = tiny_cfg();
  cfg.incorporation = Incorporation::kPretrain;
  cfg.epochs = 2;  // one anatomy epoch, one pathology epoch
  ApexModel pre(cfg, 6, 3);
  CHECK(apex::train_model(pre, data).epoch_losses.size() == 2);

  cfg = tiny_cfg();
  cfg.sharing = Sharing::kSharedPixelDecoder;
  cfg.mixing = MixKind::kCrossAttention;
  cfg.epochs = 1;
  ApexModel dual(cfg, 6, 3);
  CHECK(apex::train_model(dual, data).epoch_losses.size() == 1);

  cfg = tiny_cfg();
  cfg.incorporation = Incorporation::kMultitask;
  cfg.gamma = 10.0;
  cfg.epochs = 1;
  ApexModel mt(cfg, 6, 3);
  CHECK(apex::train_model(mt, data).epoch_losses.size() == 1);
}

TEST_CASE("train: target builders carry consistent fine and coarse masks") {
  apex::GeneratorConfig g;
  g.seed = 321;
  apex::SampleRecord s = apex::generate_dataset(g, 1)[0];

  for (const auto& tg :
       {apex::pathology_targets(s, 4), apex::anatomy_targets(s, 4),
        apex::multitask_targets(s, 4, 6)}) {
    REQUIRE(!tg.empty());
    for (const apex::TargetSegment& t : tg) {
      REQUIRE(t.fine_h == s.h);
      REQUIRE(t.fine_w == s.w);
      REQUIRE(t.fine.size() == s.h * s.w);
      // Binary, and average-pooling the fine mask reproduces the coverage.
      std::vector<double> pooled(t.mask.size(), 0.0);
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) {
          double v = t.fine[y * s.w + x];
          REQUIRE((v == 0.0 || v == 1.0));
          pooled[(y / 4) * (s.w / 4) + (x / 4)] += v / 16.0;
        }
      for (std::size_t i = 0; i < pooled.size(); ++i)
        REQUIRE(pooled[i] == doctest::Approx(t.mask[i]).epsilon(1e-12));
    }
  }

  // The pasted multitask anatomy segments exclude pathology pixels.
  std::vector<apex::TargetSegment> mt = apex::multitask_targets(s, 4, 6);
  for (const apex::TargetSegment& t : mt)
    if (t.cls <= 6)
      for (std::size_t i = 0; i < s.h * s.w; ++i)
        if (s.pathology_label[i] != 0) REQUIRE(t.fine[i] == 0.0);
}

TEST_CASE("bilinear_upsample: hand-checked factor-2 map and constants") {
  std::vector<double> src = {0.0, 1.0, 2.0, 3.0};
  std::vector<double> up = apex::bilinear_upsample(src, 2, 2, 2);
  std::vector<double> want = {0.0, 0.25, 0.75, 1.0,  0.5, 0.75, 1.25, 1.5,
                              1.5, 1.75, 2.25, 2.5,  2.0, 2.25, 2.75, 3.0};
  REQUIRE(up.size() == want.size());
  for (std::size_t i = 0; i < up.size(); ++i)
    CHECK(up[i] == doctest::Approx(want[i]).epsilon(1e-12));

  std::vector<double> flat(12, 0.7);
  for (double v : apex::bilinear_upsample(flat, 3, 4, 4))
    CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

  CHECK_THROWS_AS(apex::bilinear_upsample(src, 3, 2, 2),
                  std::invalid_argument);
}

TEST_CASE("evaluate: report fields are populated and bounded") {
  apex::GeneratorConfig g;
  g.seed = 101;
  std::vector<apex::SampleRecord> data = apex::generate_dataset(g, 3);

  AblationConfig cfg = tiny_cfg();
  cfg.sharing = Sharing::kSharedPixelDecoder;
  cfg.mixing = MixKind::kCrossAttention;
  ApexModel m(cfg, 6, 3);
  apex::EvalReport rep = apex::evaluate_model(m, data);

  CHECK(rep.samples == 3);
  CHECK(rep.miou >= 0.0);
  CHECK(rep.miou <= 1.0);
  CHECK(rep.mbiou >= 0.0);
  CHECK(rep.mbiou <= 1.0);
  CHECK(rep.instance_map >= 0.0);
  CHECK(rep.instance_map <= 1.0);
  CHECK_FALSE(rep.iou_per_class.empty());
  CHECK(rep.has_attended);
  double mass = 0.0;
  for (const auto& [cls, frac] : rep.attended_anatomy) {
    CHECK(cls >= 1);
    CHECK(cls <= 6);
    CHECK(frac >= 0.0);
    mass += frac;
  }
  CHECK(mass <= 1.0 + 1e-9);

  // An untrained model stays near chance on the pathology task.
  CHECK(rep.miou < 0.5);

  ApexModel base(tiny_cfg(), 6, 3);
  apex::EvalReport rb = apex::evaluate_model(base, data);
  CHECK_FALSE(rb.has_attended);
  CHECK(rb.attended_anatomy.empty());
}

TEST_CASE("model: checkpoint round trip preserves the forward pass") {
  apex::SampleRecord s = sample64(3);
  AblationConfig cfg = tiny_cfg();
  cfg.sharing = Sharing::kSharedPixelDecoder;
  cfg.mixing = MixKind::kCrossAttention;

  ApexModel m(cfg, 6, 3);
  // Perturb away from the deterministic init so the test is not vacuous.
  auto w = m.params().get("queries.path", {cfg.queries, cfg.d},
                          apex::nn::InitSpec::normal(0.02));
  for (double& v : w.value()) v += 0.05;
  apex::ModelOutputs before = m.forward(s);

  std::string path = "test_model_ckpt.bin";
  apex::nn::save_checkpoint(path, m.params());

  ApexModel fresh(cfg, 6, 3);
  CHECK_FALSE(bit_equal(before.path_stages.back().mask_logits.value(),
                        fresh.forward(s).path_stages.back().mask_logits.value()));
  apex::nn::load_checkpoint(path, fresh.params());
  apex::ModelOutputs after = fresh.forward(s);
  CHECK(bit_equal(before.path_stages.back().mask_logits.value(),
                  after.path_stages.back().mask_logits.value()));
  CHECK(bit_equal(before.ana_stages.back().class_logits.value(),
                  after.ana_stages.back().class_logits.value()));
  std::remove(path.c_str());
}
