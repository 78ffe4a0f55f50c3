// Command-line front end: dataset generation, training, evaluation, and the
// ablation table, with JSON run manifests for reproducibility.
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "apex/config.hpp"
#include "apex/dataset_io.hpp"
#include "apex/evaluate.hpp"
#include "apex/io.hpp"
#include "apex/metrics.hpp"
#include "apex/model.hpp"
#include "apex/nn.hpp"
#include "apex/rng.hpp"
#include "apex/synthetic.hpp"
#include "apex/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

json report_json(const apex::EvalReport& rep) {
  json j;
  j["samples"] = rep.samples;
  j["miou"] = rep.miou;
  j["mbiou"] = rep.mbiou;
  j["instance_map"] = rep.instance_map;
  json per = json::object();
  for (const auto& [c, v] : rep.iou_per_class) per[std::to_string(c)] = v;
  j["iou_per_class"] = per;
  json bper = json::object();
  for (const auto& [c, v] : rep.biou_per_class) bper[std::to_string(c)] = v;
  j["biou_per_class"] = bper;
  if (rep.has_attended) {
    json att = json::array();
    for (const auto& [c, mass] : rep.attended_anatomy)
      att.push_back({{"anatomy_class", c}, {"mass", mass}});
    j["attended_anatomy"] = att;
  }
  return j;
}

json config_json(const apex::AblationConfig& cfg) {
  json j;
  for (const auto& [k, v] : cfg.to_kv()) j[k] = v;
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
  if (!f) throw std::runtime_error("short write: " + path);
}

// Class label map scaled to 8-bit gray (class c of n -> c * 255 / n).
std::vector<std::uint8_t> gray_map(const std::vector<std::uint8_t>& labels,
                                   std::size_t classes) {
  std::vector<std::uint8_t> g(labels.size());
  std::size_t n = std::max<std::size_t>(classes, 1);
  for (std::size_t i = 0; i < labels.size(); ++i)
    g[i] = std::uint8_t(std::size_t(labels[i]) * 255 / n);
  return g;
}

// Shared flags for the model-running subcommands.
struct RunArgs {
  std::string config_path;
  std::string dataset_path;
  std::size_t anatomy_classes = 6;
  std::size_t pathology_classes = 3;
};

void add_run_args(CLI::App* cmd, RunArgs& a, bool needs_config = true) {
  if (needs_config)
    cmd->add_option("--config", a.config_path, "key=value experiment config")
        ->required();
  cmd->add_option("--dataset", a.dataset_path, "APEXDS1 dataset file")
      ->required();
  cmd->add_option("--anatomy-classes", a.anatomy_classes,
                  "anatomy classes the model predicts (A)")
      ->capture_default_str();
  cmd->add_option("--pathology-classes", a.pathology_classes,
                  "pathology classes the model predicts (P)")
      ->capture_default_str();
}

int cmd_gen_data(const std::string& out, std::size_t count,
                 std::uint64_t seed, double rho, int anatomy, int pathology,
                 double noise, double rmin, double rmax) {
  apex::GeneratorConfig g;
  g.seed = seed;
  g.rho = rho;
  g.anatomy_classes = anatomy;
  g.pathology_classes = pathology;
  g.noise = noise;
  g.min_island_radius = rmin;
  g.max_island_radius = rmax;
  std::vector<apex::SampleRecord> data = apex::generate_dataset(g, count);
  apex::write_dataset(out, data);
  std::printf("wrote %zu samples to %s (content hash %s)\n", data.size(),
              out.c_str(), hex64(apex::dataset_content_hash(data)).c_str());
  return 0;
}

int cmd_train(const RunArgs& a, const std::string& out_dir,
              std::int64_t seed_override, std::int64_t epochs_override) {
  auto t0 = Clock::now();
  apex::AblationConfig cfg =
      apex::AblationConfig::from_kv(apex::read_kv_file(a.config_path));
  if (seed_override >= 0) cfg.seed = std::uint64_t(seed_override);
  if (epochs_override >= 0) cfg.epochs = std::size_t(epochs_override);
  cfg.validate();

  std::vector<apex::SampleRecord> data = apex::read_dataset(a.dataset_path);
  apex::ApexModel model(cfg, a.anatomy_classes, a.pathology_classes);
  apex::TrainResult tr = apex::train_model(model, data);
  apex::EvalReport rep = apex::evaluate_model(model, data);

  fs::create_directories(out_dir);
  std::string ck = (fs::path(out_dir) / "checkpoint.apexck").string();
  apex::nn::save_checkpoint(ck, model.params());

  json m;
  m["format"] = "apex-run-manifest-v1";
  m["command"] = "train";
  m["config"] = config_json(cfg);
  m["seed"] = cfg.seed;
  m["anatomy_classes"] = a.anatomy_classes;
  m["pathology_classes"] = a.pathology_classes;
  m["dataset"] = {{"path", a.dataset_path},
                  {"samples", data.size()},
                  {"content_hash", hex64(apex::dataset_content_hash(data))}};
  m["epoch_losses"] = tr.epoch_losses;
  m["metrics"] = report_json(rep);  // on the training set
  m["checkpoint"] = ck;
  // Wall clock is recorded for the log but is no part of any determinism
  // guarantee.
  m["wall_clock_seconds"] =
      std::chrono::duration<double>(Clock::now() - t0).count();
  write_text((fs::path(out_dir) / "manifest.json").string(), m.dump(2) + "\n");

  std::printf("trained %zu epochs on %zu samples: train mIoU %.4f -> %s\n",
              cfg.epochs, data.size(), rep.miou, out_dir.c_str());
  return 0;
}

int cmd_eval(const RunArgs& a, const std::string& checkpoint,
             const std::string& out_path, const std::string& dump_dir) {
  auto t0 = Clock::now();
  apex::AblationConfig cfg =
      apex::AblationConfig::from_kv(apex::read_kv_file(a.config_path));
  cfg.validate();

  std::vector<apex::SampleRecord> data = apex::read_dataset(a.dataset_path);
  apex::ApexModel model(cfg, a.anatomy_classes, a.pathology_classes);
  apex::nn::load_checkpoint(checkpoint, model.params());
  apex::EvalReport rep = apex::evaluate_model(model, data);

  if (!dump_dir.empty()) {
    fs::create_directories(dump_dir);
    std::size_t off = model.pathology_class_offset();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const apex::SampleRecord& s = data[i];
      apex::ad::NoTapeScope no_tape;
      apex::ModelOutputs out = model.forward(s);
      char name[64];
      std::vector<std::uint8_t> pl = apex::predicted_label_map(
          out.path_stages.back(), off, a.pathology_classes, s.h, s.w);
      std::snprintf(name, sizeof name, "sample_%04zu_pathology.pgm", i);
      apex::write_pgm((fs::path(dump_dir) / name).string(),
                      gray_map(pl, a.pathology_classes), s.h, s.w);
      if (model.has_anatomy_branch()) {
        std::vector<std::uint8_t> al = apex::predicted_label_map(
            out.ana_stages.back(), 0, a.anatomy_classes, s.h, s.w);
        std::snprintf(name, sizeof name, "sample_%04zu_anatomy.pgm", i);
        apex::write_pgm((fs::path(dump_dir) / name).string(),
                        gray_map(al, a.anatomy_classes), s.h, s.w);
      }
    }
  }

  json m;
  m["format"] = "apex-run-manifest-v1";
  m["command"] = "eval";
  m["config"] = config_json(cfg);
  m["checkpoint"] = checkpoint;
  m["anatomy_classes"] = a.anatomy_classes;
  m["pathology_classes"] = a.pathology_classes;
  m["dataset"] = {{"path", a.dataset_path},
                  {"samples", data.size()},
                  {"content_hash", hex64(apex::dataset_content_hash(data))}};
  m["metrics"] = report_json(rep);
  m["wall_clock_seconds"] =
      std::chrono::duration<double>(Clock::now() - t0).count();
  write_text(out_path, m.dump(2) + "\n");

  std::printf("evaluated %zu samples: mIoU %.4f mBIoU %.4f mAP %.4f\n",
              data.size(), rep.miou, rep.mbiou, rep.instance_map);
  return 0;
}

struct AblateArgs {
  std::string out_csv;
  std::size_t folds = 5;
  std::size_t n_train = 40;
  std::size_t n_val = 20;
  std::uint64_t base_seed = 1000;
  std::uint64_t data_seed = 777;
  double rho = 0.95;
  std::size_t epochs = 120;
  std::size_t d = 32;
  std::size_t layers = 6;
  std::size_t queries = 20;
  std::size_t heads = 4;
  std::size_t r_rounds = 2;
  double lr = 1e-3;
  std::size_t anatomy_classes = 6;
  std::size_t pathology_classes = 3;
  std::size_t jobs = 1;
};

int cmd_ablate(const AblateArgs& a) {
  auto t0 = Clock::now();

  // Per-fold datasets are row-independent and shared across the grid.
  std::vector<std::vector<apex::SampleRecord>> tr(a.folds), va(a.folds);
  for (std::size_t f = 0; f < a.folds; ++f) {
    apex::GeneratorConfig g;
    g.seed = apex::hash_combine(apex::hash_combine(a.data_seed, "dataset"), f);
    g.rho = a.rho;
    g.anatomy_classes = int(a.anatomy_classes);
    g.pathology_classes = int(a.pathology_classes);
    std::vector<apex::SampleRecord> all =
        apex::generate_dataset(g, a.n_train + a.n_val);
    tr[f].assign(all.begin(), all.begin() + a.n_train);
    va[f].assign(all.begin() + a.n_train, all.end());
  }

  std::vector<apex::AblationConfig> runs =
      apex::grid(a.anatomy_classes, a.folds, a.base_seed);
  for (apex::AblationConfig& cfg : runs) {
    cfg.epochs = a.epochs;
    cfg.d = a.d;
    cfg.layers = a.layers;
    cfg.queries = a.queries;
    cfg.heads = a.heads;
    cfg.r_rounds = a.r_rounds;
    cfg.lr = a.lr;
    cfg.rho = a.rho;
    cfg.validate();
  }

  std::vector<double> miou(runs.size(), 0.0);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= runs.size()) return;
      const apex::AblationConfig& cfg = runs[i];
      apex::ApexModel model(cfg, a.anatomy_classes, a.pathology_classes);
      apex::train_model(model, tr[cfg.fold]);
      miou[i] = apex::evaluate_model(model, va[cfg.fold]).miou;
    }
  };
  std::size_t jobs = std::max<std::size_t>(1, a.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  // One CSV row per grid row, folds aggregated as "mean ± std" of 100x mIoU.
  std::string csv = "method,a_cond,a_pred,gamma,iou\n";
  for (std::size_t r = 0; r < runs.size(); r += a.folds) {
    std::vector<double> vals;
    for (std::size_t f = 0; f < a.folds; ++f)
      vals.push_back(100.0 * miou[r + f]);
    apex::FoldSummary s = apex::aggregate_folds(vals);
    apex::MethodFlags flags = apex::method_flags(runs[r]);
    csv += apex::method_label(runs[r]) + "," + flags.a_cond + "," +
           flags.a_pred + "," + flags.gamma + "," +
           apex::format_mean_std(s.mean, s.std) + "\n";
  }
  write_text(a.out_csv, csv);

  std::printf("ablation grid: %zu runs -> %s (%.0fs)\n", runs.size(),
              a.out_csv.c_str(),
              std::chrono::duration<double>(Clock::now() - t0).count());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anatomy-guided pathology segmentation workbench"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out;
  std::size_t gen_count = 0;
  std::uint64_t gen_seed = 0;
  double gen_rho = 1.0, gen_noise = 0.05, gen_rmin = 6.5, gen_rmax = 10.0;
  int gen_a = 6, gen_p = 3;
  gen->add_option("--out", gen_out, "output .apexds path")->required();
  gen->add_option("--count", gen_count, "number of samples")->required();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--rho", gen_rho, "anatomy-conditioning strength in [0,1]")
      ->capture_default_str();
  gen->add_option("--anatomy-classes", gen_a, "anatomy classes (A)")
      ->capture_default_str();
  gen->add_option("--pathology-classes", gen_p, "pathology classes (P)")
      ->capture_default_str();
  gen->add_option("--noise", gen_noise, "texture noise sigma")
      ->capture_default_str();
  gen->add_option("--min-radius", gen_rmin, "smallest island radius")
      ->capture_default_str();
  gen->add_option("--max-radius", gen_rmax, "largest island radius")
      ->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "train one configuration");
  RunArgs train_args;
  std::string train_out;
  std::int64_t train_seed = -1, train_epochs = -1;
  add_run_args(train, train_args);
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--seed", train_seed, "override the config seed");
  train->add_option("--epochs", train_epochs, "override the config epochs");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  RunArgs eval_args;
  std::string eval_ck, eval_out, eval_dump;
  add_run_args(ev, eval_args);
  ev->add_option("--checkpoint", eval_ck, "APEXCK1 checkpoint")->required();
  ev->add_option("--out", eval_out, "manifest JSON path")->required();
  ev->add_option("--dump-masks", eval_dump,
                 "directory for predicted-mask PGM dumps");

  // ablate
  auto* ab = app.add_subcommand("ablate", "run the ablation grid");
  AblateArgs ab_args;
  ab->add_option("--out", ab_args.out_csv, "output CSV path")->required();
  ab->add_option("--folds", ab_args.folds)->capture_default_str();
  ab->add_option("--train", ab_args.n_train, "training samples per fold")
      ->capture_default_str();
  ab->add_option("--val", ab_args.n_val, "validation samples per fold")
      ->capture_default_str();
  ab->add_option("--seed", ab_args.base_seed, "grid base seed")
      ->capture_default_str();
  ab->add_option("--data-seed", ab_args.data_seed, "fold dataset seed")
      ->capture_default_str();
  ab->add_option("--rho", ab_args.rho)->capture_default_str();
  ab->add_option("--epochs", ab_args.epochs)->capture_default_str();
  ab->add_option("--d", ab_args.d, "embedding width")->capture_default_str();
  ab->add_option("--layers", ab_args.layers)->capture_default_str();
  ab->add_option("--queries", ab_args.queries)->capture_default_str();
  ab->add_option("--heads", ab_args.heads)->capture_default_str();
  ab->add_option("--r-rounds", ab_args.r_rounds)->capture_default_str();
  ab->add_option("--lr", ab_args.lr)->capture_default_str();
  ab->add_option("--anatomy-classes", ab_args.anatomy_classes)
      ->capture_default_str();
  ab->add_option("--pathology-classes", ab_args.pathology_classes)
      ->capture_default_str();
  ab->add_option("--jobs", ab_args.jobs, "parallel runs")
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_count, gen_seed, gen_rho, gen_a, gen_p,
                          gen_noise, gen_rmin, gen_rmax);
    if (train->parsed())
      return cmd_train(train_args, train_out, train_seed, train_epochs);
    if (ev->parsed()) return cmd_eval(eval_args, eval_ck, eval_out, eval_dump);
    if (ab->parsed()) return cmd_ablate(ab_args);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
