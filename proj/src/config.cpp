#include "apex/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "apex/rng.hpp"

namespace apex {

namespace {

[[noreturn]] void bad(const std::string& msg) {
  throw std::invalid_argument("config: " + msg);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    bad("key '" + key + "' expects a number, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    bad("key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

}  // namespace

const char* incorporation_name(Incorporation i) {
  switch (i) {
    case Incorporation::kBaseline: return "baseline";
    case Incorporation::kPretrain: return "pretrain";
    case Incorporation::kMultitask: return "multitask";
    case Incorporation::kAnaIn: return "ana_in";
    case Incorporation::kAnaInAux: return "ana_in_aux";
  }
  bad("unknown incorporation enum value");
}

const char* sharing_name(Sharing s) {
  switch (s) {
    case Sharing::kNone: return "none";
    case Sharing::kSharedBackbone: return "shared_backbone";
    case Sharing::kSharedPixelDecoder: return "shared_pixeldecoder";
  }
  bad("unknown sharing enum value");
}

Incorporation parse_incorporation(const std::string& s) {
  if (s == "baseline") return Incorporation::kBaseline;
  if (s == "pretrain") return Incorporation::kPretrain;
  if (s == "multitask") return Incorporation::kMultitask;
  if (s == "ana_in") return Incorporation::kAnaIn;
  if (s == "ana_in_aux") return Incorporation::kAnaInAux;
  bad("unknown incorporation '" + s + "'");
}

Sharing parse_sharing(const std::string& s) {
  if (s == "none") return Sharing::kNone;
  if (s == "shared_backbone") return Sharing::kSharedBackbone;
  if (s == "shared_pixeldecoder") return Sharing::kSharedPixelDecoder;
  bad("unknown sharing '" + s + "'");
}

void AblationConfig::validate() const {
  if (incorporation != Incorporation::kBaseline) {
    if (sharing != Sharing::kNone)
      bad(std::string("incorporation '") + incorporation_name(incorporation) +
          "' is a single-branch method; it cannot be combined with sharing '" +
          sharing_name(sharing) +
          "' (table nesting: sharing rows build on the plain baseline)");
    if (mixing != MixKind::kIdentity)
      bad(std::string("incorporation '") + incorporation_name(incorporation) +
          "' has no second query set to mix; mixing must stay 'identity'");
  }
  if (mixing != MixKind::kIdentity && sharing != Sharing::kSharedPixelDecoder)
    bad(std::string("mixing '") + mix_kind_name(mixing) +
        "' requires sharing 'shared_pixeldecoder' (table nesting: query-mixing "
        "rows extend the '+Shared PD' row)");
  if (incorporation == Incorporation::kMultitask ||
      incorporation == Incorporation::kAnaInAux) {
    if (!(gamma > 0.0) || !std::isfinite(gamma))
      bad("gamma must be a positive finite weight, got " + fmt_double(gamma));
  }
  if (d == 0 || d % 4 != 0)
    bad("d must be a positive multiple of 4 (positional encoding), got " +
        std::to_string(d));
  if (heads == 0 || d % heads != 0)
    bad("heads must divide d, got d=" + std::to_string(d) +
        " heads=" + std::to_string(heads));
  if (queries == 0) bad("queries must be positive");
  if (folds < 2) bad("folds must be at least 2");
  if (fold >= folds)
    bad("fold " + std::to_string(fold) + " out of range for " +
        std::to_string(folds) + " folds");
  if (!(lr > 0.0) || !std::isfinite(lr)) bad("lr must be positive and finite");
  if (lr_schedule != "cosine" && lr_schedule != "constant")
    bad("lr_schedule must be \"cosine\" or \"constant\"");
  if (!(rho >= 0.0 && rho <= 1.0)) bad("rho must lie in [0,1]");
}

std::map<std::string, std::string> AblationConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["incorporation"] = incorporation_name(incorporation);
  kv["sharing"] = sharing_name(sharing);
  kv["mixing"] = mix_kind_name(mixing);
  kv["gamma"] = fmt_double(gamma);
  kv["seed"] = std::to_string(seed);
  kv["fold"] = std::to_string(fold);
  kv["folds"] = std::to_string(folds);
  kv["d"] = std::to_string(d);
  kv["r_rounds"] = std::to_string(r_rounds);
  kv["layers"] = std::to_string(layers);
  kv["queries"] = std::to_string(queries);
  kv["heads"] = std::to_string(heads);
  kv["lr"] = fmt_double(lr);
  kv["lr_schedule"] = lr_schedule;
  kv["epochs"] = std::to_string(epochs);
  kv["rho"] = fmt_double(rho);
  return kv;
}

AblationConfig AblationConfig::from_kv(
    const std::map<std::string, std::string>& kv) {
  AblationConfig cfg;
  for (const auto& [key, v] : kv) {
    if (key == "incorporation") cfg.incorporation = parse_incorporation(v);
    else if (key == "sharing") cfg.sharing = parse_sharing(v);
    else if (key == "mixing") cfg.mixing = parse_mix_kind(v);
    else if (key == "gamma") cfg.gamma = parse_double(key, v);
    else if (key == "seed") cfg.seed = parse_u64(key, v);
    else if (key == "fold") cfg.fold = std::size_t(parse_u64(key, v));
    else if (key == "folds") cfg.folds = std::size_t(parse_u64(key, v));
    else if (key == "d") cfg.d = std::size_t(parse_u64(key, v));
    else if (key == "r_rounds") cfg.r_rounds = std::size_t(parse_u64(key, v));
    else if (key == "layers") cfg.layers = std::size_t(parse_u64(key, v));
    else if (key == "queries") cfg.queries = std::size_t(parse_u64(key, v));
    else if (key == "heads") cfg.heads = std::size_t(parse_u64(key, v));
    else if (key == "lr") cfg.lr = parse_double(key, v);
    else if (key == "lr_schedule") cfg.lr_schedule = v;
    else if (key == "epochs") cfg.epochs = std::size_t(parse_u64(key, v));
    else if (key == "rho") cfg.rho = parse_double(key, v);
    else bad("unknown key '" + key + "'");
  }
  return cfg;
}

std::string method_label(const AblationConfig& cfg) {
  switch (cfg.incorporation) {
    case Incorporation::kPretrain: return "Pretrain";
    case Incorporation::kMultitask: return "Multitask";
    case Incorporation::kAnaIn:
    case Incorporation::kAnaInAux: return "Ana In";
    case Incorporation::kBaseline: break;
  }
  switch (cfg.sharing) {
    case Sharing::kNone: return "Baseline";
    case Sharing::kSharedBackbone: return "+Shared BB";
    case Sharing::kSharedPixelDecoder: break;
  }
  switch (cfg.mixing) {
    case MixKind::kIdentity: return "+Shared PD";
    case MixKind::kSum: return "Query Sum";
    case MixKind::kSum2Way: return "Query Sum 2-ways";
    case MixKind::kMean: return "Query Mean";
    case MixKind::kCrossAttention: return "Cross Attention (CA)";
    case MixKind::kCrossAttentionPerLevel: return "CA per feature level";
  }
  bad("unreachable method label");
}

MethodFlags method_flags(const AblationConfig& cfg) {
  MethodFlags f{"--", "--", "--"};
  auto gamma_str = [&]() {
    if (cfg.gamma == std::floor(cfg.gamma) && std::abs(cfg.gamma) < 1e15) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.0f", cfg.gamma);
      return std::string(buf);
    }
    return fmt_double(cfg.gamma);
  };
  switch (cfg.incorporation) {
    case Incorporation::kBaseline: break;
    case Incorporation::kPretrain: f.a_cond = "✓"; break;
    case Incorporation::kMultitask:
      f.a_pred = "✓";
      f.gamma = gamma_str();
      break;
    case Incorporation::kAnaIn: f.a_cond = "✓"; break;
    case Incorporation::kAnaInAux:
      f.a_cond = "✓";
      f.a_pred = "✓";
      f.gamma = gamma_str();
      break;
  }
  return f;
}

std::vector<AblationConfig> grid(std::size_t anatomy_classes,
                                 std::size_t folds, std::uint64_t base_seed) {
  struct Row {
    Incorporation inc;
    Sharing sh;
    MixKind mix;
    double gamma;
  };
  const std::vector<Row> rows = {
      {Incorporation::kBaseline, Sharing::kNone, MixKind::kIdentity, 1.0},
      {Incorporation::kPretrain, Sharing::kNone, MixKind::kIdentity, 1.0},
      {Incorporation::kMultitask, Sharing::kNone, MixKind::kIdentity, 1.0},
      {Incorporation::kMultitask, Sharing::kNone, MixKind::kIdentity, 10.0},
      {Incorporation::kMultitask, Sharing::kNone, MixKind::kIdentity,
       double(anatomy_classes)},
      {Incorporation::kAnaIn, Sharing::kNone, MixKind::kIdentity, 1.0},
      {Incorporation::kBaseline, Sharing::kSharedBackbone, MixKind::kIdentity,
       1.0},
      {Incorporation::kBaseline, Sharing::kSharedPixelDecoder,
       MixKind::kIdentity, 1.0},
      {Incorporation::kBaseline, Sharing::kSharedPixelDecoder, MixKind::kSum,
       1.0},
      {Incorporation::kBaseline, Sharing::kSharedPixelDecoder,
       MixKind::kSum2Way, 1.0},
      {Incorporation::kBaseline, Sharing::kSharedPixelDecoder, MixKind::kMean,
       1.0},
      {Incorporation::kBaseline, Sharing::kSharedPixelDecoder,
       MixKind::kCrossAttention, 1.0},
      {Incorporation::kBaseline, Sharing::kSharedPixelDecoder,
       MixKind::kCrossAttentionPerLevel, 1.0},
  };
  std::vector<AblationConfig> out;
  out.reserve(rows.size() * folds);
  for (const Row& r : rows)
    for (std::size_t f = 0; f < folds; ++f) {
      AblationConfig cfg;
      cfg.incorporation = r.inc;
      cfg.sharing = r.sh;
      cfg.mixing = r.mix;
      cfg.gamma = r.gamma;
      cfg.fold = f;
      cfg.folds = folds;
      // Methods share the fold's seed so fold comparisons are paired.
      cfg.seed = hash_combine(hash_combine(base_seed, "fold"), f);
      cfg.validate();
      out.push_back(cfg);
    }
  return out;
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::size_t begin = line.find_first_not_of(" \t");
    if (begin == std::string::npos || line[begin] == '#') continue;
    std::size_t eq = line.find('=', begin);
    if (eq == std::string::npos)
      bad("line " + std::to_string(lineno) + " is not key=value: '" + line +
          "'");
    auto trim = [](std::string s) {
      std::size_t a = s.find_first_not_of(" \t");
      std::size_t b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(begin, eq - begin));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) bad("line " + std::to_string(lineno) + " has empty key");
    if (!kv.emplace(key, val).second)
      bad("duplicate key '" + key + "' at line " + std::to_string(lineno));
  }
  return kv;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) bad("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_kv_text(ss.str());
}

void write_kv_file(const std::string& path,
                   const std::map<std::string, std::string>& kv) {
  std::ofstream out(path, std::ios::binary);
  if (!out) bad("cannot open '" + path + "' for writing");
  for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
  if (!out) bad("failed writing config file '" + path + "'");
}

}  // namespace apex
