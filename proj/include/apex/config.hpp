#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "apex/mixing.hpp"

namespace apex {

// How anatomical knowledge enters a single-branch model. kBaseline is also
// the setting used by every dual-branch (sharing/mixing) configuration.
enum class Incorporation {
  kBaseline,    // pathology-only training
  kPretrain,    // train on anatomy first, then fine-tune on pathology
  kMultitask,   // one head over anatomy+pathology classes, gamma-weighted
  kAnaIn,       // anatomy label map fed into the spare image channel
  kAnaInAux,    // anatomy input channel AND multitask prediction (gamma)
};

// Which trunk components the anatomy and pathology branches share.
enum class Sharing {
  kNone,                 // single branch only
  kSharedBackbone,       // shared feature extractor, separate pixel decoders
  kSharedPixelDecoder,   // shared extractor and pixel decoder, dual decoders
};

const char* incorporation_name(Incorporation i);
const char* sharing_name(Sharing s);
Incorporation parse_incorporation(const std::string& s);
Sharing parse_sharing(const std::string& s);

// One experiment row: architecture choice + training hyperparameters.
// Immutable once validated; serialized to key=value config files.
struct AblationConfig {
  Incorporation incorporation = Incorporation::kBaseline;
  Sharing sharing = Sharing::kNone;
  MixKind mixing = MixKind::kIdentity;
  double gamma = 1.0;  // pathology class-weight for multitask variants

  std::uint64_t seed = 1;
  std::size_t fold = 0;
  std::size_t folds = 5;

  // Model size.
  std::size_t d = 64;        // token/pixel embedding width
  std::size_t r_rounds = 2;  // pixel-decoder self-attention rounds
  std::size_t layers = 6;    // decoder stages per branch
  std::size_t queries = 20;  // object queries per branch
  std::size_t heads = 4;

  // Optimization (desk-scale defaults).
  double lr = 3e-4;
  std::string lr_schedule = "cosine";  // "cosine" or "constant"
  std::size_t epochs = 30;
  double rho = 1.0;  // generator correlation, recorded for the manifest

  // Throws std::invalid_argument citing the violated nesting rule.
  void validate() const;

  std::map<std::string, std::string> to_kv() const;
  static AblationConfig from_kv(const std::map<std::string, std::string>& kv);
};

// Table-row label for a validated config (e.g. "Query Sum 2-ways"). The three
// multitask rows share the label "Multitask" and differ in the gamma column.
std::string method_label(const AblationConfig& cfg);

// Conditioning-flag columns as printed in the ablation table.
struct MethodFlags {
  std::string a_cond;  // "✓" or "--"
  std::string a_pred;
  std::string gamma;   // numeral or "--"
};
MethodFlags method_flags(const AblationConfig& cfg);

// The full ablation grid: 13 named rows x `folds` folds, in table order.
// Every config validates; the grid is deterministic. `anatomy_classes` sets
// the gamma of the class-balanced multitask row.
std::vector<AblationConfig> grid(std::size_t anatomy_classes = 6,
                                 std::size_t folds = 5,
                                 std::uint64_t base_seed = 1000);

// key=value file I/O ('#' comments and blank lines ignored).
std::map<std::string, std::string> read_kv_file(const std::string& path);
std::map<std::string, std::string> parse_kv_text(const std::string& text);
void write_kv_file(const std::string& path,
                   const std::map<std::string, std::string>& kv);

}  // namespace apex
