#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace apex {

// Procedural anatomy+pathology sample generator. rho is the
// anatomy-conditioning strength: at 1 every pathology sits inside its host
// anatomy region and distractor textures avoid the pathology signature
// combinations; at 0 placement is uniform over the body and signatures carry
// no evidence.
struct GeneratorConfig {
  std::size_t h = 64, w = 64;
  int anatomy_classes = 6;    // A, labels 1..A
  int pathology_classes = 3;  // P, labels 1..P
  double rho = 1.0;
  double noise = 0.05;  // channel-0 texture noise sigma
  int min_pathologies = 1, max_pathologies = 2;
  int min_distractors = 1, max_distractors = 3;
  double min_island_radius = 6.5, max_island_radius = 10.0;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

struct SampleRecord {
  std::uint32_t h = 0, w = 0;
  std::vector<float> image;                       // [3,h,w], channel 2 zero
  std::vector<std::uint16_t> anatomy_label;       // [h,w], 0 = background
  std::vector<std::uint16_t> anatomy_instance;    // [h,w], 0 = none
  std::vector<std::uint16_t> pathology_label;     // [h,w], 0 = none
  std::vector<std::uint16_t> pathology_instance;  // [h,w], 0 = none

  bool operator==(const SampleRecord&) const = default;
};

// Host anatomy region for a pathology class, and the anatomy class whose
// channel-0 texture the pathology mimics. donor != host always, which is
// what makes the texture locally ambiguous.
int host_of(int pathology_class, int anatomy_classes);
int donor_of(int pathology_class, int anatomy_classes);

// Deterministic in (cfg.seed, index); bit-identical on repeated calls.
SampleRecord generate_sample(const GeneratorConfig& cfg, std::uint64_t index);

std::vector<SampleRecord> generate_dataset(const GeneratorConfig& cfg,
                                           std::size_t count,
                                           std::uint64_t first_index = 0);

// 4-connected components of the nonzero cells of a label grid, per label
// value. Returns a grid of instance ids, contiguous from first_id in
// row-major discovery order, and the number of components found.
std::pair<std::vector<std::uint16_t>, int> label_connected_components(
    const std::vector<std::uint16_t>& labels, std::size_t h, std::size_t w,
    int first_id);

// Deterministic shuffle, then contiguous chunks as validation folds.
// Returns k (train_indices, val_indices) pairs; folds disjoint and covering.
std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

}  // namespace apex
