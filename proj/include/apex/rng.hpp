#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace apex {

// 64-bit FNV-1a over raw bytes. Used for substream derivation and for
// content hashes of dataset/checkpoint files.
std::uint64_t fnv1a64(const void* data, std::size_t n,
                      std::uint64_t basis = 1469598103934665603ull);

std::uint64_t hash_combine(std::uint64_t seed, std::string_view name);
std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value);

// Deterministic RNG. The engine is std::mt19937_64, whose output sequence is
// pinned by the standard; distributions are hand-rolled because the std::
// distribution objects are implementation-defined and would break bit-exact
// reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Named substream: hash(root, name [, index]). All randomness in the
  // project flows from one root seed through named substreams.
  static Rng substream(std::uint64_t root, std::string_view name);
  static Rng substream(std::uint64_t root, std::string_view name,
                       std::uint64_t index);

  std::uint64_t next_u64() { return eng_(); }

  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  int uniform_int(int lo, int hi);  // inclusive bounds

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace apex
