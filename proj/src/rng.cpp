#include "apex/rng.hpp"

#include <cmath>

namespace apex {

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t basis) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = basis;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t hash_combine(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = fnv1a64(&seed, sizeof(seed));
  return fnv1a64(name.data(), name.size(), h);
}

std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value) {
  std::uint64_t h = fnv1a64(&seed, sizeof(seed));
  return fnv1a64(&value, sizeof(value), h);
}

Rng Rng::substream(std::uint64_t root, std::string_view name) {
  return Rng(hash_combine(root, name));
}

Rng Rng::substream(std::uint64_t root, std::string_view name,
                   std::uint64_t index) {
  return Rng(hash_combine(hash_combine(root, name), index));
}

double Rng::uniform() {
  // 53 random mantissa bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal(double mean, double stddev) {
  if (have_spare_) {
    have_spare_ = false;
    return mean + stddev * spare_;
  }
  // Box-Muller on our own uniforms, u clamped away from 0.
  double u = uniform();
  if (u < 1e-300) u = 1e-300;
  double v = uniform();
  double r = std::sqrt(-2.0 * std::log(u));
  double a = 6.283185307179586476925286766559 * v;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return mean + stddev * r * std::cos(a);
}

int Rng::uniform_int(int lo, int hi) {
  std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

}  // namespace apex
