#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "apex/tensor.hpp"

namespace apex::nn {

// How a parameter is filled the first time it is requested.
struct InitSpec {
  enum Kind { kZeros, kOnes, kNormal } kind = kNormal;
  double stddev = 0.02;

  static InitSpec zeros() { return {kZeros, 0.0}; }
  static InitSpec ones() { return {kOnes, 0.0}; }
  static InitSpec normal(double stddev) { return {kNormal, stddev}; }
};

// Name-keyed parameter registry. Every parameter's initial values come from
// its own RNG substream keyed by (init_seed, name), so the values of one
// parameter never depend on which other parameters exist or on creation
// order. Adding a module (say, a query mixer) therefore cannot shift the
// initialization of unrelated weights.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t init_seed) : seed_(init_seed) {}

  // Returns the named parameter, creating it on first use. Throws
  // std::invalid_argument if it already exists with a different shape.
  ad::Tensor get(const std::string& name, const ad::Shape& shape,
                 const InitSpec& init);

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  // Replaces (or creates) a parameter with explicit values, e.g. when
  // loading a checkpoint.
  void set(const std::string& name, const ad::Shape& shape,
           std::vector<double> values);

  const std::map<std::string, ad::Tensor>& all() const { return params_; }
  std::size_t scalar_count() const;
  void zero_grads();
  std::uint64_t init_seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::map<std::string, ad::Tensor> params_;
};

// y = x @ W [+ b]; x: [N, din], W named "<prefix>.w", bias "<prefix>.b".
ad::Tensor linear(ParamStore& ps, const std::string& prefix,
                  const ad::Tensor& x, std::size_t dout, const InitSpec& winit,
                  bool bias = true);

// Layer norm with learned gain ("<prefix>.g", ones) and bias ("<prefix>.b",
// zeros) over the last axis.
ad::Tensor layer_norm_p(ParamStore& ps, const std::string& prefix,
                        const ad::Tensor& x);

struct AttnResult {
  ad::Tensor out;   // [Nq, d]
  ad::Tensor attn;  // [Nq, Nk], softmax weights averaged over heads
};

// Standard multi-head attention. q/k/v are already position-augmented as the
// caller wants them; `forbid` (optional, row-major [Nq*Nk], nonzero = block)
// suppresses logits to -1e9 before the softmax in every head. When
// zero_init_out is set the output projection starts at zero so the block
// initially contributes nothing.
AttnResult multi_head_attention(ParamStore& ps, const std::string& prefix,
                                const ad::Tensor& q_in, const ad::Tensor& k_in,
                                const ad::Tensor& v_in, std::size_t heads,
                                const std::vector<std::uint8_t>* forbid,
                                bool zero_init_out = false);

// Two-layer feed-forward: relu(x @ W1 + b1) @ W2 + b2, hidden = mult * d.
ad::Tensor ffn(ParamStore& ps, const std::string& prefix, const ad::Tensor& x,
               std::size_t hidden_mult = 2);

// Fixed 2-D sinusoidal position encoding, [h*w, d] row-major over (y, x)
// cells; the first d/2 channels encode y, the rest x, each as interleaved
// sin/cos at geometrically spaced frequencies of the normalized center
// coordinate. Requires d % 4 == 0.
ad::Tensor pos_enc_2d(std::size_t h, std::size_t w, std::size_t d);

// Adaptive-moment gradient descent with bias correction; updates every
// parameter whose gradient buffer has been allocated, in name order.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // lr_scale multiplies the base rate (cosine schedule hook).
  void step(ParamStore& ps, double lr_scale = 1.0);

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Slot> slots_;
};

// APEXCK1 checkpoint container: magic "APEXCK1" + version byte + u64 LE
// entry count, then per entry a u64 LE header length, a JSON header
// {"name","shape"}, and the raw little-endian f64 payload.
void save_checkpoint(const std::string& path, const ParamStore& ps);
// Loads entries into `ps` via set(); returns the parameter names loaded.
std::vector<std::string> load_checkpoint(const std::string& path,
                                         ParamStore& ps);

}  // namespace apex::nn
