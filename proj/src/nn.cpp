#include "apex/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "apex/ops.hpp"
#include "apex/rng.hpp"

namespace apex::nn {

using ad::Tensor;

ad::Tensor ParamStore::get(const std::string& name, const ad::Shape& shape,
                           const InitSpec& init) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (!ad::shape_eq(it->second.shape(), shape))
      throw std::invalid_argument("ParamStore: '" + name +
                                  "' requested with shape " +
                                  ad::shape_str(shape) + " but exists as " +
                                  ad::shape_str(it->second.shape()));
    return it->second;
  }
  std::size_t n = ad::shape_numel(shape);
  std::vector<double> v(n, 0.0);
  switch (init.kind) {
    case InitSpec::kZeros:
      break;
    case InitSpec::kOnes:
      v.assign(n, 1.0);
      break;
    case InitSpec::kNormal: {
      Rng rng = Rng::substream(seed_, name);
      for (std::size_t i = 0; i < n; ++i) v[i] = rng.normal(0.0, init.stddev);
      break;
    }
  }
  Tensor t = Tensor::from_values(shape, std::move(v), /*requires_grad=*/true);
  params_.emplace(name, t);
  return t;
}

void ParamStore::set(const std::string& name, const ad::Shape& shape,
                     std::vector<double> values) {
  if (values.size() != ad::shape_numel(shape))
    throw std::invalid_argument("ParamStore::set: value count mismatch for '" +
                                name + "'");
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (!ad::shape_eq(it->second.shape(), shape))
      throw std::invalid_argument("ParamStore::set: shape mismatch for '" +
                                  name + "'");
    std::copy(values.begin(), values.end(), it->second.data());
  } else {
    params_.emplace(
        name, Tensor::from_values(shape, std::move(values), true));
  }
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : params_) {
    Tensor tt = t;
    tt.zero_grad();
  }
}

Tensor linear(ParamStore& ps, const std::string& prefix, const Tensor& x,
              std::size_t dout, const InitSpec& winit, bool bias) {
  if (x.rank() != 2)
    throw ad::ShapeError("linear: input must be 2-D, got " +
                         ad::shape_str(x.shape()));
  std::size_t din = x.shape()[1];
  Tensor w = ps.get(prefix + ".w", {din, dout}, winit);
  Tensor y = ad::matmul(x, w);
  if (bias) {
    Tensor b = ps.get(prefix + ".b", {dout}, InitSpec::zeros());
    y = ad::add(y, b);
  }
  return y;
}

Tensor layer_norm_p(ParamStore& ps, const std::string& prefix,
                    const Tensor& x) {
  std::size_t d = x.shape().back();
  Tensor g = ps.get(prefix + ".g", {d}, InitSpec::ones());
  Tensor b = ps.get(prefix + ".b", {d}, InitSpec::zeros());
  return ad::layer_norm(x, g, b);
}

AttnResult multi_head_attention(ParamStore& ps, const std::string& prefix,
                                const Tensor& q_in, const Tensor& k_in,
                                const Tensor& v_in, std::size_t heads,
                                const std::vector<std::uint8_t>* forbid,
                                bool zero_init_out) {
  std::size_t d = q_in.shape()[1];
  if (heads == 0 || d % heads != 0)
    throw std::invalid_argument("multi_head_attention: head count " +
                                std::to_string(heads) +
                                " must divide model dim " + std::to_string(d));
  std::size_t nq = q_in.shape()[0], nk = k_in.shape()[0];
  if (forbid && forbid->size() != nq * nk)
    throw std::invalid_argument(
        "multi_head_attention: forbid mask has wrong size");
  std::size_t dh = d / heads;
  InitSpec w_init = InitSpec::normal(1.0 / std::sqrt(double(d)));

  Tensor q = linear(ps, prefix + ".q", q_in, d, w_init);
  Tensor k = linear(ps, prefix + ".k", k_in, d, w_init);
  Tensor v = linear(ps, prefix + ".v", v_in, d, w_init);

  std::vector<Tensor> head_outs, head_attns;
  double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = ad::slice(q, 1, h * dh, dh);
    Tensor kh = ad::slice(k, 1, h * dh, dh);
    Tensor vh = ad::slice(v, 1, h * dh, dh);
    Tensor logits =
        ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_dh);
    if (forbid) logits = ad::masked_fill(logits, *forbid, -1e9);
    Tensor a = ad::softmax(logits, 1);
    head_attns.push_back(a);
    head_outs.push_back(ad::matmul(a, vh));
  }
  Tensor merged = ad::concat(head_outs, 1);
  Tensor out = linear(ps, prefix + ".out", merged, d,
                      zero_init_out ? InitSpec::zeros() : w_init);

  Tensor attn_sum = head_attns[0];
  for (std::size_t h = 1; h < heads; ++h)
    attn_sum = ad::add(attn_sum, head_attns[h]);
  Tensor attn_avg = ad::mul_scalar(attn_sum, 1.0 / double(heads));
  return {out, attn_avg};
}

Tensor ffn(ParamStore& ps, const std::string& prefix, const Tensor& x,
           std::size_t hidden_mult) {
  std::size_t d = x.shape()[1];
  InitSpec w_init = InitSpec::normal(1.0 / std::sqrt(double(d)));
  Tensor h = ad::relu(linear(ps, prefix + ".fc1", x, d * hidden_mult, w_init));
  InitSpec w2_init = InitSpec::normal(1.0 / std::sqrt(double(d * hidden_mult)));
  return linear(ps, prefix + ".fc2", h, d, w2_init);
}

Tensor pos_enc_2d(std::size_t h, std::size_t w, std::size_t d) {
  if (d % 4 != 0)
    throw std::invalid_argument("pos_enc_2d: dim " + std::to_string(d) +
                                " must be divisible by 4");
  std::size_t half = d / 2;     // channels per coordinate
  std::size_t pairs = half / 2; // sin/cos pairs per coordinate
  std::vector<double> pe(h * w * d, 0.0);
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (std::size_t y = 0; y < h; ++y) {
    double py = (double(y) + 0.5) / double(h) * two_pi;
    for (std::size_t x = 0; x < w; ++x) {
      double px = (double(x) + 0.5) / double(w) * two_pi;
      double* row = pe.data() + (y * w + x) * d;
      for (std::size_t kk = 0; kk < pairs; ++kk) {
        double omega = std::pow(10000.0, -double(2 * kk) / double(half));
        row[2 * kk] = std::sin(py * omega);
        row[2 * kk + 1] = std::cos(py * omega);
        row[half + 2 * kk] = std::sin(px * omega);
        row[half + 2 * kk + 1] = std::cos(px * omega);
      }
    }
  }
  return Tensor::from_values({h * w, d}, std::move(pe));
}

void Adam::step(ParamStore& ps, double lr_scale) {
  ++t_;
  double bc1 = 1.0 - std::pow(b1_, double(t_));
  double bc2 = 1.0 - std::pow(b2_, double(t_));
  double lr = lr_ * lr_scale;
  for (const auto& [name, t] : ps.all()) {
    ad::TensorNode* node = t.node();
    if (node->grad.empty()) continue;  // never touched by a backward pass
    Slot& slot = slots_[name];
    if (slot.m.size() != node->value.size()) {
      slot.m.assign(node->value.size(), 0.0);
      slot.v.assign(node->value.size(), 0.0);
    }
    for (std::size_t i = 0; i < node->value.size(); ++i) {
      double g = node->grad[i];
      slot.m[i] = b1_ * slot.m[i] + (1.0 - b1_) * g;
      slot.v[i] = b2_ * slot.v[i] + (1.0 - b2_) * g * g;
      double mhat = slot.m[i] / bc1;
      double vhat = slot.v[i] / bc2;
      node->value[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& buf, std::size_t& off) {
  if (off + 8 > buf.size())
    throw std::runtime_error("APEXCK1: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= std::uint64_t(std::uint8_t(buf[off + i])) << (8 * i);
  off += 8;
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& ps) {
  std::string buf;
  buf += "APEXCK1";
  buf.push_back(char(1));
  put_u64(buf, ps.all().size());
  for (const auto& [name, t] : ps.all()) {
    nlohmann::json hdr;
    hdr["name"] = name;
    hdr["shape"] = t.shape();
    std::string hs = hdr.dump();
    put_u64(buf, hs.size());
    buf += hs;
    std::size_t bytes = t.numel() * sizeof(double);
    std::size_t pos = buf.size();
    buf.resize(pos + bytes);
    std::memcpy(&buf[pos], t.data(), bytes);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("APEXCK1: cannot open for write: " + path);
  f.write(buf.data(), std::streamsize(buf.size()));
  if (!f) throw std::runtime_error("APEXCK1: write failed: " + path);
}

std::vector<std::string> load_checkpoint(const std::string& path,
                                         ParamStore& ps) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("APEXCK1: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  std::size_t off = 0;
  if (buf.size() < 8 || buf.compare(0, 7, "APEXCK1") != 0)
    throw std::runtime_error("APEXCK1: bad magic in " + path);
  if (buf[7] != char(1))
    throw std::runtime_error("APEXCK1: unsupported version in " + path);
  off = 8;
  std::uint64_t count = get_u64(buf, off);
  std::vector<std::string> names;
  for (std::uint64_t e = 0; e < count; ++e) {
    std::uint64_t hlen = get_u64(buf, off);
    if (off + hlen > buf.size())
      throw std::runtime_error("APEXCK1: truncated header");
    nlohmann::json hdr = nlohmann::json::parse(buf.substr(off, hlen));
    off += hlen;
    std::string name = hdr.at("name").get<std::string>();
    ad::Shape shape = hdr.at("shape").get<ad::Shape>();
    std::size_t n = ad::shape_numel(shape);
    if (off + n * sizeof(double) > buf.size())
      throw std::runtime_error("APEXCK1: truncated payload for " + name);
    std::vector<double> vals(n);
    std::memcpy(vals.data(), buf.data() + off, n * sizeof(double));
    off += n * sizeof(double);
    ps.set(name, shape, std::move(vals));
    names.push_back(std::move(name));
  }
  return names;
}

}  // namespace apex::nn
