#include "apex/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "apex/rng.hpp"

namespace apex::ad {

namespace {

void check_finite(const char* op, const Tensor& t) {
  for (double v : t.value())
    if (!std::isfinite(v))
      throw NumericsError(std::string(op) + ": produced non-finite value");
}

bool want_tape(const Tensor& out) {
  return active_tape() != nullptr && out.requires_grad();
}

// b broadcasts over a's leading axes when its shape equals a trailing
// suffix of a's shape.
bool suffix_broadcast(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
  return true;
}

void binary_shape_check(const char* op, const Tensor& a, const Tensor& b,
                        bool allow_broadcast) {
  if (shape_eq(a.shape(), b.shape())) return;
  if (allow_broadcast && suffix_broadcast(a.shape(), b.shape())) return;
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                   " vs " + shape_str(b.shape()) + " do not conform");
}

struct Strides2 {
  std::size_t outer, inner;  // a = outer copies of b (suffix broadcast)
};

Strides2 broadcast_layout(const Tensor& a, const Tensor& b) {
  std::size_t inner = b.numel();
  std::size_t outer = inner == 0 ? 0 : a.numel() / inner;
  return {outer, inner};
}

}  // namespace

// ---- elementwise binary -------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b,
                 bool allow_broadcast, Fwd fwd, Bwd bwd) {
  binary_shape_check(name, a, b, allow_broadcast);
  Tensor out = Tensor::zeros(a.shape());
  auto [outer, inner] = broadcast_layout(a, b);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i)
      po[o * inner + i] = fwd(pa[o * inner + i], pb[i]);
  check_finite(name, out);
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, b, out, outer = outer, inner = inner, bwd]() {
      const double* g = out.node()->grad.data();
      const double* pa = a.data();
      const double* pb = b.data();
      if (a.requires_grad()) a.node()->ensure_grad();
      if (b.requires_grad()) b.node()->ensure_grad();
      double* ga = a.requires_grad() ? a.node()->grad.data() : nullptr;
      double* gb = b.requires_grad() ? b.node()->grad.data() : nullptr;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          std::size_t k = o * inner + i;
          auto [da, db] = bwd(pa[k], pb[i], g[k]);
          if (ga) ga[k] += da;
          if (gb) gb[i] += db;
        }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, true, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair<double, double>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, true, [](double x, double y) { return x - y; },
      [](double, double, double g) {
        return std::pair<double, double>{g, -g};
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, true, [](double x, double y) { return x * y; },
      [](double x, double y, double g) {
        return std::pair<double, double>{g * y, g * x};
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, false, [](double x, double y) { return x / y; },
      [](double x, double y, double g) {
        return std::pair<double, double>{g / y, -g * x / (y * y)};
      });
}

// ---- elementwise unary --------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  check_finite(name, out);
  out.set_requires_grad(a.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, out, bwd]() {
      a.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      const double* pa = a.data();
      const double* po = out.data();
      double* ga = a.node()->grad.data();
      std::size_t n = a.numel();
      for (std::size_t i = 0; i < n; ++i) ga[i] += bwd(pa[i], po[i], g[i]);
    });
  }
  return out;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      "add_scalar", a, [s](double x) { return x + s; },
      [](double, double, double g) { return g; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      "mul_scalar", a, [s](double x) { return x * s; },
      [s](double, double, double g) { return g * s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double, double g) { return x > 0 ? g : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary_op(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double, double g) {
        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return g * (cdf + x * pdf);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double, double g) { return g / x; });
}

// ---- shape ops ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()) + " do not contract");
  std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out = Tensor::zeros({m, n});
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t kk = 0; kk < k; ++kk) {
        double av = pa[i * k + kk];
        if (av == 0.0) continue;
        const double* brow = pb + kk * n;
        double* orow = po + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }
  check_finite("matmul", out);
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, b, out, m, k, n]() {
      const double* g = out.node()->grad.data();
      if (a.requires_grad()) {
        a.node()->ensure_grad();
        double* ga = a.node()->grad.data();
        const double* pb = b.data();
        // dA = G * B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            double gv = g[i * n + j];
            if (gv == 0.0) continue;
            const double* brow = pb + j;  // column j of B, stride n
            double* garow = ga + i * k;
            for (std::size_t kk = 0; kk < k; ++kk)
              garow[kk] += gv * brow[kk * n];
          }
      }
      if (b.requires_grad()) {
        b.node()->ensure_grad();
        double* gb = b.node()->grad.data();
        const double* pa = a.data();
        // dB = A^T * G
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double av = pa[i * k + kk];
            if (av == 0.0) continue;
            const double* grow = g + i * n;
            double* gbrow = gb + kk * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError("transpose: tensor " + shape_str(a.shape()) +
                     " is not 2-D");
  std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  out.set_requires_grad(a.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, out, m, n]() {
      a.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      double* ga = a.node()->grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw ShapeError("reshape: tensor " + shape_str(a.shape()) +
                     " cannot reshape to " + shape_str(s));
  Tensor out = Tensor::from_values(std::move(s), std::vector<double>(
                                                     a.value().begin(),
                                                     a.value().end()));
  out.set_requires_grad(a.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, out]() {
      a.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      double* ga = a.node()->grad.data();
      std::size_t n = a.numel();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

namespace {

// outer/len/inner decomposition of an axis for slice/concat.
struct AxisLayout {
  std::size_t outer = 1, axis = 1, inner = 1;
};

AxisLayout axis_layout(const Shape& s, std::size_t axis) {
  AxisLayout l;
  l.axis = s[axis];
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

}  // namespace

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len) {
  if (axis >= a.rank() || start + len > a.shape()[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  Shape os = a.shape();
  os[axis] = len;
  Tensor out = Tensor::zeros(os);
  auto l = axis_layout(a.shape(), axis);
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t o = 0; o < l.outer; ++o)
    std::memcpy(po + o * len * l.inner,
                pa + (o * l.axis + start) * l.inner,
                len * l.inner * sizeof(double));
  out.set_requires_grad(a.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, out, l, start, len]() {
      a.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      double* ga = a.node()->grad.data();
      for (std::size_t o = 0; o < l.outer; ++o) {
        double* dst = ga + (o * l.axis + start) * l.inner;
        const double* src = g + o * len * l.inner;
        for (std::size_t i = 0; i < len * l.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

namespace {

// One output pixel of a bilinear upsample: four source taps and weights
// (taps coincide at clamped borders, so weights just accumulate).
struct BilinearTap {
  std::size_t idx[4];
  double w[4];
};

std::vector<BilinearTap> bilinear_taps(std::size_t h, std::size_t w,
                                       std::size_t factor) {
  std::size_t oh = h * factor, ow = w * factor;
  std::vector<BilinearTap> taps(oh * ow);
  double inv = 1.0 / double(factor);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    double sy = (double(oy) + 0.5) * inv - 0.5;
    double y0f = std::floor(sy);
    double fy = sy - y0f;
    std::ptrdiff_t y0 = std::ptrdiff_t(y0f);
    std::size_t ya = std::size_t(std::clamp<std::ptrdiff_t>(y0, 0, h - 1));
    std::size_t yb = std::size_t(std::clamp<std::ptrdiff_t>(y0 + 1, 0, h - 1));
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double sx = (double(ox) + 0.5) * inv - 0.5;
      double x0f = std::floor(sx);
      double fx = sx - x0f;
      std::ptrdiff_t x0 = std::ptrdiff_t(x0f);
      std::size_t xa = std::size_t(std::clamp<std::ptrdiff_t>(x0, 0, w - 1));
      std::size_t xb =
          std::size_t(std::clamp<std::ptrdiff_t>(x0 + 1, 0, w - 1));
      BilinearTap& t = taps[oy * ow + ox];
      t.idx[0] = ya * w + xa;
      t.idx[1] = ya * w + xb;
      t.idx[2] = yb * w + xa;
      t.idx[3] = yb * w + xb;
      t.w[0] = (1.0 - fy) * (1.0 - fx);
      t.w[1] = (1.0 - fy) * fx;
      t.w[2] = fy * (1.0 - fx);
      t.w[3] = fy * fx;
    }
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t h, std::size_t w,
                         std::size_t factor) {
  if (x.rank() != 2 || x.shape()[1] != h * w)
    throw ShapeError("upsample_bilinear: want [R," + std::to_string(h * w) +
                     "], got " + shape_str(x.shape()));
  if (factor == 0) throw ShapeError("upsample_bilinear: factor 0");
  std::size_t rows = x.shape()[0];
  std::size_t src_hw = h * w, dst_hw = h * w * factor * factor;
  auto taps = std::make_shared<std::vector<BilinearTap>>(
      bilinear_taps(h, w, factor));
  Tensor out = Tensor::zeros({rows, dst_hw});
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = px + r * src_hw;
    double* dst = po + r * dst_hw;
    for (std::size_t o = 0; o < dst_hw; ++o) {
      const BilinearTap& t = (*taps)[o];
      dst[o] = t.w[0] * src[t.idx[0]] + t.w[1] * src[t.idx[1]] +
               t.w[2] * src[t.idx[2]] + t.w[3] * src[t.idx[3]];
    }
  }
  out.set_requires_grad(x.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [x, out, taps, rows, src_hw,
                                           dst_hw]() {
      x.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      double* gx = x.node()->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* go = g + r * dst_hw;
        double* gs = gx + r * src_hw;
        for (std::size_t o = 0; o < dst_hw; ++o) {
          const BilinearTap& t = (*taps)[o];
          gs[t.idx[0]] += t.w[0] * go[o];
          gs[t.idx[1]] += t.w[1] * go[o];
          gs[t.idx[2]] += t.w[2] * go[o];
          gs[t.idx[3]] += t.w[3] * go[o];
        }
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape os = parts[0].shape();
  if (axis >= os.size())
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of rank " +
                     std::to_string(os.size()));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != os.size())
      throw ShapeError("concat: rank mismatch " + shape_str(os) + " vs " +
                       shape_str(ps));
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (i != axis && ps[i] != os[i])
        throw ShapeError("concat: shapes " + shape_str(os) + " vs " +
                         shape_str(ps) + " differ off-axis");
    total += ps[axis];
  }
  os[axis] = total;
  Tensor out = Tensor::zeros(os);
  auto lo = axis_layout(os, axis);
  double* po = out.data();
  std::size_t offset = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    auto lp = axis_layout(p.shape(), axis);
    const double* pp = p.data();
    for (std::size_t o = 0; o < lp.outer; ++o)
      std::memcpy(po + (o * lo.axis + offset) * lo.inner,
                  pp + o * lp.axis * lp.inner,
                  lp.axis * lp.inner * sizeof(double));
    offset += lp.axis;
    rg = rg || p.requires_grad();
  }
  out.set_requires_grad(rg);
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [parts, out, lo, axis]() {
      const double* g = out.node()->grad.data();
      std::size_t offset = 0;
      for (const Tensor& p : parts) {
        auto lp = axis_layout(p.shape(), axis);
        if (p.requires_grad()) {
          p.node()->ensure_grad();
          double* gp = p.node()->grad.data();
          for (std::size_t o = 0; o < lp.outer; ++o) {
            const double* src = g + (o * lo.axis + offset) * lo.inner;
            double* dst = gp + o * lp.axis * lp.inner;
            for (std::size_t i = 0; i < lp.axis * lp.inner; ++i)
              dst[i] += src[i];
          }
        }
        offset += lp.axis;
      }
    });
  }
  return out;
}

// ---- softmax / layer norm ----------------------------------------------

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " out of rank " + std::to_string(a.rank()));
  auto l = axis_layout(a.shape(), axis);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      std::size_t base = o * l.axis * l.inner + i;
      double mx = -1e308;
      for (std::size_t k = 0; k < l.axis; ++k)
        mx = std::max(mx, pa[base + k * l.inner]);
      double sum = 0;
      for (std::size_t k = 0; k < l.axis; ++k) {
        double e = std::exp(pa[base + k * l.inner] - mx);
        po[base + k * l.inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < l.axis; ++k) po[base + k * l.inner] /= sum;
    }
  check_finite("softmax", out);
  out.set_requires_grad(a.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, out, l]() {
      a.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      const double* y = out.data();
      double* ga = a.node()->grad.data();
      for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t i = 0; i < l.inner; ++i) {
          std::size_t base = o * l.axis * l.inner + i;
          double dot = 0;
          for (std::size_t k = 0; k < l.axis; ++k)
            dot += g[base + k * l.inner] * y[base + k * l.inner];
          for (std::size_t k = 0; k < l.axis; ++k) {
            std::size_t idx = base + k * l.inner;
            ga[idx] += (g[idx] - dot) * y[idx];
          }
        }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.rank() == 0)
    throw ShapeError("layer_norm: tensor " + shape_str(x.shape()) +
                     " has no axis to normalize");
  std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) +
                     " vs last axis of " + shape_str(x.shape()));
  std::size_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(rows), mean(rows);
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double m = 0;
    for (std::size_t j = 0; j < d; ++j) m += row[j];
    m /= d;
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    mean[r] = m;
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j)
      po[r * d + j] = (row[j] - m) * is * pg[j] + pb[j];
  }
  check_finite("layer_norm", out);
  out.set_requires_grad(x.requires_grad() || gain.requires_grad() ||
                        bias.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [x, gain, bias, out, d, rows, mean, inv_std]() {
      const double* g = out.node()->grad.data();
      const double* px = x.data();
      const double* pg = gain.data();
      double* gx = nullptr;
      double* gg = nullptr;
      double* gb = nullptr;
      if (x.requires_grad()) {
        x.node()->ensure_grad();
        gx = x.node()->grad.data();
      }
      if (gain.requires_grad()) {
        gain.node()->ensure_grad();
        gg = gain.node()->grad.data();
      }
      if (bias.requires_grad()) {
        bias.node()->ensure_grad();
        gb = bias.node()->grad.data();
      }
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        const double* grow = g + r * d;
        double m = mean[r], is = inv_std[r];
        // dxhat = g * gain; dx = is * (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
        double s1 = 0, s2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
          double xhat = (row[j] - m) * is;
          double dxhat = grow[j] * pg[j];
          s1 += dxhat;
          s2 += dxhat * xhat;
          if (gg) gg[j] += grow[j] * xhat;
          if (gb) gb[j] += grow[j];
        }
        if (gx) {
          s1 /= d;
          s2 /= d;
          for (std::size_t j = 0; j < d; ++j) {
            double xhat = (row[j] - m) * is;
            double dxhat = grow[j] * pg[j];
            gx[r * d + j] += is * (dxhat - s1 - xhat * s2);
          }
        }
      }
    });
  }
  return out;
}

// ---- reductions ----------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  double s = 0;
  for (double v : a.value()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite("sum_all", out);
  out.set_requires_grad(a.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, out]() {
      a.node()->ensure_grad();
      double g = out.node()->grad[0];
      double* ga = a.node()->grad.data();
      std::size_t n = a.numel();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank())
    throw ShapeError("sum_axis: axis " + std::to_string(axis) +
                     " out of rank " + std::to_string(a.rank()));
  auto l = axis_layout(a.shape(), axis);
  Shape os;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) os.push_back(a.shape()[i]);
  Tensor out = Tensor::zeros(os);
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t k = 0; k < l.axis; ++k)
      for (std::size_t i = 0; i < l.inner; ++i)
        po[o * l.inner + i] += pa[(o * l.axis + k) * l.inner + i];
  check_finite("sum_axis", out);
  out.set_requires_grad(a.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, out, l]() {
      a.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      double* ga = a.node()->grad.data();
      for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t k = 0; k < l.axis; ++k)
          for (std::size_t i = 0; i < l.inner; ++i)
            ga[(o * l.axis + k) * l.inner + i] += g[o * l.inner + i];
    });
  }
  return out;
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  return mul_scalar(sum_axis(a, axis),
                    1.0 / static_cast<double>(a.shape()[axis]));
}

// ---- conv / upsample ------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride, std::size_t pad) {
  if (x.rank() != 3 || w.rank() != 4 || x.shape()[0] != w.shape()[1])
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()) + " do not conform");
  std::size_t cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  std::size_t cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (bias.defined() && bias.numel() != cout)
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " vs weight " + shape_str(w.shape()));
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                     " larger than padded input " + shape_str(x.shape()));
  std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  std::size_t ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor out = Tensor::zeros({cout, oh, ow});
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (std::size_t co = 0; co < cout; ++co) {
    double b = bias.defined() ? bias.data()[co] : 0.0;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = b;
        std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * stride) -
                             static_cast<std::ptrdiff_t>(pad);
        std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * stride) -
                             static_cast<std::ptrdiff_t>(pad);
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky) {
            std::ptrdiff_t iy = iy0 + static_cast<std::ptrdiff_t>(ky);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              std::ptrdiff_t ix = ix0 + static_cast<std::ptrdiff_t>(kx);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              acc += px[(ci * h + iy) * wd + ix] *
                     pw[((co * cin + ci) * kh + ky) * kw + kx];
            }
          }
        po[(co * oh + oy) * ow + ox] = acc;
      }
  }
  check_finite("conv2d", out);
  out.set_requires_grad(x.requires_grad() || w.requires_grad() ||
                        (bias.defined() && bias.requires_grad()));
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [x, w, bias, out, stride, pad, cin, h, wd, cout, kh,
                           kw, oh, ow]() {
      const double* g = out.node()->grad.data();
      const double* px = x.data();
      const double* pw = w.data();
      double* gx = nullptr;
      double* gw = nullptr;
      double* gb = nullptr;
      if (x.requires_grad()) {
        x.node()->ensure_grad();
        gx = x.node()->grad.data();
      }
      if (w.requires_grad()) {
        w.node()->ensure_grad();
        gw = w.node()->grad.data();
      }
      if (bias.defined() && bias.requires_grad()) {
        bias.node()->ensure_grad();
        gb = bias.node()->grad.data();
      }
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            double gv = g[(co * oh + oy) * ow + ox];
            if (gv == 0.0) continue;
            if (gb) gb[co] += gv;
            std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * stride) -
                                 static_cast<std::ptrdiff_t>(pad);
            std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * stride) -
                                 static_cast<std::ptrdiff_t>(pad);
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t ky = 0; ky < kh; ++ky) {
                std::ptrdiff_t iy = iy0 + static_cast<std::ptrdiff_t>(ky);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  std::ptrdiff_t ix = ix0 + static_cast<std::ptrdiff_t>(kx);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd))
                    continue;
                  std::size_t xi = (ci * h + iy) * wd + ix;
                  std::size_t wi = ((co * cin + ci) * kh + ky) * kw + kx;
                  if (gx) gx[xi] += gv * pw[wi];
                  if (gw) gw[wi] += gv * px[xi];
                }
              }
          }
    });
  }
  return out;
}

Tensor upsample2x_nearest(const Tensor& x) {
  if (x.rank() != 3)
    throw ShapeError("upsample2x_nearest: tensor " + shape_str(x.shape()) +
                     " is not [C,H,W]");
  std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  Tensor out = Tensor::zeros({c, 2 * h, 2 * w});
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        po[(ci * 2 * h + y) * 2 * w + xx] =
            px[(ci * h + y / 2) * w + xx / 2];
  out.set_requires_grad(x.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [x, out, c, h, w]() {
      x.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      double* ga = x.node()->grad.data();
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < 2 * h; ++y)
          for (std::size_t xx = 0; xx < 2 * w; ++xx)
            ga[(ci * h + y / 2) * w + xx / 2] +=
                g[(ci * 2 * h + y) * 2 * w + xx];
    });
  }
  return out;
}

// ---- lookup / mask / losses ------------------------------------------------

Tensor embedding_lookup(const Tensor& table,
                        const std::vector<std::size_t>& ids) {
  if (table.rank() != 2)
    throw ShapeError("embedding_lookup: table " + shape_str(table.shape()) +
                     " is not 2-D");
  std::size_t v = table.shape()[0], d = table.shape()[1];
  for (std::size_t id : ids)
    if (id >= v)
      throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                       " out of table " + shape_str(table.shape()));
  Tensor out = Tensor::zeros({ids.size(), d});
  const double* pt = table.data();
  double* po = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::memcpy(po + i * d, pt + ids[i] * d, d * sizeof(double));
  out.set_requires_grad(table.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [table, out, ids, d]() {
      table.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      double* gt = table.node()->grad.data();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
    });
  }
  return out;
}

Tensor masked_fill(const Tensor& a, const std::vector<std::uint8_t>& mask,
                   double v) {
  if (mask.size() != a.numel())
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) +
                     " elements vs tensor " + shape_str(a.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = mask[i] ? v : pa[i];
  check_finite("masked_fill", out);
  out.set_requires_grad(a.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [a, out, mask]() {
      a.node()->ensure_grad();
      const double* g = out.node()->grad.data();
      double* ga = a.node()->grad.data();
      std::size_t n = a.numel();
      for (std::size_t i = 0; i < n; ++i)
        if (!mask[i]) ga[i] += g[i];
    });
  }
  return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  binary_shape_check("bce_with_logits", logits, targets, false);
  Tensor out = Tensor::zeros(logits.shape());
  const double* pz = logits.data();
  const double* pt = targets.data();
  double* po = out.data();
  std::size_t n = logits.numel();
  for (std::size_t i = 0; i < n; ++i) {
    double z = pz[i];
    po[i] = std::max(z, 0.0) - z * pt[i] + std::log1p(std::exp(-std::abs(z)));
  }
  check_finite("bce_with_logits", out);
  out.set_requires_grad(logits.requires_grad() || targets.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [logits, targets, out]() {
      const double* g = out.node()->grad.data();
      const double* pz = logits.data();
      const double* pt = targets.data();
      std::size_t n = logits.numel();
      if (logits.requires_grad()) {
        logits.node()->ensure_grad();
        double* gz = logits.node()->grad.data();
        for (std::size_t i = 0; i < n; ++i) {
          double z = pz[i];
          double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                            : std::exp(z) / (1.0 + std::exp(z));
          gz[i] += g[i] * (s - pt[i]);
        }
      }
      if (targets.requires_grad()) {
        targets.node()->ensure_grad();
        double* gt = targets.node()->grad.data();
        for (std::size_t i = 0; i < n; ++i) gt[i] += g[i] * (-pz[i]);
      }
    });
  }
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits,
                          const std::vector<std::size_t>& target,
                          const std::vector<double>& class_weight) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy_rows: logits " +
                     shape_str(logits.shape()) + " are not 2-D");
  std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (target.size() != n)
    throw ShapeError("cross_entropy_rows: " + std::to_string(target.size()) +
                     " targets vs logits " + shape_str(logits.shape()));
  if (class_weight.size() != c)
    throw ShapeError("cross_entropy_rows: " +
                     std::to_string(class_weight.size()) +
                     " class weights vs logits " + shape_str(logits.shape()));
  const double* pz = logits.data();
  double total = 0;
  std::vector<double> lse(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = pz + i * c;
    if (target[i] >= c)
      throw ShapeError("cross_entropy_rows: target " +
                       std::to_string(target[i]) + " out of " +
                       std::to_string(c) + " classes");
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    lse[i] = mx + std::log(s);
    total += class_weight[target[i]] * (lse[i] - row[target[i]]);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  check_finite("cross_entropy_rows", out);
  out.set_requires_grad(logits.requires_grad());
  if (want_tape(out)) {
    active_tape()->record(out.node_ptr(), [logits, out, target, class_weight, lse, n, c]() {
      logits.node()->ensure_grad();
      double g = out.node()->grad[0];
      const double* pz = logits.data();
      double* gz = logits.node()->grad.data();
      for (std::size_t i = 0; i < n; ++i) {
        double wi = class_weight[target[i]] / static_cast<double>(n);
        const double* row = pz + i * c;
        for (std::size_t j = 0; j < c; ++j) {
          double p = std::exp(row[j] - lse[i]);
          double onehot = j == target[i] ? 1.0 : 0.0;
          gz[i * c + j] += g * wi * (p - onehot);
        }
      }
    });
  }
  return out;
}

// ---- gradient checking -----------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h, std::size_t max_elements,
                  std::uint64_t sample_seed) {
  if (h <= 0) throw std::invalid_argument("grad_check: step must be positive");
  Tensor xt = x;
  bool prev_rg = xt.requires_grad();
  xt.set_requires_grad(true);
  xt.zero_grad();

  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(xt);
    if (!y.defined() || y.numel() != 1)
      throw ShapeError("grad_check: function output is not scalar");
    tape.backward(y);
    auto g = xt.grad();
    analytic.assign(g.begin(), g.end());
  }

  std::vector<std::size_t> idx;
  std::size_t n = xt.numel();
  if (max_elements == 0 || max_elements >= n) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  } else {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    Rng rng(hash_combine(sample_seed, "grad_check"));
    rng.shuffle(all);
    idx.assign(all.begin(), all.begin() + max_elements);
  }

  double max_err = 0;
  NoTapeScope fd_scope;
  double* px = xt.data();
  for (std::size_t i : idx) {
    double orig = px[i];
    px[i] = orig + h;
    double fp = f(xt).item();
    px[i] = orig - h;
    double fm = f(xt).item();
    px[i] = orig;
    double fd = (fp - fm) / (2 * h);
    double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    max_err = std::max(max_err, err);
  }
  xt.set_requires_grad(prev_rg);
  xt.zero_grad();
  return max_err;
}

}  // namespace apex::ad
