#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace apex::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);

// Thrown when operand shapes do not conform to an op's rule. The message
// names the op and both shapes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a forward op produces NaN/Inf from finite inputs, or when a
// loss term goes non-finite. Non-finite values are an error state here,
// never data.
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first use, same length as value
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Dense row-major float64 tensor handle. Copies share storage; the struct is
// a cheap reference like the usual define-by-run frameworks.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> v,
                            bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::span<double> value() { return node_->value; }
  std::span<const double> value() const { return node_->value; }

  // Gradient buffer; allocates (zeroed) on first access.
  std::span<double> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad() {
    if (node_ && !node_->grad.empty())
      node_->grad.assign(node_->value.size(), 0.0);
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  double item() const;

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;
};

// Execution tape for reverse-mode differentiation. Rebuilt every forward
// pass; backward replays the recorded steps in exact reverse order.
class Tape {
 public:
  // `out` is the step's output node; backward skips steps whose output never
  // received a gradient, so dangling graph branches cost nothing.
  void record(std::shared_ptr<TensorNode> out, std::function<void()> step) {
    steps_.emplace_back(std::move(out), std::move(step));
  }
  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded step in reverse.
  // Gradients accumulate into each participating tensor's grad buffer.
  void backward(const Tensor& loss);

 private:
  std::vector<std::pair<std::shared_ptr<TensorNode>, std::function<void()>>>
      steps_;
};

// Per-thread active tape. Ops record onto it when set and when the result
// requires grad; without an active tape ops run forward-only.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Suspends recording (forward-only) for the scope's lifetime.
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* prev_;
};

}  // namespace apex::ad
