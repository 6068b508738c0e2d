#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace charmt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Operation tags recorded on the tape; used for diagnostics.
enum class OpId {
  kLeaf,
  kAdd,
  kMul,
  kScale,
  kRelu,
  kMatMul,
  kSoftmax,
  kLayerNorm,
  kConv1d,
  kConcat,
  kEmbedding,
  kSplitHeads,
  kMergeHeads,
  kDropout,
  kMaskPositions,
  kSum,
  kMean,
  kCrossEntropy,
};

const char* op_name(OpId op);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN or Inf. The message names the op.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(OpId op, std::size_t index);
  OpId op() const { return op_; }

 private:
  OpId op_;
};

struct TensorImpl;

struct TapeNode {
  using BackwardFn =
      std::function<void(TensorImpl& out, std::span<const std::shared_ptr<TensorImpl>> inputs)>;

  OpId op = OpId::kLeaf;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Empty when no gradient has been accumulated yet.
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

/// Shared handle to a dense row-major float64 array with optional gradient.
/// Copies alias the same storage; use clone() or detach() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  /// Extent of dimension i; negative i counts from the back.
  std::size_t dim(int i) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access, meant for leaves (parameters, inputs).
  std::span<double> mutable_data() { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  /// Deep copy without graph history.
  Tensor detach() const;
  /// Deep copy keeping requires_grad (but not the tape).
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Reverse-mode pass from a scalar. Gradients accumulate (+=) into every
/// reachable tensor that requires grad; call zero_grad between steps.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

void check_finite(OpId op, std::span<const double> values);

/// Wraps a freshly computed output, attaching a tape node when any input
/// requires grad and recording is enabled. Checks finiteness.
Tensor make_result(OpId op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs, TapeNode::BackwardFn backward);
Tensor make_result(OpId op, Shape shape, std::vector<double> data,
                   std::span<const Tensor> inputs, TapeNode::BackwardFn backward);

}  // namespace detail

}  // namespace charmt
