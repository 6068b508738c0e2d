#include "charmt/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace charmt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpId op) {
  switch (op) {
    case OpId::kLeaf: return "leaf";
    case OpId::kAdd: return "add";
    case OpId::kMul: return "mul";
    case OpId::kScale: return "scale";
    case OpId::kRelu: return "relu";
    case OpId::kMatMul: return "matmul";
    case OpId::kSoftmax: return "softmax_lastdim";
    case OpId::kLayerNorm: return "layer_norm";
    case OpId::kConv1d: return "conv1d_same";
    case OpId::kConcat: return "concat_lastdim";
    case OpId::kEmbedding: return "embedding";
    case OpId::kSplitHeads: return "split_heads";
    case OpId::kMergeHeads: return "merge_heads";
    case OpId::kDropout: return "dropout";
    case OpId::kMaskPositions: return "mask_positions";
    case OpId::kSum: return "sum";
    case OpId::kMean: return "mean";
    case OpId::kCrossEntropy: return "masked_cross_entropy";
  }
  return "unknown";
}

NonFiniteError::NonFiniteError(OpId op, std::size_t index)
    : std::runtime_error(std::string("non-finite value produced by ") + op_name(op) +
                         " at flat index " + std::to_string(index)),
      op_(op) {}

namespace {
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

std::size_t Tensor::dim(int i) const {
  const int r = static_cast<int>(rank());
  const int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) throw ShapeError("dim index out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(k)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[d]) throw ShapeError("at(): index out of range");
    flat = flat * impl_->shape[d] + i;
    ++d;
  }
  return impl_->data[flat];
}

Tensor Tensor::detach() const { return from_data(shape(), impl_->data, false); }

Tensor Tensor::clone() const { return from_data(shape(), impl_->data, impl_->requires_grad); }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss");
  }
  // Iterative post-order DFS gives a topological order of the tape.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* tape = node->node.get();
    if (tape && next < tape->inputs.size()) {
      TensorImpl* child = tape->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  auto& seed = loss.impl()->ensure_grad();
  seed[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->node || t->grad.empty()) continue;
    for (const auto& in : t->node->inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    t->node->backward(*t, t->node->inputs);
  }
}

namespace detail {

void check_finite(OpId op, std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw NonFiniteError(op, i);
  }
}

namespace {
template <typename Range>
Tensor make_result_impl(OpId op, Shape shape, std::vector<double> data, const Range& inputs,
                        TapeNode::BackwardFn backward) {
  check_finite(op, data);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    impl->requires_grad = true;
    auto node = std::make_shared<TapeNode>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const Tensor* t : inputs) node->inputs.push_back(t->impl());
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}
}  // namespace

Tensor make_result(OpId op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs, TapeNode::BackwardFn backward) {
  return make_result_impl(op, std::move(shape), std::move(data), inputs, std::move(backward));
}

Tensor make_result(OpId op, Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                   TapeNode::BackwardFn backward) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(inputs.size());
  for (const Tensor& t : inputs) ptrs.push_back(&t);
  return make_result_impl(op, std::move(shape), std::move(data), ptrs, std::move(backward));
}

}  // namespace detail

}  // namespace charmt
