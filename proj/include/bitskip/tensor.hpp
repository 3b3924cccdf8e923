#pragma once

// Dense tensors with a reverse-mode gradient tape.
//
// A tensor is stored as a row-major matrix whose column count is the last
// dimension and whose row count is the product of the leading dimensions.
// Every primitive reads and writes that matrix view; higher-rank shapes only
// matter for bookkeeping.
//
// Operations are recorded on the innermost live GradientTape of the calling
// thread whenever at least one input requires a gradient. Without a tape (or
// under NoGradGuard) operations only compute values.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bitskip/errors.hpp"

namespace bitskip {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

template <typename Scalar>
class GradientTape;

namespace detail {

template <typename Scalar>
struct TensorNode {
  Shape shape;
  RowMatrix<Scalar> value;
  RowMatrix<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const void* producer = nullptr;  // tape that created this node, if any
};

}  // namespace detail

template <typename Scalar>
class BasicTensor {
 public:
  using Matrix = RowMatrix<Scalar>;
  using Node = detail::TensorNode<Scalar>;

  BasicTensor() = default;

  // Zero-filled tensor.
  explicit BasicTensor(Shape shape, bool requires_grad = false);

  // 2-D tensor taking ownership of `value`.
  static BasicTensor from_matrix(Matrix value, bool requires_grad = false);
  static BasicTensor from_values(Shape shape, std::span<const Scalar> values,
                                 bool requires_grad = false);
  static BasicTensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index numel() const { return node_->value.size(); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }

  const Matrix& value() const { return node_->value; }
  // Direct write access for parameter updates; never use on a tensor that
  // participates in a live tape.
  Matrix& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix& grad() const { return node_->grad; }
  // Gradient buffer, allocated as zeros on first access.
  Matrix& mutable_grad();
  void zero_grad();

  Scalar item() const;

  // A tensor with the same values and no autodiff history.
  BasicTensor detached() const;

  bool same_storage(const BasicTensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  template <typename S>
  friend BasicTensor<S> make_tensor(Shape shape, RowMatrix<S> value);

  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

// Wraps a value matrix into a fresh tensor with the given logical shape.
template <typename Scalar>
BasicTensor<Scalar> make_tensor(Shape shape, RowMatrix<Scalar> value);

template <typename Scalar>
class GradientTape {
 public:
  using Matrix = RowMatrix<Scalar>;
  using BackwardFn = std::function<void(const Matrix& grad_out)>;

  GradientTape();
  ~GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Seeds d loss/d loss = 1 and runs the recorded operations in reverse,
  // accumulating into every tensor that requires a gradient. A tape can be
  // consumed once.
  void backward(const BasicTensor<Scalar>& loss);

  void record(const char* op, const BasicTensor<Scalar>& output, BackwardFn fn);

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }
  std::vector<std::string> op_names() const;

  static GradientTape* active();

 private:
  struct Entry {
    const char* op;
    std::shared_ptr<detail::TensorNode<Scalar>> output;
    BackwardFn backward;
  };

  std::vector<Entry> entries_;
  bool consumed_ = false;
  GradientTape* previous_ = nullptr;

  static thread_local GradientTape* active_;
  template <typename S>
  friend class NoGradGuard;
};

// Suspends recording for the current thread inside its scope.
template <typename Scalar>
class NoGradGuard {
 public:
  NoGradGuard() : saved_(GradientTape<Scalar>::active_) { GradientTape<Scalar>::active_ = nullptr; }
  ~NoGradGuard() { GradientTape<Scalar>::active_ = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  GradientTape<Scalar>* saved_;
};

template <typename Scalar>
thread_local GradientTape<Scalar>* GradientTape<Scalar>::active_ = nullptr;

// Building block for differentiable primitives defined outside this header.
// When a tape is live and any input requires a gradient, the output is marked
// as requiring one and `fn` is recorded; otherwise `fn` is dropped.
template <typename Scalar>
BasicTensor<Scalar> record_op(const char* op, Shape shape, RowMatrix<Scalar> value,
                              std::initializer_list<const BasicTensor<Scalar>*> inputs,
                              typename GradientTape<Scalar>::BackwardFn fn);

// Adds `delta` into `t`'s gradient if it requires one.
template <typename Scalar, typename Derived>
void accumulate_grad(const BasicTensor<Scalar>& t, const Eigen::MatrixBase<Derived>& delta) {
  if (!t.requires_grad()) return;
  auto& node = *t.node();
  if (node.grad.size() == 0) {
    node.grad = delta;
  } else {
    node.grad += delta;
  }
}

template <typename Scalar>
bool all_finite(const BasicTensor<Scalar>& t) {
  return t.value().allFinite();
}

// ---- primitives -----------------------------------------------------------

// a[m×k] · b[k×n]
template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);

// a[m×k] · b[n×k]ᵀ, the layout used by every linear layer.
template <typename Scalar>
BasicTensor<Scalar> matmul_nt(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);

enum class ElementwiseOp { add, mul, silu, scale };

// Identical shapes, or one side holding a single element (scalar broadcast).
template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);
template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);
template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& a, Scalar factor);
template <typename Scalar>
BasicTensor<Scalar> silu(const BasicTensor<Scalar>& a);

// Dispatching form: add/mul take two operands, silu one, scale one plus factor.
template <typename Scalar>
BasicTensor<Scalar> elementwise(ElementwiseOp op, std::span<const BasicTensor<Scalar>> args,
                                Scalar factor = Scalar(1));

template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& a);

template <typename Scalar>
BasicTensor<Scalar> reshape(const BasicTensor<Scalar>& a, Shape shape);

template <typename Scalar>
BasicTensor<Scalar> softmax_rows(const BasicTensor<Scalar>& x);

// x / sqrt(mean(x²) + eps) · gain along the last dimension.
template <typename Scalar>
BasicTensor<Scalar> rmsnorm(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& gain,
                            Scalar eps);

// Row gather: out[i] = table[ids[i]].
template <typename Scalar>
BasicTensor<Scalar> embedding(const BasicTensor<Scalar>& table, std::span<const std::int32_t> ids);

// Mean token cross-entropy in nats. Rows whose target equals `ignore_id` are
// excluded from the mean; throws if nothing remains.
template <typename Scalar>
BasicTensor<Scalar> cross_entropy(const BasicTensor<Scalar>& logits,
                                  std::span<const std::int32_t> targets,
                                  std::int32_t ignore_id = -1);

// Rotary position embedding over `heads` contiguous column groups, rotating
// the pairs (i, i + head_dim/2). positions[r] is the position of row r.
template <typename Scalar>
BasicTensor<Scalar> rope(const BasicTensor<Scalar>& x, Index heads,
                         std::span<const Index> positions, double base = 10000.0);

// Causal grouped-query attention. Rows are laid out batch-major
// (row = b·seq + t); q has heads·hd columns, k and v kv_heads·hd columns, and
// query head h reads kv head h / (heads / kv_heads).
template <typename Scalar>
BasicTensor<Scalar> causal_attention(const BasicTensor<Scalar>& q, const BasicTensor<Scalar>& k,
                                     const BasicTensor<Scalar>& v, Index batch, Index seq,
                                     Index heads, Index kv_heads);

template <typename Scalar>
BasicTensor<Scalar> operator+(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return add(a, b);
}

}  // namespace bitskip
