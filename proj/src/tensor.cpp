#include "bitskip/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace bitskip {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
}

Index leading_rows(const Shape& shape) { return shape_numel(shape) / shape.back(); }

template <typename Scalar>
void require_same_shape(const char* op, const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename Scalar>
void require_rank2(const char* op, const BasicTensor<Scalar>& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

}  // namespace

// ---- BasicTensor ----------------------------------------------------------

template <typename Scalar>
BasicTensor<Scalar>::BasicTensor(Shape shape, bool requires_grad) {
  check_shape(shape);
  node_ = std::make_shared<Node>();
  node_->value = Matrix::Zero(leading_rows(shape), shape.back());
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
BasicTensor<Scalar> make_tensor(Shape shape, RowMatrix<Scalar> value) {
  check_shape(shape);
  if (value.rows() != leading_rows(shape) || value.cols() != shape.back()) {
    throw DimensionError("value matrix does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<detail::TensorNode<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return BasicTensor<Scalar>(std::move(node));
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::from_matrix(Matrix value, bool requires_grad) {
  Shape shape{value.rows(), value.cols()};
  auto t = make_tensor<Scalar>(std::move(shape), std::move(value));
  t.set_requires_grad(requires_grad);
  return t;
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::from_values(Shape shape, std::span<const Scalar> values,
                                                     bool requires_grad) {
  check_shape(shape);
  if (static_cast<Index>(values.size()) != shape_numel(shape)) {
    throw DimensionError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_string(shape));
  }
  Matrix m(leading_rows(shape), shape.back());
  std::copy(values.begin(), values.end(), m.data());
  auto t = make_tensor<Scalar>(std::move(shape), std::move(m));
  t.set_requires_grad(requires_grad);
  return t;
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = value;
  auto t = make_tensor<Scalar>(Shape{1}, std::move(m));
  t.set_requires_grad(requires_grad);
  return t;
}

template <typename Scalar>
typename BasicTensor<Scalar>::Matrix& BasicTensor<Scalar>::mutable_grad() {
  if (node_->grad.size() == 0) node_->grad = Matrix::Zero(rows(), cols());
  return node_->grad;
}

template <typename Scalar>
void BasicTensor<Scalar>::zero_grad() {
  if (has_grad()) node_->grad.setZero();
}

template <typename Scalar>
Scalar BasicTensor<Scalar>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->value(0, 0);
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::detached() const {
  return make_tensor<Scalar>(shape(), value());
}

// ---- GradientTape ---------------------------------------------------------

template <typename Scalar>
GradientTape<Scalar>::GradientTape() : previous_(active_) {
  active_ = this;
}

template <typename Scalar>
GradientTape<Scalar>::~GradientTape() {
  // Tapes nest strictly; restore whatever was live before this one.
  if (active_ == this) active_ = previous_;
}

template <typename Scalar>
GradientTape<Scalar>* GradientTape<Scalar>::active() {
  return active_;
}

template <typename Scalar>
void GradientTape<Scalar>::record(const char* op, const BasicTensor<Scalar>& output, BackwardFn fn) {
  if (consumed_) throw GraphError("cannot record onto a consumed tape");
  output.node()->producer = this;
  entries_.push_back(Entry{op, output.node(), std::move(fn)});
}

template <typename Scalar>
std::vector<std::string> GradientTape<Scalar>::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.emplace_back(e.op);
  return names;
}

template <typename Scalar>
void GradientTape<Scalar>::backward(const BasicTensor<Scalar>& loss) {
  if (consumed_) throw GraphError("backward called twice on the same tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw GraphError("backward requires a scalar loss");
  }
  if (loss.node()->producer != this) {
    throw GraphError("loss was not produced on this tape");
  }
  consumed_ = true;
  auto& seed = loss.node()->grad;
  if (seed.size() == 0) seed = RowMatrix<Scalar>::Zero(1, 1);
  seed(0, 0) += Scalar(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& out = *it->output;
    if (out.grad.size() == 0) continue;
    it->backward(out.grad);
  }
  // Release intermediate buffers; parameters keep their gradients.
  entries_.clear();
}

template <typename Scalar>
BasicTensor<Scalar> record_op(const char* op, Shape shape, RowMatrix<Scalar> value,
                              std::initializer_list<const BasicTensor<Scalar>*> inputs,
                              typename GradientTape<Scalar>::BackwardFn fn) {
#ifndef NDEBUG
  if (!value.allFinite()) throw NumericError(std::string(op) + ": non-finite output");
#endif
  auto out = make_tensor<Scalar>(std::move(shape), std::move(value));
  auto* tape = GradientTape<Scalar>::active();
  if (tape == nullptr) return out;
  bool needs = false;
  for (const auto* in : inputs) needs = needs || in->requires_grad();
  if (!needs) return out;
  out.set_requires_grad(true);
  tape->record(op, out, std::move(fn));
  return out;
}

// ---- primitives -----------------------------------------------------------

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  RowMatrix<Scalar> y = a.value() * b.value();
  Shape shape{a.rows(), b.cols()};
  return record_op<Scalar>("matmul", std::move(shape), std::move(y), {&a, &b},
                           [a, b](const RowMatrix<Scalar>& g) {
                             if (a.requires_grad()) accumulate_grad(a, g * b.value().transpose());
                             if (b.requires_grad()) accumulate_grad(b, a.value().transpose() * g);
                           });
}

template <typename Scalar>
BasicTensor<Scalar> matmul_nt(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  require_rank2("matmul_nt", a);
  require_rank2("matmul_nt", b);
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  RowMatrix<Scalar> y = a.value() * b.value().transpose();
  Shape shape{a.rows(), b.rows()};
  return record_op<Scalar>("matmul", std::move(shape), std::move(y), {&a, &b},
                           [a, b](const RowMatrix<Scalar>& g) {
                             if (a.requires_grad()) accumulate_grad(a, g * b.value());
                             if (b.requires_grad()) accumulate_grad(b, g.transpose() * a.value());
                           });
}

namespace {

enum class Broadcast { none, left_scalar, right_scalar };

template <typename Scalar>
Broadcast broadcast_kind(const char* op, const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.numel() == 1) return Broadcast::right_scalar;
  if (a.numel() == 1) return Broadcast::left_scalar;
  require_same_shape(op, a, b);
  return Broadcast::none;
}

}  // namespace

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  const auto kind = broadcast_kind("add", a, b);
  RowMatrix<Scalar> y;
  Shape shape;
  switch (kind) {
    case Broadcast::none:
      y = a.value() + b.value();
      shape = a.shape();
      break;
    case Broadcast::right_scalar:
      y = a.value().array() + b.item();
      shape = a.shape();
      break;
    case Broadcast::left_scalar:
      y = b.value().array() + a.item();
      shape = b.shape();
      break;
  }
  return record_op<Scalar>("add", std::move(shape), std::move(y), {&a, &b},
                           [a, b, kind](const RowMatrix<Scalar>& g) {
                             const RowMatrix<Scalar> total = RowMatrix<Scalar>::Constant(1, 1, g.sum());
                             if (a.requires_grad()) {
                               if (kind == Broadcast::left_scalar) accumulate_grad(a, total);
                               else accumulate_grad(a, g);
                             }
                             if (b.requires_grad()) {
                               if (kind == Broadcast::right_scalar) accumulate_grad(b, total);
                               else accumulate_grad(b, g);
                             }
                           });
}

template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  const auto kind = broadcast_kind("mul", a, b);
  RowMatrix<Scalar> y;
  Shape shape;
  switch (kind) {
    case Broadcast::none:
      y = a.value().cwiseProduct(b.value());
      shape = a.shape();
      break;
    case Broadcast::right_scalar:
      y = a.value() * b.item();
      shape = a.shape();
      break;
    case Broadcast::left_scalar:
      y = b.value() * a.item();
      shape = b.shape();
      break;
  }
  return record_op<Scalar>(
      "mul", std::move(shape), std::move(y), {&a, &b}, [a, b, kind](const RowMatrix<Scalar>& g) {
        switch (kind) {
          case Broadcast::none:
            if (a.requires_grad()) accumulate_grad(a, g.cwiseProduct(b.value()));
            if (b.requires_grad()) accumulate_grad(b, g.cwiseProduct(a.value()));
            break;
          case Broadcast::right_scalar:
            if (a.requires_grad()) accumulate_grad(a, g * b.item());
            if (b.requires_grad()) {
              accumulate_grad(b, RowMatrix<Scalar>::Constant(1, 1, g.cwiseProduct(a.value()).sum()));
            }
            break;
          case Broadcast::left_scalar:
            if (b.requires_grad()) accumulate_grad(b, g * a.item());
            if (a.requires_grad()) {
              accumulate_grad(a, RowMatrix<Scalar>::Constant(1, 1, g.cwiseProduct(b.value()).sum()));
            }
            break;
        }
      });
}

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& a, Scalar factor) {
  RowMatrix<Scalar> y = a.value() * factor;
  return record_op<Scalar>("scale", a.shape(), std::move(y), {&a},
                           [a, factor](const RowMatrix<Scalar>& g) { accumulate_grad(a, g * factor); });
}

template <typename Scalar>
BasicTensor<Scalar> silu(const BasicTensor<Scalar>& a) {
  RowMatrix<Scalar> y = a.value().unaryExpr([](Scalar x) { return x * sigmoid(x); });
  return record_op<Scalar>("silu", a.shape(), std::move(y), {&a}, [a](const RowMatrix<Scalar>& g) {
    RowMatrix<Scalar> d = a.value().unaryExpr([](Scalar x) {
      const Scalar s = sigmoid(x);
      return s * (Scalar(1) + x * (Scalar(1) - s));
    });
    accumulate_grad(a, g.cwiseProduct(d));
  });
}

template <typename Scalar>
BasicTensor<Scalar> elementwise(ElementwiseOp op, std::span<const BasicTensor<Scalar>> args,
                                Scalar factor) {
  const std::size_t want = (op == ElementwiseOp::add || op == ElementwiseOp::mul) ? 2 : 1;
  if (args.size() != want) {
    throw DimensionError("elementwise: expected " + std::to_string(want) + " operands, got " +
                         std::to_string(args.size()));
  }
  switch (op) {
    case ElementwiseOp::add: return add(args[0], args[1]);
    case ElementwiseOp::mul: return mul(args[0], args[1]);
    case ElementwiseOp::silu: return silu(args[0]);
    case ElementwiseOp::scale: return scale(args[0], factor);
  }
  throw RangeError("elementwise: unknown op");
}

template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& a) {
  RowMatrix<Scalar> y(1, 1);
  y(0, 0) = a.value().sum();
  return record_op<Scalar>("sum", Shape{1}, std::move(y), {&a}, [a](const RowMatrix<Scalar>& g) {
    accumulate_grad(a, RowMatrix<Scalar>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

template <typename Scalar>
BasicTensor<Scalar> reshape(const BasicTensor<Scalar>& a, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  const Index rows = leading_rows(shape);
  const Index cols = shape.back();
  RowMatrix<Scalar> y = Eigen::Map<const RowMatrix<Scalar>>(a.value().data(), rows, cols);
  return record_op<Scalar>("reshape", std::move(shape), std::move(y), {&a},
                           [a](const RowMatrix<Scalar>& g) {
                             accumulate_grad(
                                 a, Eigen::Map<const RowMatrix<Scalar>>(g.data(), a.rows(), a.cols()));
                           });
}

template <typename Scalar>
BasicTensor<Scalar> softmax_rows(const BasicTensor<Scalar>& x) {
  RowMatrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r);
    const Scalar peak = row.maxCoeff();
    y.row(r) = (row.array() - peak).exp();
    y.row(r) /= y.row(r).sum();
  }
  auto out_value = y;
  return record_op<Scalar>("softmax", x.shape(), std::move(out_value), {&x},
                           [x, y = std::move(y)](const RowMatrix<Scalar>& g) {
                             RowMatrix<Scalar> gx = g.cwiseProduct(y);
                             const Vector<Scalar> dots = gx.rowwise().sum();
                             gx -= y.cwiseProduct(dots.replicate(1, y.cols()));
                             accumulate_grad(x, gx);
                           });
}

template <typename Scalar>
BasicTensor<Scalar> rmsnorm(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& gain, Scalar eps) {
  const Index d = x.cols();
  if (gain.numel() != d) {
    throw DimensionError("rmsnorm: gain of size " + std::to_string(gain.numel()) +
                         " for feature dimension " + std::to_string(d));
  }
  Vector<Scalar> inv_rms(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    inv_rms(r) = Scalar(1) / std::sqrt(x.value().row(r).squaredNorm() / Scalar(d) + eps);
  }
  RowMatrix<Scalar> normed = inv_rms.asDiagonal() * x.value();
  const auto gain_row = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gain.value().data(), d);
  RowMatrix<Scalar> y = normed.array().rowwise() * gain_row.array();
  return record_op<Scalar>(
      "rmsnorm", x.shape(), std::move(y), {&x, &gain},
      [x, gain, inv_rms = std::move(inv_rms), normed = std::move(normed)](const RowMatrix<Scalar>& g) {
        const Index d = x.cols();
        const auto gain_row =
            Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gain.value().data(), d);
        if (gain.requires_grad()) {
          Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dg = g.cwiseProduct(normed).colwise().sum();
          accumulate_grad(gain, Eigen::Map<const RowMatrix<Scalar>>(dg.data(), gain.rows(), gain.cols()));
        }
        if (x.requires_grad()) {
          RowMatrix<Scalar> dn = g.array().rowwise() * gain_row.array();
          const Vector<Scalar> proj = dn.cwiseProduct(normed).rowwise().sum() / Scalar(d);
          RowMatrix<Scalar> gx = dn - normed.cwiseProduct(proj.replicate(1, d));
          accumulate_grad(x, inv_rms.asDiagonal() * gx);
        }
      });
}

template <typename Scalar>
BasicTensor<Scalar> embedding(const BasicTensor<Scalar>& table, std::span<const std::int32_t> ids) {
  require_rank2("embedding", table);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  RowMatrix<Scalar> y(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw RangeError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(table.rows()) + " rows");
    }
    y.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  Shape shape{static_cast<Index>(ids.size()), table.cols()};
  return record_op<Scalar>("embedding", std::move(shape), std::move(y), {&table},
                           [table, saved = std::move(saved)](const RowMatrix<Scalar>& g) {
                             if (!table.requires_grad()) return;
                             auto t = table;
                             auto& grad = t.mutable_grad();
                             for (std::size_t i = 0; i < saved.size(); ++i) {
                               grad.row(saved[i]) += g.row(static_cast<Index>(i));
                             }
                           });
}

template <typename Scalar>
BasicTensor<Scalar> cross_entropy(const BasicTensor<Scalar>& logits,
                                  std::span<const std::int32_t> targets, std::int32_t ignore_id) {
  require_rank2("cross_entropy", logits);
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " rows");
  }
  const Index vocab = logits.cols();
  RowMatrix<Scalar> probs(logits.rows(), vocab);
  double total = 0.0;
  Index counted = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const std::int32_t t = targets[static_cast<std::size_t>(r)];
    const auto row = logits.value().row(r);
    const Scalar peak = row.maxCoeff();
    probs.row(r) = (row.array() - peak).exp();
    const Scalar z = probs.row(r).sum();
    probs.row(r) /= z;
    if (t == ignore_id) continue;
    if (t < 0 || t >= vocab) {
      throw RangeError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    }
    total += static_cast<double>(std::log(z) + peak - row(t));
    ++counted;
  }
  if (counted == 0) throw RangeError("cross_entropy: no target positions left after masking");
  RowMatrix<Scalar> y(1, 1);
  y(0, 0) = static_cast<Scalar>(total / static_cast<double>(counted));
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return record_op<Scalar>(
      "cross_entropy", Shape{1}, std::move(y), {&logits},
      [logits, probs = std::move(probs), saved = std::move(saved), counted, ignore_id](
          const RowMatrix<Scalar>& g) {
        const Scalar w = g(0, 0) / static_cast<Scalar>(counted);
        RowMatrix<Scalar> gx = probs * w;
        for (Index r = 0; r < gx.rows(); ++r) {
          const std::int32_t t = saved[static_cast<std::size_t>(r)];
          if (t == ignore_id) {
            gx.row(r).setZero();
          } else {
            gx(r, t) -= w;
          }
        }
        accumulate_grad(logits, gx);
      });
}

namespace {

// cos/sin tables, one row per position, head_dim/2 columns.
template <typename Scalar>
void rope_tables(std::span<const Index> positions, Index half, double base, RowMatrix<Scalar>& cos_t,
                 RowMatrix<Scalar>& sin_t) {
  const auto n = static_cast<Index>(positions.size());
  cos_t.resize(n, half);
  sin_t.resize(n, half);
  for (Index r = 0; r < n; ++r) {
    for (Index i = 0; i < half; ++i) {
      const double freq = std::pow(base, -static_cast<double>(2 * i) / static_cast<double>(2 * half));
      const double angle = static_cast<double>(positions[static_cast<std::size_t>(r)]) * freq;
      cos_t(r, i) = static_cast<Scalar>(std::cos(angle));
      sin_t(r, i) = static_cast<Scalar>(std::sin(angle));
    }
  }
}

// Rotates every head of every row by the tabulated angles; sign = -1 applies
// the inverse rotation.
template <typename Scalar>
RowMatrix<Scalar> rotate(const RowMatrix<Scalar>& x, Index heads, const RowMatrix<Scalar>& cos_t,
                         const RowMatrix<Scalar>& sin_t, Scalar sign) {
  const Index hd = x.cols() / heads;
  const Index half = hd / 2;
  RowMatrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index h = 0; h < heads; ++h) {
      const Index base_col = h * hd;
      for (Index i = 0; i < half; ++i) {
        const Scalar c = cos_t(r, i);
        const Scalar s = sign * sin_t(r, i);
        const Scalar x1 = x(r, base_col + i);
        const Scalar x2 = x(r, base_col + half + i);
        y(r, base_col + i) = x1 * c - x2 * s;
        y(r, base_col + half + i) = x1 * s + x2 * c;
      }
    }
  }
  return y;
}

}  // namespace

template <typename Scalar>
BasicTensor<Scalar> rope(const BasicTensor<Scalar>& x, Index heads, std::span<const Index> positions,
                         double base) {
  require_rank2("rope", x);
  if (heads <= 0 || x.cols() % heads != 0 || (x.cols() / heads) % 2 != 0) {
    throw DimensionError("rope: " + std::to_string(x.cols()) + " columns cannot form " +
                         std::to_string(heads) + " heads of even size");
  }
  if (static_cast<Index>(positions.size()) != x.rows()) {
    throw DimensionError("rope: one position per row required");
  }
  RowMatrix<Scalar> cos_t;
  RowMatrix<Scalar> sin_t;
  rope_tables<Scalar>(positions, x.cols() / heads / 2, base, cos_t, sin_t);
  RowMatrix<Scalar> y = rotate<Scalar>(x.value(), heads, cos_t, sin_t, Scalar(1));
  return record_op<Scalar>("rope", x.shape(), std::move(y), {&x},
                           [x, heads, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](
                               const RowMatrix<Scalar>& g) {
                             accumulate_grad(x, rotate<Scalar>(g, heads, cos_t, sin_t, Scalar(-1)));
                           });
}

template <typename Scalar>
BasicTensor<Scalar> causal_attention(const BasicTensor<Scalar>& q, const BasicTensor<Scalar>& k,
                                     const BasicTensor<Scalar>& v, Index batch, Index seq,
                                     Index heads, Index kv_heads) {
  require_rank2("attention", q);
  require_rank2("attention", k);
  require_rank2("attention", v);
  if (heads <= 0 || kv_heads <= 0 || heads % kv_heads != 0) {
    throw DimensionError("attention: heads must be a positive multiple of kv_heads");
  }
  if (q.rows() != batch * seq || k.rows() != q.rows() || v.rows() != q.rows()) {
    throw DimensionError("attention: row count must equal batch*seq");
  }
  if (q.cols() % heads != 0) throw DimensionError("attention: query width not divisible by heads");
  const Index hd = q.cols() / heads;
  if (k.cols() != kv_heads * hd || v.cols() != kv_heads * hd) {
    throw DimensionError("attention: key/value width must be kv_heads*head_dim");
  }
  const Index group = heads / kv_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));

  RowMatrix<Scalar> out(q.rows(), q.cols());
  // One probability matrix per (batch, head), kept for the backward pass.
  std::vector<RowMatrix<Scalar>> probs(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const Index kvh = h / group;
      const auto qh = q.value().block(b * seq, h * hd, seq, hd);
      const auto kh = k.value().block(b * seq, kvh * hd, seq, hd);
      const auto vh = v.value().block(b * seq, kvh * hd, seq, hd);
      RowMatrix<Scalar> p = (qh * kh.transpose()) * inv_sqrt;
      for (Index i = 0; i < seq; ++i) {
        const Scalar peak = p.row(i).head(i + 1).maxCoeff();
        p.row(i).head(i + 1) = (p.row(i).head(i + 1).array() - peak).exp();
        p.row(i).tail(seq - i - 1).setZero();
        p.row(i) /= p.row(i).head(i + 1).sum();
      }
      out.block(b * seq, h * hd, seq, hd).noalias() = p * vh;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(p);
    }
  }
  return record_op<Scalar>(
      "attention", q.shape(), std::move(out), {&q, &k, &v},
      [q, k, v, batch, seq, heads, group, hd, inv_sqrt, probs = std::move(probs)](
          const RowMatrix<Scalar>& g) {
        RowMatrix<Scalar> gq = RowMatrix<Scalar>::Zero(q.rows(), q.cols());
        RowMatrix<Scalar> gk = RowMatrix<Scalar>::Zero(k.rows(), k.cols());
        RowMatrix<Scalar> gv = RowMatrix<Scalar>::Zero(v.rows(), v.cols());
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Index kvh = h / group;
            const auto& p = probs[static_cast<std::size_t>(b * heads + h)];
            const auto go = g.block(b * seq, h * hd, seq, hd);
            const auto qh = q.value().block(b * seq, h * hd, seq, hd);
            const auto kh = k.value().block(b * seq, kvh * hd, seq, hd);
            const auto vh = v.value().block(b * seq, kvh * hd, seq, hd);
            gv.block(b * seq, kvh * hd, seq, hd).noalias() += p.transpose() * go;
            RowMatrix<Scalar> dp = go * vh.transpose();
            const Vector<Scalar> dots = dp.cwiseProduct(p).rowwise().sum();
            RowMatrix<Scalar> ds = p.cwiseProduct(dp - dots.replicate(1, seq)) * inv_sqrt;
            gq.block(b * seq, h * hd, seq, hd).noalias() += ds * kh;
            gk.block(b * seq, kvh * hd, seq, hd).noalias() += ds.transpose() * qh;
          }
        }
        accumulate_grad(q, gq);
        accumulate_grad(k, gk);
        accumulate_grad(v, gv);
      });
}

// ---- explicit instantiations ----------------------------------------------

#define BITSKIP_INSTANTIATE_TENSOR(S)                                                              \
  template class BasicTensor<S>;                                                                   \
  template class GradientTape<S>;                                                                  \
  template BasicTensor<S> make_tensor<S>(Shape, RowMatrix<S>);                                     \
  template BasicTensor<S> record_op<S>(const char*, Shape, RowMatrix<S>,                           \
                                       std::initializer_list<const BasicTensor<S>*>,               \
                                       typename GradientTape<S>::BackwardFn);                      \
  template BasicTensor<S> matmul<S>(const BasicTensor<S>&, const BasicTensor<S>&);                 \
  template BasicTensor<S> matmul_nt<S>(const BasicTensor<S>&, const BasicTensor<S>&);              \
  template BasicTensor<S> add<S>(const BasicTensor<S>&, const BasicTensor<S>&);                    \
  template BasicTensor<S> mul<S>(const BasicTensor<S>&, const BasicTensor<S>&);                    \
  template BasicTensor<S> scale<S>(const BasicTensor<S>&, S);                                      \
  template BasicTensor<S> silu<S>(const BasicTensor<S>&);                                          \
  template BasicTensor<S> elementwise<S>(ElementwiseOp, std::span<const BasicTensor<S>>, S);       \
  template BasicTensor<S> sum<S>(const BasicTensor<S>&);                                           \
  template BasicTensor<S> reshape<S>(const BasicTensor<S>&, Shape);                                \
  template BasicTensor<S> softmax_rows<S>(const BasicTensor<S>&);                                  \
  template BasicTensor<S> rmsnorm<S>(const BasicTensor<S>&, const BasicTensor<S>&, S);             \
  template BasicTensor<S> embedding<S>(const BasicTensor<S>&, std::span<const std::int32_t>);      \
  template BasicTensor<S> cross_entropy<S>(const BasicTensor<S>&, std::span<const std::int32_t>,   \
                                           std::int32_t);                                          \
  template BasicTensor<S> rope<S>(const BasicTensor<S>&, Index, std::span<const Index>, double);   \
  template BasicTensor<S> causal_attention<S>(const BasicTensor<S>&, const BasicTensor<S>&,        \
                                              const BasicTensor<S>&, Index, Index, Index, Index);

BITSKIP_INSTANTIATE_TENSOR(float)
BITSKIP_INSTANTIATE_TENSOR(double)

#undef BITSKIP_INSTANTIATE_TENSOR

}  // namespace bitskip
