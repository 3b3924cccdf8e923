#pragma once

// Ternary weight quantization, per-token activation quantization, and the
// straight-through estimator used to train through both.
//
// Quantized values stay on the float grid: a ternary matrix is code·alpha and
// a quantized activation is k·s/Q for an integer k.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "bitskip/errors.hpp"
#include "bitskip/tensor.hpp"

namespace bitskip {

template <typename Scalar>
struct TernaryWeights {
  RowMatrix<std::int8_t> codes;  // entries in {-1, 0, +1}
  Scalar alpha = Scalar(0);

  RowMatrix<Scalar> dequantized() const { return codes.template cast<Scalar>() * alpha; }
};

// alpha = mean(|w|) over the whole matrix; threshold 0.5·alpha.
template <typename Derived>
TernaryWeights<typename Derived::Scalar> ternary_quantize(const Eigen::MatrixBase<Derived>& w) {
  using Scalar = typename Derived::Scalar;
  if (w.size() == 0) throw DimensionError("ternary_quantize: empty weight matrix");
  // Row-major sequential sum in double, so the scale is reproducible bit for bit.
  const RowMatrix<Scalar> m = w;
  const Scalar* data = m.data();
  const Index n = m.size();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) total += std::abs(static_cast<double>(data[i]));
  TernaryWeights<Scalar> out;
  out.alpha = static_cast<Scalar>(total / static_cast<double>(n));
  out.codes.resize(m.rows(), m.cols());
  const Scalar threshold = Scalar(0.5) * out.alpha;
  std::int8_t* codes = out.codes.data();
  for (Index i = 0; i < n; ++i) {
    const Scalar v = data[i];
    codes[i] = static_cast<std::int8_t>((v > threshold) - (v < -threshold));
  }
  return out;
}

// Largest magnitude level of the signed grid: 127 for 8 bits, 7 for 4 bits.
inline int activation_levels(int bits) {
  switch (bits) {
    case 8: return 127;
    case 4: return 7;
    default: throw RangeError("activation quantization supports 4 or 8 bits, got " + std::to_string(bits));
  }
}

// Rows whose max |x| falls below this are mapped to zeros.
inline constexpr double kActivationScaleFloor = 1e-8;

template <typename Scalar>
struct QuantizedActivations {
  RowMatrix<Scalar> values;       // dequantized, k·s/Q
  Vector<Scalar> scale_per_token;  // s = max |x| of each row
  int bits = 8;
};

// round(clip(x/s·Q, -Q-1, Q))·s/Q per row, rounding half away from zero.
template <typename Derived>
QuantizedActivations<typename Derived::Scalar> quantize_activations(const Eigen::MatrixBase<Derived>& x,
                                                                     int bits) {
  using Scalar = typename Derived::Scalar;
  const int levels = activation_levels(bits);
  if (x.cols() < 1) throw DimensionError("quantize_activations: empty feature dimension");
  const Scalar q = static_cast<Scalar>(levels);
  const Scalar lo = -q - Scalar(1);
  QuantizedActivations<Scalar> out;
  out.bits = bits;
  out.values.resize(x.rows(), x.cols());
  out.scale_per_token.resize(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar s = x.row(r).cwiseAbs().maxCoeff();
    out.scale_per_token(r) = s;
    if (static_cast<double>(s) < kActivationScaleFloor) {
      out.values.row(r).setZero();
      continue;
    }
    for (Index c = 0; c < x.cols(); ++c) {
      const Scalar scaled = std::clamp(x(r, c) / s * q, lo, q);
      out.values(r, c) = std::round(scaled) * s / q;
    }
  }
  return out;
}

// Gradient rule at every quantizer node: the upstream gradient, unchanged.
template <typename Derived>
RowMatrix<typename Derived::Scalar> ste_gradient(const Eigen::MatrixBase<Derived>& upstream) {
  return upstream;
}

// Differentiable quantizers. Forward applies the quantizer; backward applies
// ste_gradient, i.e. treats the quantizer as the identity.
template <typename Scalar>
BasicTensor<Scalar> ternary_weight_ste(const BasicTensor<Scalar>& w);

template <typename Scalar>
BasicTensor<Scalar> quantize_activations_ste(const BasicTensor<Scalar>& x, int bits);

}  // namespace bitskip
