#pragma once

// Orthonormal fast Walsh-Hadamard transform in natural (Sylvester) order.
//
// H_0 = (1),  H_m = 1/sqrt(2) [[H_{m-1}, H_{m-1}], [H_{m-1}, -H_{m-1}]]
//
// The butterfly network applies the 1/sqrt(2) factor at each of the m levels,
// mirroring the recursion, so n log2 n add/sub pairs produce H_m x.

#include <Eigen/Core>

#include <bit>
#include <cmath>
#include <string>

#include "bitskip/errors.hpp"
#include "bitskip/tensor.hpp"

namespace bitskip {

struct HadamardPlan {
  Index n = 1;
  int m = 0;

  static HadamardPlan for_size(Index n) {
    if (n < 1 || !std::has_single_bit(static_cast<unsigned long long>(n))) {
      throw TransformSizeError("Hadamard transform needs a power-of-two length, got " +
                               std::to_string(n));
    }
    return HadamardPlan{n, std::countr_zero(static_cast<unsigned long long>(n))};
  }
};

inline bool is_power_of_two(Index n) {
  return n >= 1 && std::has_single_bit(static_cast<unsigned long long>(n));
}

// In-place transform of a contiguous buffer of plan.n values.
template <typename Scalar>
void fht_inplace(Scalar* data, const HadamardPlan& plan) {
  const Scalar c = Scalar(1) / std::sqrt(Scalar(2));
  for (Index h = 1; h < plan.n; h *= 2) {
    for (Index i = 0; i < plan.n; i += 2 * h) {
      for (Index j = i; j < i + h; ++j) {
        const Scalar a = data[j];
        const Scalar b = data[j + h];
        data[j] = (a + b) * c;
        data[j + h] = (a - b) * c;
      }
    }
  }
}

template <typename Derived>
Vector<typename Derived::Scalar> fht(const Eigen::MatrixBase<Derived>& x, const HadamardPlan& plan) {
  using Scalar = typename Derived::Scalar;
  if (x.size() != plan.n) {
    throw TransformSizeError("fht: input of length " + std::to_string(x.size()) + " for plan of size " +
                             std::to_string(plan.n));
  }
  Vector<Scalar> y = x;
  fht_inplace(y.data(), plan);
  return y;
}

template <typename Derived>
Vector<typename Derived::Scalar> fht(const Eigen::MatrixBase<Derived>& x) {
  return fht(x, HadamardPlan::for_size(x.size()));
}

// Transforms every row of a row-major matrix. The butterflies run on the
// transpose so each one combines two contiguous rows of all tokens at once;
// every element sees the same arithmetic as fht_inplace.
template <typename Scalar>
void fht_rows_inplace(RowMatrix<Scalar>& x) {
  const auto plan = HadamardPlan::for_size(x.cols());
  if (x.rows() < 8) {
    for (Index r = 0; r < x.rows(); ++r) fht_inplace(x.row(r).data(), plan);
    return;
  }
  const Scalar c = Scalar(1) / std::sqrt(Scalar(2));
  RowMatrix<Scalar> t = x.transpose();
  Vector<Scalar> tmp(t.cols());
  for (Index h = 1; h < plan.n; h *= 2) {
    for (Index i = 0; i < plan.n; i += 2 * h) {
      for (Index j = i; j < i + h; ++j) {
        tmp = t.row(j).transpose();
        t.row(j) = (t.row(j) + t.row(j + h)) * c;
        t.row(j + h) = (tmp.transpose() - t.row(j + h)) * c;
      }
    }
  }
  x = t.transpose();
}

// Differentiable row transform. H is symmetric and orthonormal, so the
// backward pass is the same transform applied to the upstream gradient.
template <typename Scalar>
BasicTensor<Scalar> fht_rows(const BasicTensor<Scalar>& x);

}  // namespace bitskip
