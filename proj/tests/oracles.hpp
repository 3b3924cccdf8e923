#pragma once

// Independent reference implementations used by the tests. Everything here
// is written with plain loops in double precision and shares no code with
// the library beyond the types it reads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "bitskip/model.hpp"
#include "bitskip/tensor.hpp"

namespace oracle {

using bitskip::Index;
using Mat = bitskip::RowMatrix<double>;

template <typename A, typename B>
Mat matmul(const A& a, const B& b) {
  Mat c = Mat::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Index k = 0; k < a.cols(); ++k) s += static_cast<double>(a(i, k)) * static_cast<double>(b(k, j));
      c(i, j) = s;
    }
  }
  return c;
}

// H_0 = (1), H_m = 1/sqrt(2) [[H, H], [H, -H]], built literally.
inline Mat hadamard_matrix(Index n) {
  Mat h(1, 1);
  h(0, 0) = 1.0;
  while (h.rows() < n) {
    const Index k = h.rows();
    Mat next(2 * k, 2 * k);
    const double c = 1.0 / std::sqrt(2.0);
    next.topLeftCorner(k, k) = c * h;
    next.topRightCorner(k, k) = c * h;
    next.bottomLeftCorner(k, k) = c * h;
    next.bottomRightCorner(k, k) = -c * h;
    h = next;
  }
  return h;
}

struct Ternary {
  std::vector<int> codes;
  float alpha = 0.0f;
};

// Ternarization of a float matrix, element by element in row-major order.
inline Ternary ternary(const bitskip::RowMatrix<float>& w) {
  Ternary t;
  double total = 0.0;
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) total += std::fabs(static_cast<double>(w(r, c)));
  }
  t.alpha = static_cast<float>(total / static_cast<double>(w.rows() * w.cols()));
  const float threshold = 0.5f * t.alpha;
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) {
      const float v = w(r, c);
      int code = 0;
      if (v > threshold) code = 1;
      if (v < -threshold) code = -1;
      t.codes.push_back(code);
    }
  }
  return t;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Mat rmsnorm(const Mat& x, const Mat& gain, double eps) {
  Mat y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double ms = 0.0;
    for (Index c = 0; c < x.cols(); ++c) ms += x(r, c) * x(r, c);
    ms /= static_cast<double>(x.cols());
    const double inv = 1.0 / std::sqrt(ms + eps);
    for (Index c = 0; c < x.cols(); ++c) y(r, c) = x(r, c) * inv * gain(0, c);
  }
  return y;
}

// Rotary embedding with explicit 2x2 rotations on pairs (i, i + hd/2).
inline Mat rope(const Mat& x, Index heads, const std::vector<Index>& positions, double base) {
  const Index hd = x.cols() / heads;
  const Index half = hd / 2;
  Mat y = x;
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index h = 0; h < heads; ++h) {
      for (Index i = 0; i < half; ++i) {
        const double theta = static_cast<double>(positions[static_cast<std::size_t>(r)]) *
                             std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
        const double a = x(r, h * hd + i);
        const double b = x(r, h * hd + i + half);
        y(r, h * hd + i) = a * std::cos(theta) - b * std::sin(theta);
        y(r, h * hd + i + half) = a * std::sin(theta) + b * std::cos(theta);
      }
    }
  }
  return y;
}

// Standard (ungrouped) causal multi-head attention: every query head has its
// own key/value head, so grouped inputs are expanded by repetition first.
inline Mat mha(const Mat& q, const Mat& k, const Mat& v, Index batch, Index seq, Index heads, Index kv_heads) {
  const Index hd = q.cols() / heads;
  const Index group = heads / kv_heads;
  Mat k_full(k.rows(), heads * hd);
  Mat v_full(v.rows(), heads * hd);
  for (Index h = 0; h < heads; ++h) {
    k_full.middleCols(h * hd, hd) = k.middleCols((h / group) * hd, hd);
    v_full.middleCols(h * hd, hd) = v.middleCols((h / group) * hd, hd);
  }
  Mat out = Mat::Zero(q.rows(), q.cols());
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      for (Index t = 0; t < seq; ++t) {
        std::vector<double> scores;
        double mx = -1e300;
        for (Index u = 0; u <= t; ++u) {
          double s = 0.0;
          for (Index i = 0; i < hd; ++i) s += q(b * seq + t, h * hd + i) * k_full(b * seq + u, h * hd + i);
          s /= std::sqrt(static_cast<double>(hd));
          scores.push_back(s);
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (auto& s : scores) z += (s = std::exp(s - mx));
        for (Index u = 0; u <= t; ++u) {
          const double p = scores[static_cast<std::size_t>(u)] / z;
          for (Index i = 0; i < hd; ++i) out(b * seq + t, h * hd + i) += p * v_full(b * seq + u, h * hd + i);
        }
      }
    }
  }
  return out;
}

// Mean cross-entropy in nats, skipping `ignore` targets.
template <typename M>
double cross_entropy(const M& logits, const std::vector<std::int32_t>& targets, std::int32_t ignore = -1) {
  double total = 0.0;
  int n = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const auto t = targets[static_cast<std::size_t>(r)];
    if (t == ignore) continue;
    double mx = -1e300;
    for (Index c = 0; c < logits.cols(); ++c) mx = std::max(mx, static_cast<double>(logits(r, c)));
    double z = 0.0;
    for (Index c = 0; c < logits.cols(); ++c) z += std::exp(static_cast<double>(logits(r, c)) - mx);
    total += std::log(z) + mx - static_cast<double>(logits(r, t));
    ++n;
  }
  return total / n;
}

// Parameter count of the decoder from its shape alone.
inline Index parameter_count(const bitskip::ModelConfig& c) {
  const Index hd = c.hidden / c.heads;
  const Index kv = c.kv_heads * hd;
  const Index per_layer = 2 * c.hidden                      // two norm gains
                          + c.hidden * c.hidden * 2          // q, o
                          + kv * c.hidden * 2                // k, v
                          + 3 * c.ffn_dim * c.hidden;        // gate, up, down
  return 2 * c.vocab_size * c.hidden + c.layers * per_layer + c.hidden;
}

template <typename Scalar>
bitskip::RowMatrix<Scalar> random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  bitskip::RowMatrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

struct FdResult {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;
  double pass_fraction() const { return checked == 0 ? 0.0 : static_cast<double>(passed) / checked; }
};

// Central finite differences against the gradients already stored on
// `params`. `loss` must rebuild the scalar loss from the current values.
inline FdResult finite_difference_check(const std::vector<bitskip::BasicTensor<double>>& params,
                                        const std::function<double()>& loss, std::size_t samples_per_param,
                                        std::mt19937_64& rng, double h = 1e-5, double tol = 1e-3,
                                        double floor = 1e-7) {
  FdResult result;
  for (auto p : params) {
    const Index n = p.numel();
    std::vector<Index> picks;
    if (static_cast<std::size_t>(n) <= samples_per_param) {
      for (Index i = 0; i < n; ++i) picks.push_back(i);
    } else {
      std::uniform_int_distribution<Index> pick(0, n - 1);
      for (std::size_t s = 0; s < samples_per_param; ++s) picks.push_back(pick(rng));
    }
    for (Index i : picks) {
      double& slot = p.mutable_value().data()[i];
      const double saved = slot;
      slot = saved + h;
      const double up = loss();
      slot = saved - h;
      const double down = loss();
      slot = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.has_grad() ? p.grad().data()[i] : 0.0;
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++result.checked;
      if (rel <= tol || std::abs(analytic - numeric) <= floor) ++result.passed;
      result.worst = std::max(result.worst, rel);
    }
  }
  return result;
}

}  // namespace oracle
