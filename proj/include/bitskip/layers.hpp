#pragma once

// Quantized linear layers, the attention and feed-forward blocks, the
// quadratic layer-dropout schedule and the stochastic layer-skip operator.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bitskip/tensor.hpp"

namespace bitskip {

enum class WeightMode { full_precision, ternary };

// Quantization features shared by every linear layer inside the blocks.
struct LinearFeatures {
  WeightMode weight_mode = WeightMode::full_precision;
  int activation_bits = 0;  // 0 = no activation quantization, else 4 or 8
  bool hadamard = false;

  friend bool operator==(const LinearFeatures&, const LinearFeatures&) = default;
};

struct LinearLayerSpec {
  Index in_features = 0;
  Index out_features = 0;
  WeightMode weight_mode = WeightMode::full_precision;
  int activation_bits = 0;
  bool hadamard = false;

  static LinearLayerSpec make(Index in, Index out, const LinearFeatures& f) {
    return {in, out, f.weight_mode, f.activation_bits, f.hadamard};
  }
  LinearFeatures features() const { return {weight_mode, activation_bits, hadamard}; }

  // Throws ConfigError / TransformSizeError on an inconsistent spec.
  void validate() const;

  // "Standard", "BitLinear" or "H-BitLinear".
  std::string kind() const;

  friend bool operator==(const LinearLayerSpec&, const LinearLayerSpec&) = default;
};

// Runs one linear layer:
//   (1) x <- fht_rows(x)                 if spec.hadamard
//   (2) x <- quantize_activations(x)     if spec.activation_bits != 0
//   (3) W <- ternary(shadow_w)           if spec.weight_mode == ternary
//   (4) y  = x Wᵀ
// Gradients pass straight through both quantizers.
template <typename Scalar>
BasicTensor<Scalar> bitlinear_forward(const BasicTensor<Scalar>& x, const LinearLayerSpec& spec,
                                      const BasicTensor<Scalar>& shadow_w);

// A linear layer's parameters. `shadow` is the trainable full-precision
// matrix [out×in]; `frozen`, when set, holds the already-quantized weight and
// is used instead of re-quantizing on every call (inference only).
template <typename Scalar>
struct LinearWeights {
  LinearLayerSpec spec;
  BasicTensor<Scalar> shadow;
  BasicTensor<Scalar> frozen;

  BasicTensor<Scalar> forward(const BasicTensor<Scalar>& x) const;
  // Fills `frozen` from the current shadow weights.
  void freeze();
};

struct BlockGeometry {
  Index hidden = 0;
  Index heads = 1;
  Index kv_heads = 1;
  Index ffn_dim = 0;
  double norm_eps = 1e-5;
  double rope_base = 10000.0;
  LinearFeatures features;

  Index head_dim() const { return hidden / heads; }
  // hidden % heads == 0, heads % kv_heads == 0, even head size, and
  // power-of-two linear inputs when the Hadamard transform is on.
  void validate() const;
};

template <typename Scalar>
struct AttentionParams {
  BasicTensor<Scalar> norm_gain;
  LinearWeights<Scalar> wq, wk, wv, wo;
};

template <typename Scalar>
struct FfnParams {
  BasicTensor<Scalar> norm_gain;
  LinearWeights<Scalar> w_gate, w_up, w_down;
};

// Pre-norm grouped-query attention with RoPE and a residual connection.
// x is [batch·seq × hidden] with rows batch-major.
template <typename Scalar>
BasicTensor<Scalar> attention_block(const BasicTensor<Scalar>& x, const AttentionParams<Scalar>& params,
                                    const BlockGeometry& geom, Index batch, Index seq);

// Pre-norm gated SiLU feed-forward with a residual connection.
template <typename Scalar>
BasicTensor<Scalar> ffn_block(const BasicTensor<Scalar>& x, const FfnParams<Scalar>& params,
                              const BlockGeometry& geom);

// Keys and values (post-RoPE) seen so far by one layer during decoding.
template <typename Scalar>
struct KvCache {
  RowMatrix<Scalar> keys;    // [len × kv_heads·hd]
  RowMatrix<Scalar> values;  // [len × kv_heads·hd]
  Index length = 0;

  void clear() {
    keys.resize(0, 0);
    values.resize(0, 0);
    length = 0;
  }
};

// Incremental attention for a single sequence: x holds the new rows, whose
// positions continue from cache.length. No gradient is recorded.
template <typename Scalar>
BasicTensor<Scalar> attention_block_cached(const BasicTensor<Scalar>& x,
                                           const AttentionParams<Scalar>& params,
                                           const BlockGeometry& geom, KvCache<Scalar>& cache);

enum class ScheduleMode { raw, sum_normalized };

struct DropoutSchedule {
  double p_max = 0.5;
  ScheduleMode mode = ScheduleMode::raw;
  int layers = 1;

  friend bool operator==(const DropoutSchedule&, const DropoutSchedule&) = default;
};

// raw: p_max·(l/L)²; sum_normalized: the raw value divided by the sum over
// all L layers. l is 1-based.
double schedule_p(int layer, const DropoutSchedule& schedule);

enum class Phase { train, infer };

// Uniform draw in [0, 1) from the top 53 bits of one engine output.
inline double uniform_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// One Bernoulli(p) draw.
inline bool draw_skip(double p, std::mt19937_64& rng) { return uniform_unit(rng) < p; }

// Training: returns h itself with probability p, otherwise block(h).
// Inference: always block(h). `skipped` reports the decision.
template <typename Scalar, typename Block>
BasicTensor<Scalar> layer_skip_apply(const BasicTensor<Scalar>& h, Block&& block, double p, Phase phase,
                                     std::mt19937_64& rng, bool* skipped = nullptr) {
  if (p < 0.0 || p > 1.0) throw RangeError("layer_skip_apply: probability outside [0, 1]");
  bool skip = false;
  if (phase == Phase::train) skip = draw_skip(p, rng);
  if (skipped != nullptr) *skipped = skip;
  if (skip) return h;
  return block(h);
}

}  // namespace bitskip
