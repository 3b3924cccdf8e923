#include "bitskip/layers.hpp"

#include <cmath>
#include <numeric>

#include "bitskip/hadamard.hpp"
#include "bitskip/quant.hpp"

namespace bitskip {

void LinearLayerSpec::validate() const {
  if (in_features <= 0 || out_features <= 0) {
    throw ConfigError("linear layer needs positive in/out features");
  }
  if (activation_bits != 0) activation_levels(activation_bits);
  if (hadamard && !is_power_of_two(in_features)) {
    throw TransformSizeError("H-BitLinear input width " + std::to_string(in_features) +
                             " is not a power of two");
  }
}

std::string LinearLayerSpec::kind() const {
  if (weight_mode == WeightMode::full_precision && activation_bits == 0 && !hadamard) return "Standard";
  return hadamard ? "H-BitLinear" : "BitLinear";
}

template <typename Scalar>
BasicTensor<Scalar> bitlinear_forward(const BasicTensor<Scalar>& x, const LinearLayerSpec& spec,
                                      const BasicTensor<Scalar>& shadow_w) {
  if (x.rank() != 2 || x.cols() != spec.in_features) {
    throw DimensionError("bitlinear: input " + shape_string(x.shape()) + " for in_features " +
                         std::to_string(spec.in_features));
  }
  if (shadow_w.rows() != spec.out_features || shadow_w.cols() != spec.in_features) {
    throw DimensionError("bitlinear: weight " + shape_string(shadow_w.shape()) + " does not match spec");
  }
  BasicTensor<Scalar> h = spec.hadamard ? fht_rows(x) : x;
  if (spec.activation_bits != 0) h = quantize_activations_ste(h, spec.activation_bits);
  const BasicTensor<Scalar> w =
      spec.weight_mode == WeightMode::ternary ? ternary_weight_ste(shadow_w) : shadow_w;
  return matmul_nt(h, w);
}

template <typename Scalar>
BasicTensor<Scalar> LinearWeights<Scalar>::forward(const BasicTensor<Scalar>& x) const {
  if (!frozen.defined()) return bitlinear_forward(x, spec, shadow);
  // Same pipeline with the weight quantizer already applied.
  LinearLayerSpec pre = spec;
  pre.weight_mode = WeightMode::full_precision;
  return bitlinear_forward(x, pre, frozen);
}

template <typename Scalar>
void LinearWeights<Scalar>::freeze() {
  if (spec.weight_mode == WeightMode::ternary) {
    frozen = BasicTensor<Scalar>::from_matrix(ternary_quantize(shadow.value()).dequantized());
  } else {
    frozen = shadow.detached();
  }
}

void BlockGeometry::validate() const {
  if (hidden <= 0 || heads <= 0 || kv_heads <= 0 || ffn_dim <= 0) {
    throw ConfigError("block geometry needs positive sizes");
  }
  if (hidden % heads != 0) throw ConfigError("hidden size must be divisible by heads");
  if (heads % kv_heads != 0) throw ConfigError("heads must be divisible by kv_heads");
  if (head_dim() % 2 != 0) throw ConfigError("head size must be even for rotary embeddings");
  if (features.activation_bits != 0 && features.activation_bits != 4 && features.activation_bits != 8) {
    throw ConfigError("activation bits must be 0, 4 or 8");
  }
  if (features.hadamard && (!is_power_of_two(hidden) || !is_power_of_two(ffn_dim))) {
    throw ConfigError("Hadamard variants need power-of-two hidden and FFN sizes");
  }
}

namespace {

std::vector<Index> batch_positions(Index batch, Index seq, Index start = 0) {
  std::vector<Index> pos(static_cast<std::size_t>(batch * seq));
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < seq; ++t) pos[static_cast<std::size_t>(b * seq + t)] = start + t;
  }
  return pos;
}

}  // namespace

template <typename Scalar>
BasicTensor<Scalar> attention_block(const BasicTensor<Scalar>& x, const AttentionParams<Scalar>& params,
                                    const BlockGeometry& geom, Index batch, Index seq) {
  const auto h = rmsnorm(x, params.norm_gain, static_cast<Scalar>(geom.norm_eps));
  const auto positions = batch_positions(batch, seq);
  const auto q = rope(params.wq.forward(h), geom.heads, positions, geom.rope_base);
  const auto k = rope(params.wk.forward(h), geom.kv_heads, positions, geom.rope_base);
  const auto v = params.wv.forward(h);
  const auto attended = causal_attention(q, k, v, batch, seq, geom.heads, geom.kv_heads);
  return add(x, params.wo.forward(attended));
}

template <typename Scalar>
BasicTensor<Scalar> ffn_block(const BasicTensor<Scalar>& x, const FfnParams<Scalar>& params,
                              const BlockGeometry& geom) {
  const auto h = rmsnorm(x, params.norm_gain, static_cast<Scalar>(geom.norm_eps));
  const auto gated = mul(silu(params.w_gate.forward(h)), params.w_up.forward(h));
  return add(x, params.w_down.forward(gated));
}

template <typename Scalar>
BasicTensor<Scalar> attention_block_cached(const BasicTensor<Scalar>& x,
                                           const AttentionParams<Scalar>& params,
                                           const BlockGeometry& geom, KvCache<Scalar>& cache) {
  NoGradGuard<Scalar> no_grad;
  const Index n = x.rows();
  const Index start = cache.length;
  const Index hd = geom.head_dim();
  const Index kv_width = geom.kv_heads * hd;
  const auto h = rmsnorm(x, params.norm_gain, static_cast<Scalar>(geom.norm_eps));
  const auto positions = batch_positions(1, n, start);
  const auto q = rope(params.wq.forward(h), geom.heads, positions, geom.rope_base);
  const auto k = rope(params.wk.forward(h), geom.kv_heads, positions, geom.rope_base);
  const auto v = params.wv.forward(h);

  cache.keys.conservativeResize(start + n, kv_width);
  cache.values.conservativeResize(start + n, kv_width);
  cache.keys.bottomRows(n) = k.value();
  cache.values.bottomRows(n) = v.value();
  cache.length = start + n;

  const Index group = geom.heads / geom.kv_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  RowMatrix<Scalar> out(n, geom.heads * hd);
  for (Index head = 0; head < geom.heads; ++head) {
    const Index kvh = head / group;
    const auto kh = cache.keys.block(0, kvh * hd, cache.length, hd);
    const auto vh = cache.values.block(0, kvh * hd, cache.length, hd);
    RowMatrix<Scalar> p = (q.value().block(0, head * hd, n, hd) * kh.transpose()) * inv_sqrt;
    for (Index i = 0; i < n; ++i) {
      const Index visible = start + i + 1;
      const Scalar peak = p.row(i).head(visible).maxCoeff();
      p.row(i).head(visible) = (p.row(i).head(visible).array() - peak).exp();
      p.row(i).tail(cache.length - visible).setZero();
      p.row(i) /= p.row(i).head(visible).sum();
    }
    out.block(0, head * hd, n, hd).noalias() = p * vh;
  }
  const auto attended = BasicTensor<Scalar>::from_matrix(std::move(out));
  return add(x, params.wo.forward(attended));
}

double schedule_p(int layer, const DropoutSchedule& schedule) {
  const int total = schedule.layers;
  if (total < 1) throw RangeError("dropout schedule needs at least one layer");
  if (layer < 1 || layer > total) {
    throw RangeError("layer index " + std::to_string(layer) + " outside 1.." + std::to_string(total));
  }
  const auto raw = [&](int l) {
    const double ratio = static_cast<double>(l) / static_cast<double>(total);
    return schedule.p_max * ratio * ratio;
  };
  if (schedule.mode == ScheduleMode::raw) return raw(layer);
  double norm = 0.0;
  for (int l = 1; l <= total; ++l) norm += raw(l);
  if (norm == 0.0) return 0.0;
  return raw(layer) / norm;
}

#define BITSKIP_INSTANTIATE_LAYERS(S)                                                              \
  template BasicTensor<S> bitlinear_forward<S>(const BasicTensor<S>&, const LinearLayerSpec&,     \
                                               const BasicTensor<S>&);                            \
  template struct LinearWeights<S>;                                                                \
  template BasicTensor<S> attention_block<S>(const BasicTensor<S>&, const AttentionParams<S>&,     \
                                             const BlockGeometry&, Index, Index);                  \
  template BasicTensor<S> ffn_block<S>(const BasicTensor<S>&, const FfnParams<S>&,                 \
                                       const BlockGeometry&);                                      \
  template BasicTensor<S> attention_block_cached<S>(const BasicTensor<S>&, const AttentionParams<S>&, \
                                                    const BlockGeometry&, KvCache<S>&);

BITSKIP_INSTANTIATE_LAYERS(float)
BITSKIP_INSTANTIATE_LAYERS(double)

#undef BITSKIP_INSTANTIATE_LAYERS

}  // namespace bitskip
