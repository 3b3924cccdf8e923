#pragma once

// Decoder-only transformer assembled from the variant table:
//
//   variant   weights   activations   Hadamard   linear layer
//   v1        ternary   8-bit         no         BitLinear
//   v2        ternary   4-bit         yes        H-BitLinear
//   v3        ternary   8-bit         yes        BitLinear-H
//   baseline  fp32      fp32          no         Standard
//
// Every layer exit reuses the final RMSNorm and the LM head.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bitskip/layers.hpp"
#include "bitskip/tensor.hpp"

namespace bitskip {

enum class VariantName { v1, v2, v3, baseline };

struct VariantConfig {
  VariantName name = VariantName::v1;
  LinearFeatures features;

  static VariantConfig of(VariantName name);
  // Accepts v1, v2, v3, baseline (case-insensitive); ConfigError otherwise.
  static VariantConfig parse(std::string_view text);
  static std::string valid_names();
  std::string label() const;

  friend bool operator==(const VariantConfig&, const VariantConfig&) = default;
};

struct ModelConfig {
  int layers = 8;
  Index hidden = 256;
  Index heads = 8;
  Index kv_heads = 2;
  Index ffn_dim = 512;
  Index vocab_size = 259;
  Index max_seq_len = 256;
  DropoutSchedule schedule{0.5, ScheduleMode::raw, 8};
  VariantConfig variant = VariantConfig::of(VariantName::v1);
  std::uint64_t seed = 1234;
  double norm_eps = 1e-5;
  double rope_base = 10000.0;

  // Throws ConfigError when the shape or variant constraints fail.
  void validate() const;
  BlockGeometry geometry() const;
  // {L/4, L/2, 3L/4, L}, deduplicated, each at least 1.
  std::vector<int> default_exit_layers() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Scalar>
struct TransformerBlock {
  AttentionParams<Scalar> attention;
  FfnParams<Scalar> ffn;
};

template <typename Scalar>
struct NamedParameter {
  std::string name;
  BasicTensor<Scalar> tensor;
  bool decay = true;  // false for norm gains
};

// Copying a Model shares parameter storage; use clone() for a deep copy.
template <typename Scalar>
class Model {
 public:
  ModelConfig config;
  BasicTensor<Scalar> embedding;  // [vocab × hidden]
  std::vector<TransformerBlock<Scalar>> blocks;
  BasicTensor<Scalar> final_norm;  // [hidden]
  BasicTensor<Scalar> lm_head;     // [vocab × hidden]

  // Fixed order; checkpoint and optimizer state follow it.
  std::vector<NamedParameter<Scalar>> parameters() const;
  Index parameter_count() const;
  void zero_grad();

  // Shares parameters, with every block linear's quantized weight cached.
  Model frozen() const;
  Model clone() const;
  bool is_frozen() const;

  // Block linears of layer l (0-based) in order q, k, v, o, gate, up, down.
  std::vector<const LinearWeights<Scalar>*> linears(int layer) const;
};

// Weights ~ N(0, 0.02²) from config.seed, norm gains = 1.
template <typename Scalar>
Model<Scalar> build_model(const ModelConfig& config);

// Token ids, row-major [batch × seq].
struct TokenBatch {
  Index batch = 0;
  Index seq = 0;
  std::vector<std::int32_t> ids;

  static TokenBatch single(std::span<const std::int32_t> tokens);
  std::span<const std::int32_t> row(Index b) const {
    return std::span<const std::int32_t>(ids).subspan(static_cast<std::size_t>(b * seq),
                                                      static_cast<std::size_t>(seq));
  }
};

template <typename Scalar>
struct ForwardTrace {
  BasicTensor<Scalar> logits_final;                   // [batch·seq × vocab]
  std::vector<BasicTensor<Scalar>> hidden_per_layer;  // h_1..h_L
  std::vector<bool> skip_mask;                        // train phase only
};

struct ForwardOptions {
  Phase phase = Phase::infer;
  // Per-layer skip probabilities for the train phase; empty means the
  // model's own schedule.
  std::vector<double> skip_probs;
  std::mt19937_64* rng = nullptr;
  // Fixed skip decisions (train phase); overrides skip_probs/rng.
  std::vector<bool> forced_skip;
};

template <typename Scalar>
ForwardTrace<Scalar> forward_full(const Model<Scalar>& model, const TokenBatch& tokens,
                                  const ForwardOptions& options = {});

// Shared exit head: lm_head(final_norm(h)).
template <typename Scalar>
BasicTensor<Scalar> exit_logits(const Model<Scalar>& model, const BasicTensor<Scalar>& hidden);

// Runs blocks 1..k only, then the shared head. k is 1-based.
template <typename Scalar>
BasicTensor<Scalar> forward_exit_at(const Model<Scalar>& model, const TokenBatch& tokens, int k);

struct GenerationResult {
  std::vector<std::int32_t> tokens;  // generated ids only
  double elapsed_seconds = 0.0;      // decoding loop, prompt ingestion excluded
  Index decode_steps = 0;            // forward passes inside the loop
  Index window_truncations = 0;      // times the context was cut to max_seq_len
};

// Greedy decoding (argmax, ties to the lowest id) with a per-layer KV cache.
template <typename Scalar>
GenerationResult generate(const Model<Scalar>& model, std::span<const std::int32_t> prompt, Index n_tokens,
                          std::optional<int> exit_layer = std::nullopt);

// Index of the largest entry; the lowest index wins ties.
template <typename Derived>
Index argmax_lowest(const Eigen::MatrixBase<Derived>& row) {
  Index best = 0;
  for (Index i = 1; i < row.size(); ++i) {
    if (row(i) > row(best)) best = i;
  }
  return best;
}

}  // namespace bitskip
