#include "bitskip/model.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>

#include "bitskip/hadamard.hpp"

namespace bitskip {

VariantConfig VariantConfig::of(VariantName name) {
  switch (name) {
    case VariantName::v1: return {name, {WeightMode::ternary, 8, false}};
    case VariantName::v2: return {name, {WeightMode::ternary, 4, true}};
    case VariantName::v3: return {name, {WeightMode::ternary, 8, true}};
    case VariantName::baseline: return {name, {WeightMode::full_precision, 0, false}};
  }
  throw ConfigError("unknown variant");
}

std::string VariantConfig::valid_names() { return "v1, v2, v3, baseline"; }

VariantConfig VariantConfig::parse(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "v1") return of(VariantName::v1);
  if (lower == "v2") return of(VariantName::v2);
  if (lower == "v3") return of(VariantName::v3);
  if (lower == "baseline" || lower == "layerskip") return of(VariantName::baseline);
  throw ConfigError("unknown variant '" + std::string(text) + "'; valid options: " + valid_names());
}

std::string VariantConfig::label() const {
  switch (name) {
    case VariantName::v1: return "v1";
    case VariantName::v2: return "v2";
    case VariantName::v3: return "v3";
    case VariantName::baseline: return "baseline";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model.layers must be >= 1");
  if (vocab_size < 1) throw ConfigError("model.vocab_size must be >= 1");
  if (max_seq_len < 1) throw ConfigError("model.max_seq_len must be >= 1");
  if (schedule.layers != layers) throw ConfigError("dropout schedule layer count differs from model.layers");
  if (schedule.p_max < 0.0 || schedule.p_max > 1.0) throw ConfigError("p_max must lie in [0, 1]");
  if (variant.features != VariantConfig::of(variant.name).features) {
    throw ConfigError("variant features do not match variant " + variant.label());
  }
  geometry().validate();
}

BlockGeometry ModelConfig::geometry() const {
  return BlockGeometry{hidden, heads, kv_heads, ffn_dim, norm_eps, rope_base, variant.features};
}

std::vector<int> ModelConfig::default_exit_layers() const {
  std::vector<int> out;
  for (int quarter = 1; quarter <= 4; ++quarter) {
    const int k = std::max(1, layers * quarter / 4);
    if (out.empty() || out.back() != k) out.push_back(k);
  }
  return out;
}

// ---- Model ----------------------------------------------------------------

template <typename Scalar>
std::vector<NamedParameter<Scalar>> Model<Scalar>::parameters() const {
  std::vector<NamedParameter<Scalar>> out;
  out.push_back({"embedding", embedding, true});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& a = blocks[l].attention;
    const auto& f = blocks[l].ffn;
    out.push_back({p + "attn_norm", a.norm_gain, false});
    out.push_back({p + "wq", a.wq.shadow, true});
    out.push_back({p + "wk", a.wk.shadow, true});
    out.push_back({p + "wv", a.wv.shadow, true});
    out.push_back({p + "wo", a.wo.shadow, true});
    out.push_back({p + "ffn_norm", f.norm_gain, false});
    out.push_back({p + "w_gate", f.w_gate.shadow, true});
    out.push_back({p + "w_up", f.w_up.shadow, true});
    out.push_back({p + "w_down", f.w_down.shadow, true});
  }
  out.push_back({"final_norm", final_norm, false});
  out.push_back({"lm_head", lm_head, true});
  return out;
}

template <typename Scalar>
Index Model<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename Scalar>
void Model<Scalar>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename Scalar>
std::vector<const LinearWeights<Scalar>*> Model<Scalar>::linears(int layer) const {
  const auto& b = blocks.at(static_cast<std::size_t>(layer));
  return {&b.attention.wq, &b.attention.wk, &b.attention.wv, &b.attention.wo,
          &b.ffn.w_gate,   &b.ffn.w_up,     &b.ffn.w_down};
}

template <typename Scalar>
Model<Scalar> Model<Scalar>::frozen() const {
  Model out = *this;
  for (auto& b : out.blocks) {
    for (auto* w : {&b.attention.wq, &b.attention.wk, &b.attention.wv, &b.attention.wo, &b.ffn.w_gate,
                    &b.ffn.w_up, &b.ffn.w_down}) {
      w->freeze();
    }
  }
  return out;
}

template <typename Scalar>
bool Model<Scalar>::is_frozen() const {
  return !blocks.empty() && blocks.front().attention.wq.frozen.defined();
}

template <typename Scalar>
Model<Scalar> Model<Scalar>::clone() const {
  Model out = *this;
  const auto copy = [](BasicTensor<Scalar>& t) {
    const bool rg = t.requires_grad();
    t = t.detached();
    t.set_requires_grad(rg);
  };
  copy(out.embedding);
  copy(out.final_norm);
  copy(out.lm_head);
  for (auto& b : out.blocks) {
    copy(b.attention.norm_gain);
    copy(b.ffn.norm_gain);
    for (auto* w : {&b.attention.wq, &b.attention.wk, &b.attention.wv, &b.attention.wo, &b.ffn.w_gate,
                    &b.ffn.w_up, &b.ffn.w_down}) {
      copy(w->shadow);
      w->frozen = BasicTensor<Scalar>();
    }
  }
  return out;
}

template <typename Scalar>
Model<Scalar> build_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const auto init = [&](Index rows, Index cols) {
    RowMatrix<Scalar> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
    return BasicTensor<Scalar>::from_matrix(std::move(m), true);
  };
  const auto ones = [](Index n) { return BasicTensor<Scalar>::from_matrix(RowMatrix<Scalar>::Ones(1, n), true); };
  const auto linear = [&](Index in, Index out) {
    LinearWeights<Scalar> w;
    w.spec = LinearLayerSpec::make(in, out, config.variant.features);
    w.spec.validate();
    w.shadow = init(out, in);
    return w;
  };

  const Index d = config.hidden;
  const Index hd = d / config.heads;
  Model<Scalar> model;
  model.config = config;
  model.embedding = init(config.vocab_size, d);
  for (int l = 0; l < config.layers; ++l) {
    TransformerBlock<Scalar> b;
    b.attention.norm_gain = ones(d);
    b.attention.wq = linear(d, config.heads * hd);
    b.attention.wk = linear(d, config.kv_heads * hd);
    b.attention.wv = linear(d, config.kv_heads * hd);
    b.attention.wo = linear(config.heads * hd, d);
    b.ffn.norm_gain = ones(d);
    b.ffn.w_gate = linear(d, config.ffn_dim);
    b.ffn.w_up = linear(d, config.ffn_dim);
    b.ffn.w_down = linear(config.ffn_dim, d);
    model.blocks.push_back(std::move(b));
  }
  model.final_norm = ones(d);
  model.lm_head = init(config.vocab_size, d);
  return model;
}

// ---- forward passes -------------------------------------------------------

TokenBatch TokenBatch::single(std::span<const std::int32_t> tokens) {
  return TokenBatch{1, static_cast<Index>(tokens.size()), std::vector<std::int32_t>(tokens.begin(), tokens.end())};
}

namespace {

template <typename Scalar>
void check_tokens(const Model<Scalar>& model, const TokenBatch& tokens) {
  if (tokens.batch < 1 || tokens.seq < 1 ||
      static_cast<Index>(tokens.ids.size()) != tokens.batch * tokens.seq) {
    throw DimensionError("token batch must be a non-empty batch x seq grid");
  }
  if (tokens.seq > model.config.max_seq_len) {
    throw RangeError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                     std::to_string(model.config.max_seq_len));
  }
  for (auto id : tokens.ids) {
    if (id < 0 || id >= model.config.vocab_size) {
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(model.config.vocab_size));
    }
  }
}

template <typename Scalar>
BasicTensor<Scalar> run_block(const Model<Scalar>& model, int layer, const BasicTensor<Scalar>& h,
                              const TokenBatch& tokens) {
  const auto geom = model.config.geometry();
  const auto& block = model.blocks[static_cast<std::size_t>(layer)];
  const auto mid = attention_block(h, block.attention, geom, tokens.batch, tokens.seq);
  return ffn_block(mid, block.ffn, geom);
}

}  // namespace

template <typename Scalar>
BasicTensor<Scalar> exit_logits(const Model<Scalar>& model, const BasicTensor<Scalar>& hidden) {
  const auto normed = rmsnorm(hidden, model.final_norm, static_cast<Scalar>(model.config.norm_eps));
  return matmul_nt(normed, model.lm_head);
}

template <typename Scalar>
ForwardTrace<Scalar> forward_full(const Model<Scalar>& model, const TokenBatch& tokens,
                                  const ForwardOptions& options) {
  check_tokens(model, tokens);
  const int L = model.config.layers;
  const bool train = options.phase == Phase::train;
  std::vector<double> probs;
  if (train && options.forced_skip.empty()) {
    if (!options.skip_probs.empty()) {
      if (static_cast<int>(options.skip_probs.size()) != L) {
        throw DimensionError("skip_probs needs one entry per layer");
      }
      probs = options.skip_probs;
    } else {
      for (int l = 1; l <= L; ++l) probs.push_back(schedule_p(l, model.config.schedule));
    }
    if (options.rng == nullptr) throw RangeError("train-phase forward needs a random engine");
  }
  if (!options.forced_skip.empty() && static_cast<int>(options.forced_skip.size()) != L) {
    throw DimensionError("forced_skip needs one entry per layer");
  }

  ForwardTrace<Scalar> trace;
  trace.hidden_per_layer.reserve(static_cast<std::size_t>(L));
  auto h = embedding(model.embedding, std::span<const std::int32_t>(tokens.ids));
  for (int l = 0; l < L; ++l) {
    const auto block = [&](const BasicTensor<Scalar>& in) { return run_block(model, l, in, tokens); };
    bool skipped = false;
    if (train && !options.forced_skip.empty()) {
      skipped = options.forced_skip[static_cast<std::size_t>(l)];
      if (!skipped) h = block(h);
    } else if (train) {
      h = layer_skip_apply<Scalar>(h, block, probs[static_cast<std::size_t>(l)], Phase::train, *options.rng,
                                   &skipped);
    } else {
      h = block(h);
    }
    if (train) trace.skip_mask.push_back(skipped);
    trace.hidden_per_layer.push_back(h);
  }
  trace.logits_final = exit_logits(model, h);
  return trace;
}

template <typename Scalar>
BasicTensor<Scalar> forward_exit_at(const Model<Scalar>& model, const TokenBatch& tokens, int k) {
  if (k < 1 || k > model.config.layers) {
    throw RangeError("exit layer " + std::to_string(k) + " outside 1.." + std::to_string(model.config.layers));
  }
  check_tokens(model, tokens);
  auto h = embedding(model.embedding, std::span<const std::int32_t>(tokens.ids));
  for (int l = 0; l < k; ++l) h = run_block(model, l, h, tokens);
  return exit_logits(model, h);
}

namespace {

template <typename Scalar>
class Decoder {
 public:
  Decoder(const Model<Scalar>& model, int depth)
      : model_(model), depth_(depth), caches_(static_cast<std::size_t>(depth)) {}

  Index length() const { return caches_.empty() ? 0 : caches_.front().length; }

  void reset() {
    for (auto& c : caches_) c.clear();
  }

  // Feeds tokens at the next positions; returns logits of the last one.
  RowMatrix<Scalar> feed(std::span<const std::int32_t> tokens) {
    NoGradGuard<Scalar> no_grad;
    const auto geom = model_.config.geometry();
    auto h = embedding(model_.embedding, tokens);
    for (int l = 0; l < depth_; ++l) {
      const auto& block = model_.blocks[static_cast<std::size_t>(l)];
      h = attention_block_cached(h, block.attention, geom, caches_[static_cast<std::size_t>(l)]);
      h = ffn_block(h, block.ffn, geom);
    }
    const auto last = BasicTensor<Scalar>::from_matrix(h.value().bottomRows(1));
    return exit_logits(model_, last).value();
  }

 private:
  const Model<Scalar>& model_;
  int depth_;
  std::vector<KvCache<Scalar>> caches_;
};

}  // namespace

template <typename Scalar>
GenerationResult generate(const Model<Scalar>& model, std::span<const std::int32_t> prompt, Index n_tokens,
                          std::optional<int> exit_layer) {
  if (n_tokens < 1) throw RangeError("generate: n_tokens must be >= 1");
  if (prompt.empty()) throw RangeError("generate: prompt must hold at least one token");
  const int depth = exit_layer.value_or(model.config.layers);
  if (depth < 1 || depth > model.config.layers) {
    throw RangeError("exit layer " + std::to_string(depth) + " outside 1.." +
                     std::to_string(model.config.layers));
  }
  for (auto id : prompt) {
    if (id < 0 || id >= model.config.vocab_size) throw RangeError("prompt token outside vocabulary");
  }
  const Model<Scalar> run_model = model.is_frozen() ? model : model.frozen();
  const Index window = model.config.max_seq_len;

  GenerationResult result;
  std::vector<std::int32_t> history(prompt.begin(), prompt.end());
  if (static_cast<Index>(history.size()) > window) {
    history.erase(history.begin(), history.end() - window);
    ++result.window_truncations;
  }
  Decoder<Scalar> decoder(run_model, depth);
  // Ingest everything except the last prompt token; the loop feeds it.
  if (history.size() > 1) {
    decoder.feed(std::span<const std::int32_t>(history).first(history.size() - 1));
  }
  std::int32_t next = history.back();

  const auto start = std::chrono::steady_clock::now();
  for (Index step = 0; step < n_tokens; ++step) {
    if (decoder.length() >= window) {
      // Keep the last window-1 tokens as context, then feed `next`.
      decoder.reset();
      const std::size_t keep = static_cast<std::size_t>(window - 1);
      if (keep > 0) decoder.feed(std::span<const std::int32_t>(history).last(keep + 1).first(keep));
      ++result.window_truncations;
    }
    const RowMatrix<Scalar> logits = decoder.feed(std::span<const std::int32_t>(&next, 1));
    ++result.decode_steps;
    next = static_cast<std::int32_t>(argmax_lowest(logits.row(0)));
    result.tokens.push_back(next);
    history.push_back(next);
  }
  result.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

#define BITSKIP_INSTANTIATE_MODEL(S)                                                               \
  template class Model<S>;                                                                         \
  template Model<S> build_model<S>(const ModelConfig&);                                            \
  template ForwardTrace<S> forward_full<S>(const Model<S>&, const TokenBatch&, const ForwardOptions&); \
  template BasicTensor<S> exit_logits<S>(const Model<S>&, const BasicTensor<S>&);                  \
  template BasicTensor<S> forward_exit_at<S>(const Model<S>&, const TokenBatch&, int);             \
  template GenerationResult generate<S>(const Model<S>&, std::span<const std::int32_t>, Index,     \
                                        std::optional<int>);

BITSKIP_INSTANTIATE_MODEL(float)
BITSKIP_INSTANTIATE_MODEL(double)

#undef BITSKIP_INSTANTIATE_MODEL

}  // namespace bitskip
