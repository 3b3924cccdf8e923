#include "bitskip/training.hpp"

#include <charconv>
#include <cmath>
#include <ostream>

namespace bitskip {

TrainConfig TrainConfig::defaults_for(const VariantConfig& variant) {
  TrainConfig cfg;
  if (variant.features.activation_bits == 4) {
    cfg.lr_peak = 3e-4;
    cfg.warmup_steps = 4000;
    cfg.clip_norm = 0.5;
  }
  return cfg;
}

void TrainConfig::validate() const {
  if (!(lr_peak > 0.0)) throw ConfigError("train.lr_peak must be positive");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
  if (max_steps < 1) throw ConfigError("train.max_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (grad_accum_steps < 1) throw ConfigError("train.grad_accum_steps must be >= 1");
  if (seq_len < 1) throw ConfigError("train.seq_len must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be positive");
  if (lambda < 0.0) throw ConfigError("train.lambda must be >= 0");
  if (p_max < 0.0 || p_max > 1.0) throw ConfigError("train.p_max must lie in [0, 1]");
  if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
}

double LossBreakdown::identity_residual() const {
  double weighted = 0.0;
  for (std::size_t i = 0; i < exit_losses.size(); ++i) weighted += weights[i] * exit_losses[i];
  return total - (main_loss + lambda * weighted);
}

std::vector<double> exit_loss_weights(int layers) {
  if (layers < 1) throw RangeError("exit weights need at least one layer");
  std::vector<double> w;
  double norm = 0.0;
  for (int i = 1; i <= layers - 1; ++i) {
    w.push_back(static_cast<double>(i + 1) / static_cast<double>(layers));
    norm += w.back();
  }
  for (auto& x : w) x /= norm;
  return w;
}

template <typename Scalar>
double cross_entropy_loss(const BasicTensor<Scalar>& logits, std::span<const std::int32_t> targets) {
  NoGradGuard<Scalar> no_grad;
  return static_cast<double>(cross_entropy(logits, targets, kPad).item());
}

template <typename Scalar>
EarlyExitObjective<Scalar> early_exit_loss(const Model<Scalar>& model, const ForwardTrace<Scalar>& trace,
                                           std::span<const std::int32_t> targets, double lambda) {
  const int L = model.config.layers;
  if (static_cast<int>(trace.hidden_per_layer.size()) != L) {
    throw DimensionError("trace holds " + std::to_string(trace.hidden_per_layer.size()) +
                         " hidden states for " + std::to_string(L) + " layers");
  }
  if (static_cast<Index>(targets.size()) != trace.logits_final.rows()) {
    throw DimensionError("target count does not match the traced positions");
  }
  EarlyExitObjective<Scalar> out;
  out.breakdown.lambda = lambda;
  out.breakdown.weights = exit_loss_weights(L);
  const auto main = cross_entropy(trace.logits_final, targets, kPad);
  out.breakdown.main_loss = static_cast<double>(main.item());

  BasicTensor<Scalar> total = main;
  for (int i = 1; i <= L - 1; ++i) {
    const auto& h = trace.hidden_per_layer[static_cast<std::size_t>(i - 1)];
    const double w = out.breakdown.weights[static_cast<std::size_t>(i - 1)];
    if (lambda == 0.0) {
      NoGradGuard<Scalar> no_grad;
      out.breakdown.exit_losses.push_back(
          static_cast<double>(cross_entropy(exit_logits(model, h), targets, kPad).item()));
      continue;
    }
    const auto ce = cross_entropy(exit_logits(model, h), targets, kPad);
    out.breakdown.exit_losses.push_back(static_cast<double>(ce.item()));
    total = add(total, scale(ce, static_cast<Scalar>(lambda * w)));
  }
  out.total = total;
  out.breakdown.total = static_cast<double>(total.item());
  return out;
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.max_steps) throw RangeError("lr_at: step outside 0..max_steps");
  if (step < cfg.warmup_steps) {
    return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const auto decay_span = cfg.max_steps - cfg.warmup_steps;
  if (decay_span <= 0) return cfg.lr_peak;
  return cfg.lr_peak * static_cast<double>(cfg.max_steps - step) / static_cast<double>(decay_span);
}

template <typename Scalar>
double clip_gradients(std::span<const NamedParameter<Scalar>> params, double clip_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    sq += p.tensor.grad().template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > clip_norm && norm > 0.0) {
    const auto factor = static_cast<Scalar>(clip_norm / norm);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      auto t = p.tensor;
      t.mutable_grad() *= factor;
    }
  }
  return norm;
}

template <typename Scalar>
AdamState<Scalar> AdamState<Scalar>::zeros_like(std::span<const NamedParameter<Scalar>> params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.push_back(RowMatrix<Scalar>::Zero(p.tensor.rows(), p.tensor.cols()));
    state.v.push_back(RowMatrix<Scalar>::Zero(p.tensor.rows(), p.tensor.cols()));
  }
  return state;
}

template <typename Scalar>
void adamw_step(std::span<const NamedParameter<Scalar>> params, AdamState<Scalar>& state, double lr,
                double weight_decay) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("optimizer state does not match the parameter list");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(kAdamBeta1);
  const auto b2 = static_cast<Scalar>(kAdamBeta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.rows() != t.rows() || m.cols() != t.cols() || v.rows() != t.rows() || v.cols() != t.cols()) {
      throw DimensionError("optimizer moments for " + params[i].name + " have the wrong shape");
    }
    auto& theta = t.mutable_value();
    if (params[i].decay && weight_decay != 0.0) theta *= static_cast<Scalar>(1.0 - lr * weight_decay);
    if (t.has_grad()) {
      const auto& g = t.grad();
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
    } else {
      m *= b1;
      v *= b2;
    }
    const auto step_size = static_cast<Scalar>(lr / bc1);
    const auto inv_bc2 = static_cast<Scalar>(1.0 / bc2);
    const auto eps = static_cast<Scalar>(kAdamEps);
    theta.array() -= step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
  }
}

// ---- CSV ------------------------------------------------------------------

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

void write_loss_csv_header(std::ostream& out, int layers) {
  out << "step,lr,grad_norm,main,total";
  for (int i = 1; i <= layers - 1; ++i) out << ",exit_" << i;
  out << '\n';
}

void write_loss_csv_row(std::ostream& out, const StepRecord& r) {
  out << r.step << ',' << format_double(r.lr) << ',' << format_double(r.grad_norm) << ','
      << format_double(r.loss.main_loss) << ',' << format_double(r.loss.total);
  for (double e : r.loss.exit_losses) out << ',' << format_double(e);
  out << '\n';
}

// ---- Trainer --------------------------------------------------------------

Trainer::Trainer(Model<float> model, TrainConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto params = model_.parameters();
  state_ = AdamState<float>::zeros_like(params);
}

Trainer::Trainer(Model<float> model, TrainConfig cfg, AdamState<float> state)
    : model_(std::move(model)), cfg_(std::move(cfg)), state_(std::move(state)) {
  cfg_.validate();
  if (state_.m.size() != model_.parameters().size()) {
    throw DimensionError("optimizer state does not match the model's parameters");
  }
}

std::vector<double> Trainer::skip_probabilities() const {
  const int L = model_.config.layers;
  std::vector<double> probs(static_cast<std::size_t>(L), 0.0);
  if (!cfg_.early_exit) return probs;
  DropoutSchedule schedule = model_.config.schedule;
  schedule.p_max = cfg_.p_max;
  for (int l = 1; l <= L; ++l) probs[static_cast<std::size_t>(l - 1)] = schedule_p(l, schedule);
  return probs;
}

StepRecord Trainer::step(const BatchStream& stream) {
  return step_on(stream.at(static_cast<std::uint64_t>(state_.step)));
}

StepRecord Trainer::step_on(const Batch& batch, std::vector<bool> skip_mask) {
  const int L = model_.config.layers;
  const std::int64_t t = state_.step + 1;
  if (t > cfg_.max_steps) throw RangeError("training already reached max_steps");
  if (skip_mask.empty()) {
    auto rng = step_engine(cfg_.seed, static_cast<std::uint64_t>(state_.step), 2);
    for (double p : skip_probabilities()) skip_mask.push_back(draw_skip(p, rng));
  }
  if (static_cast<int>(skip_mask.size()) != L) throw DimensionError("skip mask needs one entry per layer");
  const Index accum = cfg_.grad_accum_steps;
  if (batch.inputs.batch % accum != 0) {
    throw DimensionError("batch of " + std::to_string(batch.inputs.batch) + " rows cannot be split into " +
                         std::to_string(accum) + " micro-batches");
  }
  const Index micro = batch.inputs.batch / accum;
  const double lambda = effective_lambda();

  model_.zero_grad();
  StepRecord record;
  record.step = t;
  record.skip_mask = skip_mask;
  record.loss.lambda = lambda;
  for (Index a = 0; a < accum; ++a) {
    const Batch part = accum == 1 ? batch : batch.slice(a * micro, micro);
    GradientTape<float> tape;
    ForwardOptions options;
    options.phase = Phase::train;
    options.forced_skip = skip_mask;
    const auto trace = forward_full(model_, part.inputs, options);
    auto objective = early_exit_loss(model_, trace, part.targets, lambda);
    tape.backward(scale(objective.total, 1.0f / static_cast<float>(accum)));

    const auto& b = objective.breakdown;
    const double share = 1.0 / static_cast<double>(accum);
    record.loss.main_loss += b.main_loss * share;
    record.loss.total += b.total * share;
    if (record.loss.exit_losses.empty()) {
      record.loss.exit_losses.assign(b.exit_losses.size(), 0.0);
      record.loss.weights = b.weights;
    }
    for (std::size_t i = 0; i < b.exit_losses.size(); ++i) record.loss.exit_losses[i] += b.exit_losses[i] * share;
  }

  const auto params = model_.parameters();
  const std::span<const NamedParameter<float>> view(params);
  record.grad_norm = clip_gradients(view, cfg_.clip_norm);
  record.lr = lr_at(t, cfg_);
  adamw_step(view, state_, record.lr, cfg_.weight_decay);
  return record;
}

TrainingLog train(Trainer& trainer, const Corpus& corpus, const TrainCallbacks& callbacks) {
  const auto& cfg = trainer.config();
  if (static_cast<Index>(trainer.model().config.max_seq_len) < cfg.seq_len) {
    throw ConfigError("train.seq_len exceeds model.max_seq_len");
  }
  const BatchStream stream(corpus, cfg.batch_size * cfg.grad_accum_steps, cfg.seq_len, cfg.seed);
  TrainingLog log;
  while (trainer.completed_steps() < cfg.max_steps) {
    auto record = trainer.step(stream);
    const bool last = record.step == cfg.max_steps;
    if (callbacks.on_log && (record.step % cfg.log_every == 0 || last)) callbacks.on_log(record);
    if (callbacks.on_checkpoint &&
        (last || (cfg.checkpoint_every > 0 && record.step % cfg.checkpoint_every == 0))) {
      callbacks.on_checkpoint(trainer);
    }
    log.records.push_back(std::move(record));
  }
  return log;
}

TrainingLog train(Model<float>& model, const Corpus& corpus, TrainConfig cfg, bool early_exit,
                  const TrainCallbacks& callbacks) {
  cfg.early_exit = early_exit;
  Trainer trainer(model, std::move(cfg));
  return train(trainer, corpus, callbacks);
}

#define BITSKIP_INSTANTIATE_TRAINING(S)                                                            \
  template EarlyExitObjective<S> early_exit_loss<S>(const Model<S>&, const ForwardTrace<S>&,       \
                                                    std::span<const std::int32_t>, double);        \
  template double cross_entropy_loss<S>(const BasicTensor<S>&, std::span<const std::int32_t>);     \
  template double clip_gradients<S>(std::span<const NamedParameter<S>>, double);                   \
  template struct AdamState<S>;                                                                    \
  template void adamw_step<S>(std::span<const NamedParameter<S>>, AdamState<S>&, double, double);

BITSKIP_INSTANTIATE_TRAINING(float)
BITSKIP_INSTANTIATE_TRAINING(double)

#undef BITSKIP_INSTANTIATE_TRAINING

}  // namespace bitskip
