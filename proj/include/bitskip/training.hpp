#pragma once

// Early-exit objective, optimizer, learning-rate schedule and the QAT
// training loop.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "bitskip/corpus.hpp"
#include "bitskip/model.hpp"

namespace bitskip {

struct TrainConfig {
  double lr_peak = 6e-4;
  std::int64_t warmup_steps = 1000;
  std::int64_t max_steps = 50000;
  Index batch_size = 16;
  int grad_accum_steps = 4;
  Index seq_len = 128;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  double lambda = 0.3;
  double p_max = 0.5;
  std::uint64_t seed = 1234;
  std::int64_t log_every = 10;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  bool early_exit = true;             // false: phase-1 training (lambda = 0, no layer dropout)

  // Per-variant defaults: the 4-bit variant uses a lower peak rate, a
  // longer warmup and tighter clipping.
  static TrainConfig defaults_for(const VariantConfig& variant);
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct LossBreakdown {
  double main_loss = 0.0;
  std::vector<double> exit_losses;  // layers 1..L-1
  std::vector<double> weights;      // normalized (i+1)/L
  double lambda = 0.0;
  double total = 0.0;

  // total - (main + lambda · Σ w_i · exit_i)
  double identity_residual() const;
};

// w_i = (i+1)/L for i = 1..L-1, normalized to sum to one. Empty for L = 1.
std::vector<double> exit_loss_weights(int layers);

template <typename Scalar>
struct EarlyExitObjective {
  BasicTensor<Scalar> total;  // differentiable
  LossBreakdown breakdown;
};

// main = CE(logits_final); exit_i = CE(head(final_norm(h_i))) for i < L;
// total = main + lambda · Σ w_i exit_i. With lambda = 0 the exit losses are
// evaluated without recording gradients.
template <typename Scalar>
EarlyExitObjective<Scalar> early_exit_loss(const Model<Scalar>& model, const ForwardTrace<Scalar>& trace,
                                           std::span<const std::int32_t> targets, double lambda);

// Mean next-token cross-entropy in nats, padding positions excluded.
template <typename Scalar>
double cross_entropy_loss(const BasicTensor<Scalar>& logits, std::span<const std::int32_t> targets);

// Linear warmup 0 -> lr_peak over warmup_steps, then linear decay to zero at
// max_steps.
double lr_at(std::int64_t step, const TrainConfig& cfg);

// Global L2 norm over all gradients; rescales them to clip_norm when above.
// Returns the norm before clipping.
template <typename Scalar>
double clip_gradients(std::span<const NamedParameter<Scalar>> params, double clip_norm);

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

template <typename Scalar>
struct AdamState {
  std::vector<RowMatrix<Scalar>> m;
  std::vector<RowMatrix<Scalar>> v;
  std::int64_t step = 0;

  static AdamState zeros_like(std::span<const NamedParameter<Scalar>> params);
};

// Decoupled weight decay Adam with bias correction. Decay applies only to
// parameters flagged `decay` (weight matrices, not norm gains). Parameters
// without a gradient buffer are treated as having a zero gradient.
template <typename Scalar>
void adamw_step(std::span<const NamedParameter<Scalar>> params, AdamState<Scalar>& state, double lr,
                double weight_decay);

struct StepRecord {
  std::int64_t step = 0;  // 1-based optimizer step
  double lr = 0.0;
  double grad_norm = 0.0;
  LossBreakdown loss;
  std::vector<bool> skip_mask;
};

struct TrainingLog {
  std::vector<StepRecord> records;
};

// Loss CSV: step, lr, grad_norm, main, total, exit_1..exit_{L-1}.
void write_loss_csv_header(std::ostream& out, int layers);
void write_loss_csv_row(std::ostream& out, const StepRecord& record);

// Shortest decimal text that round-trips the double.
std::string format_double(double value);

// Owns the optimizer state for one model and runs optimizer steps. Every
// random choice of step t (batch windows, layer skips) is derived from
// (seed, t), so a trainer rebuilt from a checkpoint continues identically.
class Trainer {
 public:
  Trainer(Model<float> model, TrainConfig cfg);
  Trainer(Model<float> model, TrainConfig cfg, AdamState<float> state);

  // One optimizer step over batch_size·grad_accum_steps windows.
  StepRecord step(const BatchStream& stream);

  // Same, on an explicit batch and fixed skip mask (empty mask: draw one).
  StepRecord step_on(const Batch& batch, std::vector<bool> skip_mask = {});

  const Model<float>& model() const { return model_; }
  Model<float>& model() { return model_; }
  const AdamState<float>& optimizer_state() const { return state_; }
  std::int64_t completed_steps() const { return state_.step; }
  const TrainConfig& config() const { return cfg_; }

  // Per-layer skip probabilities in effect (zeros for phase-1 training).
  std::vector<double> skip_probabilities() const;
  double effective_lambda() const { return cfg_.early_exit ? cfg_.lambda : 0.0; }

 private:
  Model<float> model_;
  TrainConfig cfg_;
  AdamState<float> state_;
};

struct TrainCallbacks {
  std::function<void(const StepRecord&)> on_log;        // every log_every steps and the last
  std::function<void(const Trainer&)> on_checkpoint;    // every checkpoint_every steps and the last
};

// Runs until cfg.max_steps optimizer steps have completed, starting from the
// trainer's current step. Throws RangeError when the corpus holds fewer
// tokens than one batch.
TrainingLog train(Trainer& trainer, const Corpus& corpus, const TrainCallbacks& callbacks = {});

// Convenience form: fresh optimizer, cfg.early_exit overridden by `early_exit`.
TrainingLog train(Model<float>& model, const Corpus& corpus, TrainConfig cfg, bool early_exit,
                  const TrainCallbacks& callbacks = {});

}  // namespace bitskip
