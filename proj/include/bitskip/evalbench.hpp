#pragma once

// Perplexity, decoding throughput, exit-layer sweeps, variant comparison and
// per-layer activation spread.
//
// Sign convention: ppl_delta_pct is signed, positive meaning the exit layer's
// perplexity is higher (worse) than the full model's. A table column headed
// "PPL Decrease" that lists -4.0 corresponds to +4.0 here.

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bitskip/corpus.hpp"
#include "bitskip/model.hpp"

namespace bitskip {

inline constexpr const char* kDeltaSignNote =
    "ppl_delta_pct is signed: positive = perplexity increase vs the full model (worse); "
    "a 'PPL Decrease' table entry of -4.0 maps to +4.0 here";

// exp(mean cross-entropy) over non-overlapping windows of max_seq_len (or
// `window` when positive). Uses forward_exit_at when exit_layer is set.
template <typename Scalar>
double perplexity(const Model<Scalar>& model, std::span<const std::int32_t> tokens,
                  std::optional<int> exit_layer = std::nullopt, Index window = 0, Index windows_per_batch = 8);

// Mean cross-entropy (nats) over the same windows perplexity() uses.
template <typename Scalar>
double mean_cross_entropy(const Model<Scalar>& model, std::span<const std::int32_t> tokens,
                          std::optional<int> exit_layer = std::nullopt, Index window = 0,
                          Index windows_per_batch = 8);

struct ThroughputResult {
  double tok_per_s = 0.0;          // median over repeats
  std::vector<double> samples;     // tok/s of each timed repeat
  int threads = 1;
  unsigned hardware_threads = 0;
};

double median(std::vector<double> values);

// One warm-up generation, then `repeats` (>= 3) timed runs.
template <typename Scalar>
ThroughputResult throughput(const Model<Scalar>& model, std::span<const std::int32_t> prompt, Index n_tokens,
                            std::optional<int> exit_layer, int repeats);

struct ExitSweepEntry {
  int exit_layer = 0;
  double ppl = 0.0;
  double tok_per_s = 0.0;
  double ppl_delta_pct = 0.0;
  double speed_gain_pct = 0.0;
  std::optional<double> quality_speed_ratio;  // empty when speed_gain_pct <= 0
};

struct ExitSweepReport {
  std::string variant;
  int layers = 0;
  std::vector<ExitSweepEntry> entries;  // ascending exit layer, last = full model
};

// (ppl_k / ppl_full - 1) · 100
double ppl_delta_pct(double ppl_exit, double ppl_full);
// (tok_k / tok_full - 1) · 100
double speed_gain_pct(double tok_exit, double tok_full);
// delta / gain when gain > 0
std::optional<double> quality_speed_ratio(double ppl_delta, double speed_gain);

struct ExitMeasurement {
  int exit_layer = 0;
  double ppl = 0.0;
  double tok_per_s = 0.0;
};

// Derives the delta columns from raw measurements; throws RangeError when
// the full-model row (exit_layer == layers) is missing.
ExitSweepReport build_sweep_report(std::string variant, int layers, std::vector<ExitMeasurement> rows);

struct SweepOptions {
  std::vector<std::int32_t> prompt;  // throughput prompt
  Index gen_tokens = 64;
  int repeats = 3;
  Index window = 0;
};

template <typename Scalar>
ExitSweepReport exit_sweep(const Model<Scalar>& model, std::span<const std::int32_t> eval_tokens,
                           std::vector<int> exit_layers, const SweepOptions& options);

// variant,exit_layer,ppl,tok_per_s,ppl_delta_pct,speed_gain_pct,ratio
void write_sweep_csv(std::ostream& out, std::span<const ExitSweepReport> reports);
// Groups rows by variant; layers is taken as the largest exit layer.
std::vector<ExitSweepReport> read_sweep_csv(std::istream& in);

struct VarianceProfile {
  std::vector<double> std_per_layer;
};

// Population standard deviation of every element of h_l over the probe.
template <typename Scalar>
VarianceProfile variance_profile(const Model<Scalar>& model, const TokenBatch& probe);

// variant,layer,std
void write_variance_csv(std::ostream& out, const std::string& variant, const VarianceProfile& profile);
// Profiles keyed by variant; layers must appear in order 1..L.
std::map<std::string, VarianceProfile> read_variance_csv(std::istream& in);

inline constexpr double kViabilityThresholdPct = 10.0;

struct VariantRanking {
  std::string variant;
  double full_ppl = 0.0;
  double full_tok_per_s = 0.0;
  int quality_rank = 0;
  int speed_rank = 0;
  std::optional<double> delta_at_three_quarters;
  std::string viability;  // "excellent", "poor" or "n/a"
};

// Quality rank by full-model perplexity (lower first; ties within 1e-9
// broken by speed rank), speed rank by full-model tok/s (higher first).
// Viability: ppl_delta_pct at exit 3L/4 <= 10 is "excellent".
std::vector<VariantRanking> compare_variants(const std::map<std::string, ExitSweepReport>& reports);

// variant,full_ppl,full_tok_per_s,quality_rank,speed_rank,delta_at_3q_pct,viability
void write_comparison_csv(std::ostream& out, std::span<const VariantRanking> rows);

}  // namespace bitskip
