#include "bitskip/evalbench.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "bitskip/training.hpp"

namespace bitskip {

template <typename Scalar>
double mean_cross_entropy(const Model<Scalar>& model, std::span<const std::int32_t> tokens,
                          std::optional<int> exit_layer, Index window, Index windows_per_batch) {
  if (tokens.size() < 2) throw RangeError("perplexity needs a corpus of at least two tokens");
  NoGradGuard<Scalar> no_grad;
  const Model<Scalar> eval_model = model.is_frozen() ? model : model.frozen();
  const Index seq = window > 0 ? window : model.config.max_seq_len;
  const int depth = exit_layer.value_or(model.config.layers);
  double total = 0.0;
  Index counted = 0;
  for (const auto& batch : sequential_windows(tokens, seq, windows_per_batch)) {
    const auto logits = forward_exit_at(eval_model, batch.inputs, depth);
    Index n = 0;
    for (auto t : batch.targets) n += t != kPad ? 1 : 0;
    if (n == 0) continue;
    total += cross_entropy_loss(logits, batch.targets) * static_cast<double>(n);
    counted += n;
  }
  if (counted == 0) throw RangeError("perplexity: no predicted positions");
  return total / static_cast<double>(counted);
}

template <typename Scalar>
double perplexity(const Model<Scalar>& model, std::span<const std::int32_t> tokens, std::optional<int> exit_layer,
                  Index window, Index windows_per_batch) {
  return std::exp(mean_cross_entropy(model, tokens, exit_layer, window, windows_per_batch));
}

double median(std::vector<double> values) {
  if (values.empty()) throw RangeError("median of an empty set");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

template <typename Scalar>
ThroughputResult throughput(const Model<Scalar>& model, std::span<const std::int32_t> prompt, Index n_tokens,
                            std::optional<int> exit_layer, int repeats) {
  if (repeats < 3) throw RangeError("throughput needs at least 3 timed repeats");
  const Model<Scalar> frozen = model.is_frozen() ? model : model.frozen();
  ThroughputResult result;
  result.threads = Eigen::nbThreads();
  result.hardware_threads = std::thread::hardware_concurrency();
  generate(frozen, prompt, n_tokens, exit_layer);  // warm-up
  for (int r = 0; r < repeats; ++r) {
    const auto run = generate(frozen, prompt, n_tokens, exit_layer);
    result.samples.push_back(static_cast<double>(run.tokens.size()) / std::max(run.elapsed_seconds, 1e-12));
  }
  result.tok_per_s = median(result.samples);
  return result;
}

double ppl_delta_pct(double ppl_exit, double ppl_full) { return (ppl_exit / ppl_full - 1.0) * 100.0; }

double speed_gain_pct(double tok_exit, double tok_full) { return (tok_exit / tok_full - 1.0) * 100.0; }

std::optional<double> quality_speed_ratio(double ppl_delta, double speed_gain) {
  if (!(speed_gain > 0.0)) return std::nullopt;
  return ppl_delta / speed_gain;
}

ExitSweepReport build_sweep_report(std::string variant, int layers, std::vector<ExitMeasurement> rows) {
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.exit_layer < b.exit_layer; });
  const auto full = std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r.exit_layer == layers; });
  if (full == rows.end()) throw RangeError("exit sweep lacks the full-model row (layer " + std::to_string(layers) + ")");
  ExitSweepReport report;
  report.variant = std::move(variant);
  report.layers = layers;
  for (const auto& r : rows) {
    ExitSweepEntry e;
    e.exit_layer = r.exit_layer;
    e.ppl = r.ppl;
    e.tok_per_s = r.tok_per_s;
    if (r.exit_layer == layers) {
      e.ppl_delta_pct = 0.0;
      e.speed_gain_pct = 0.0;
    } else {
      e.ppl_delta_pct = ppl_delta_pct(r.ppl, full->ppl);
      e.speed_gain_pct = speed_gain_pct(r.tok_per_s, full->tok_per_s);
    }
    e.quality_speed_ratio = quality_speed_ratio(e.ppl_delta_pct, e.speed_gain_pct);
    report.entries.push_back(e);
  }
  return report;
}

template <typename Scalar>
ExitSweepReport exit_sweep(const Model<Scalar>& model, std::span<const std::int32_t> eval_tokens,
                           std::vector<int> exit_layers, const SweepOptions& options) {
  const int L = model.config.layers;
  std::sort(exit_layers.begin(), exit_layers.end());
  exit_layers.erase(std::unique(exit_layers.begin(), exit_layers.end()), exit_layers.end());
  if (exit_layers.empty() || exit_layers.back() != L) {
    throw RangeError("exit layers must include the final layer " + std::to_string(L));
  }
  if (exit_layers.front() < 1) throw RangeError("exit layers start at 1");
  const Model<Scalar> frozen = model.frozen();
  std::vector<ExitMeasurement> rows;
  for (int k : exit_layers) {
    ExitMeasurement m;
    m.exit_layer = k;
    m.ppl = perplexity(frozen, eval_tokens, k, options.window);
    m.tok_per_s = throughput(frozen, options.prompt, options.gen_tokens, k, options.repeats).tok_per_s;
    rows.push_back(m);
  }
  return build_sweep_report(model.config.variant.label(), L, std::move(rows));
}

void write_sweep_csv(std::ostream& out, std::span<const ExitSweepReport> reports) {
  out << "variant,exit_layer,ppl,tok_per_s,ppl_delta_pct,speed_gain_pct,ratio\n";
  for (const auto& r : reports) {
    for (const auto& e : r.entries) {
      out << r.variant << ',' << e.exit_layer << ',' << format_double(e.ppl) << ',' << format_double(e.tok_per_s)
          << ',' << format_double(e.ppl_delta_pct) << ',' << format_double(e.speed_gain_pct) << ','
          << (e.quality_speed_ratio ? format_double(*e.quality_speed_ratio) : std::string("NA")) << '\n';
    }
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw FormatError("");
    return v;
  } catch (const std::exception&) {
    throw FormatError("cannot parse " + what + " value '" + s + "'");
  }
}

}  // namespace

std::vector<ExitSweepReport> read_sweep_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("sweep CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "variant,exit_layer,ppl,tok_per_s,ppl_delta_pct,speed_gain_pct,ratio") {
    throw FormatError("unexpected sweep CSV header: " + line);
  }
  std::vector<ExitSweepReport> reports;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 7) throw FormatError("sweep CSV row needs 7 fields: " + line);
    ExitSweepEntry e;
    e.exit_layer = static_cast<int>(parse_number(f[1], "exit_layer"));
    e.ppl = parse_number(f[2], "ppl");
    e.tok_per_s = parse_number(f[3], "tok_per_s");
    e.ppl_delta_pct = parse_number(f[4], "ppl_delta_pct");
    e.speed_gain_pct = parse_number(f[5], "speed_gain_pct");
    if (f[6] != "NA") e.quality_speed_ratio = parse_number(f[6], "ratio");
    auto it = std::find_if(reports.begin(), reports.end(), [&](const auto& r) { return r.variant == f[0]; });
    if (it == reports.end()) {
      reports.push_back(ExitSweepReport{f[0], 0, {}});
      it = std::prev(reports.end());
    }
    it->entries.push_back(e);
    it->layers = std::max(it->layers, e.exit_layer);
  }
  return reports;
}

template <typename Scalar>
VarianceProfile variance_profile(const Model<Scalar>& model, const TokenBatch& probe) {
  if (probe.ids.empty()) throw RangeError("variance profile needs a non-empty probe batch");
  NoGradGuard<Scalar> no_grad;
  const auto trace = forward_full(model.is_frozen() ? model : model.frozen(), probe);
  VarianceProfile profile;
  for (const auto& h : trace.hidden_per_layer) {
    const auto values = h.value().template cast<double>();
    const double mean = values.mean();
    const double var = (values.array() - mean).square().mean();
    profile.std_per_layer.push_back(std::sqrt(var));
  }
  return profile;
}

void write_variance_csv(std::ostream& out, const std::string& variant, const VarianceProfile& profile) {
  out << "variant,layer,std\n";
  for (std::size_t l = 0; l < profile.std_per_layer.size(); ++l) {
    out << variant << ',' << (l + 1) << ',' << format_double(profile.std_per_layer[l]) << '\n';
  }
}

std::map<std::string, VarianceProfile> read_variance_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("variance CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "variant,layer,std") throw FormatError("unexpected variance CSV header: " + line);
  std::map<std::string, VarianceProfile> out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 3) throw FormatError("variance CSV row needs 3 fields: " + line);
    auto& profile = out[f[0]];
    const auto layer = static_cast<std::size_t>(parse_number(f[1], "layer"));
    if (layer != profile.std_per_layer.size() + 1) throw FormatError("variance CSV layers out of order: " + line);
    profile.std_per_layer.push_back(parse_number(f[2], "std"));
  }
  return out;
}

std::vector<VariantRanking> compare_variants(const std::map<std::string, ExitSweepReport>& reports) {
  if (reports.size() < 2) throw RangeError("comparison needs at least two variant reports");
  std::set<int> reference;
  for (const auto& e : reports.begin()->second.entries) reference.insert(e.exit_layer);
  std::vector<VariantRanking> rows;
  for (const auto& [name, report] : reports) {
    std::set<int> layers;
    for (const auto& e : report.entries) layers.insert(e.exit_layer);
    if (layers != reference) throw RangeError("variant " + name + " was swept at different exit layers");
    const auto full = std::find_if(report.entries.begin(), report.entries.end(),
                                   [&](const auto& e) { return e.exit_layer == report.layers; });
    if (full == report.entries.end()) throw RangeError("variant " + name + " lacks a full-model row");
    VariantRanking r;
    r.variant = name;
    r.full_ppl = full->ppl;
    r.full_tok_per_s = full->tok_per_s;
    const int three_q = report.layers * 3 / 4;
    const auto q = std::find_if(report.entries.begin(), report.entries.end(),
                                [&](const auto& e) { return e.exit_layer == three_q; });
    if (q != report.entries.end() && three_q >= 1 && three_q < report.layers) {
      r.delta_at_three_quarters = q->ppl_delta_pct;
      r.viability = q->ppl_delta_pct <= kViabilityThresholdPct ? "excellent" : "poor";
    } else {
      r.viability = "n/a";
    }
    rows.push_back(r);
  }

  std::vector<std::size_t> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rows[a].full_tok_per_s > rows[b].full_tok_per_s; });
  for (std::size_t i = 0; i < order.size(); ++i) rows[order[i]].speed_rank = static_cast<int>(i + 1);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (std::abs(rows[a].full_ppl - rows[b].full_ppl) <= 1e-9) return rows[a].speed_rank < rows[b].speed_rank;
    return rows[a].full_ppl < rows[b].full_ppl;
  });
  for (std::size_t i = 0; i < order.size(); ++i) rows[order[i]].quality_rank = static_cast<int>(i + 1);
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.quality_rank < b.quality_rank; });
  return rows;
}

void write_comparison_csv(std::ostream& out, std::span<const VariantRanking> rows) {
  out << "variant,full_ppl,full_tok_per_s,quality_rank,speed_rank,delta_at_3q_pct,viability\n";
  for (const auto& r : rows) {
    out << r.variant << ',' << format_double(r.full_ppl) << ',' << format_double(r.full_tok_per_s) << ','
        << r.quality_rank << ',' << r.speed_rank << ','
        << (r.delta_at_three_quarters ? format_double(*r.delta_at_three_quarters) : std::string("NA")) << ','
        << r.viability << '\n';
  }
}

#define BITSKIP_INSTANTIATE_EVAL(S)                                                                \
  template double perplexity<S>(const Model<S>&, std::span<const std::int32_t>, std::optional<int>, Index, \
                                Index);                                                            \
  template double mean_cross_entropy<S>(const Model<S>&, std::span<const std::int32_t>,            \
                                        std::optional<int>, Index, Index);                         \
  template ThroughputResult throughput<S>(const Model<S>&, std::span<const std::int32_t>, Index,   \
                                          std::optional<int>, int);                                \
  template ExitSweepReport exit_sweep<S>(const Model<S>&, std::span<const std::int32_t>, std::vector<int>, \
                                         const SweepOptions&);                                     \
  template VarianceProfile variance_profile<S>(const Model<S>&, const TokenBatch&);

BITSKIP_INSTANTIATE_EVAL(float)
BITSKIP_INSTANTIATE_EVAL(double)

#undef BITSKIP_INSTANTIATE_EVAL

}  // namespace bitskip
