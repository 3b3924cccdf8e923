#include "bitskip/cli.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "bitskip/checkpoint.hpp"
#include "bitskip/config.hpp"
#include "bitskip/corpus.hpp"
#include "bitskip/errors.hpp"
#include "bitskip/evalbench.hpp"
#include "bitskip/fileio.hpp"

namespace bitskip {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::system_clock;

std::vector<std::int32_t> prompt_ids(const std::string& text) {
  std::vector<std::int32_t> ids{kBos};
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%08lld.ckpt", static_cast<long long>(step));
  return buf;
}

// Loss CSV rows up to and including `step`, header kept.
std::string loss_csv_prefix(const fs::path& path, std::int64_t step) {
  std::istringstream in(read_file(path));
  std::string line;
  std::string out;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      out += line + "\n";
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoll(line.substr(0, comma)) <= step) out += line + "\n";
  }
  return out;
}

// Options shared by the commands that read a trained checkpoint.
struct CheckpointOptions {
  std::string checkpoint;
  std::string variant;
  std::string config;
  std::string corpus;
  std::string run_dir;
  double holdout = 0.1;
  std::string split = "heldout";

  void attach(CLI::App* cmd, bool needs_corpus) {
    cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    cmd->add_option("--variant", variant, "expected variant; mismatch exits with code 2");
    cmd->add_option("--config", config, "config file the checkpoint must match");
    cmd->add_option("--run-dir", run_dir, "directory for reports/ and manifest (default: the checkpoint's run)");
    if (needs_corpus) {
      cmd->add_option("--corpus", corpus, "UTF-8 text file");
      cmd->add_option("--holdout", holdout, "trailing fraction of the corpus used for evaluation");
      cmd->add_option("--split", split, "heldout or all")->check(CLI::IsMember({"heldout", "all"}));
    }
  }

  Checkpoint load(RunConfig& run) const {
    std::optional<ModelConfig> expected;
    if (!config.empty()) {
      std::vector<ConfigEntry> overrides;
      if (!variant.empty()) overrides.emplace_back("run.variant", variant);
      run = load_config(config, overrides);
      expected = run.model;
    }
    auto ckpt = load_checkpoint(checkpoint, expected);
    if (!variant.empty()) {
      const auto want = VariantConfig::parse(variant);
      if (want.name != ckpt.model.config.variant.name) {
        throw VariantMismatchError("checkpoint holds variant " + ckpt.model.config.variant.label() + ", expected " +
                                   want.label());
      }
    }
    if (config.empty()) {
      run.model = ckpt.model.config;
      run.train = TrainConfig::defaults_for(run.model.variant);
      run.train.p_max = run.model.schedule.p_max;
    }
    if (!corpus.empty()) run.corpus = corpus;
    run.holdout = holdout;
    return ckpt;
  }

  fs::path resolve_run_dir() const {
    if (!run_dir.empty()) return run_dir;
    const fs::path parent = fs::path(checkpoint).parent_path();
    if (parent.filename() == "checkpoints") return parent.parent_path();
    return parent.empty() ? fs::path(".") : parent;
  }

  std::vector<std::int32_t> eval_tokens(const RunConfig& run) const {
    if (run.corpus.empty()) throw ConfigError("no corpus given (--corpus or run.corpus)");
    const Corpus corpus = load_corpus(run.corpus);
    if (corpus.ids.size() < 2) throw RangeError("corpus " + run.corpus + " is too small to evaluate");
    if (split == "all") return corpus.ids;
    return split_corpus(corpus, run.holdout).second.ids;
  }
};

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

void print_sweep(std::ostream& out, const ExitSweepReport& report) {
  out << "variant " << report.variant << "\n";
  out << "  exit    ppl         tok/s      ppl_delta%   speed_gain%   ratio\n";
  for (const auto& e : report.entries) {
    out << "  " << std::setw(4) << e.exit_layer << "  " << std::setw(10) << fixed(e.ppl, 4) << "  " << std::setw(10)
        << fixed(e.tok_per_s, 1) << "  " << std::setw(10) << fixed(e.ppl_delta_pct, 2) << "  " << std::setw(12)
        << fixed(e.speed_gain_pct, 2) << "  "
        << (e.quality_speed_ratio ? fixed(*e.quality_speed_ratio, 3) : std::string("NA")) << "\n";
  }
}

struct Invocation {
  std::string command;
  std::vector<std::string> args;
  Clock::time_point started = Clock::now();

  ManifestInfo info(std::vector<ConfigEntry> extra) const {
    return ManifestInfo{command, args, started, Clock::now(), std::move(extra)};
  }
};

// ---- train -----------------------------------------------------------------

struct TrainOptions {
  std::string config;
  std::string variant;
  std::string corpus;
  std::string out;
  std::string name;
  std::string resume;
  std::optional<std::int64_t> steps;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  bool quiet = false;
};

int cmd_train(const TrainOptions& o, const Invocation& inv, std::ostream& out) {
  std::vector<ConfigEntry> overrides;
  if (!o.variant.empty()) overrides.emplace_back("run.variant", o.variant);
  if (!o.corpus.empty()) overrides.emplace_back("run.corpus", o.corpus);
  if (!o.out.empty()) overrides.emplace_back("run.out_dir", o.out);
  if (!o.name.empty()) overrides.emplace_back("run.name", o.name);
  if (o.steps) overrides.emplace_back("train.max_steps", std::to_string(*o.steps));
  if (o.seed) {
    overrides.emplace_back("model.seed", std::to_string(*o.seed));
    overrides.emplace_back("train.seed", std::to_string(*o.seed));
  }
  for (const auto& s : o.sets) overrides.push_back(parse_override(s));
  const RunConfig cfg = load_config(o.config, overrides);
  if (cfg.corpus.empty()) throw ConfigError("no corpus given (--corpus or run.corpus)");

  const Corpus corpus = load_corpus(cfg.corpus);
  if (corpus.ids.empty()) throw RangeError("corpus " + cfg.corpus + " is empty");
  const auto [train_part, heldout] = split_corpus(corpus, cfg.holdout);

  const fs::path run_dir = cfg.run_dir();
  const fs::path loss_path = run_dir / "logs" / "loss.csv";
  std::optional<Trainer> trainer;
  std::string loss_csv;
  if (!o.resume.empty()) {
    auto ckpt = load_checkpoint(o.resume, cfg.model);
    if (!(ckpt.model.config == cfg.model)) throw ConfigError("checkpoint model config differs from the resolved config");
    if (fs::exists(loss_path)) loss_csv = loss_csv_prefix(loss_path, ckpt.step);
    trainer.emplace(std::move(ckpt.model), cfg.train, std::move(ckpt.optimizer));
    out << "resuming " << cfg.run_name() << " at step " << trainer->completed_steps() << "\n";
  } else {
    trainer.emplace(build_model<float>(cfg.model), cfg.train);
  }
  if (loss_csv.empty()) {
    std::ostringstream header;
    write_loss_csv_header(header, cfg.model.layers);
    loss_csv = header.str();
  }
  write_text(run_dir / "config.txt", config_text(cfg));

  out << "train " << cfg.run_name() << ": variant " << cfg.model.variant.label() << ", "
      << trainer->model().parameter_count() << " parameters, " << train_part.ids.size() << " training tokens\n";

  fs::path last_checkpoint;
  TrainCallbacks callbacks;
  callbacks.on_log = [&](const StepRecord& r) {
    std::ostringstream row;
    write_loss_csv_row(row, r);
    loss_csv += row.str();
    if (!o.quiet) {
      out << "step " << r.step << "/" << cfg.train.max_steps << "  loss " << fixed(r.loss.main_loss, 4) << "  total "
          << fixed(r.loss.total, 4) << "  lr " << r.lr << "  grad_norm " << fixed(r.grad_norm, 3) << "\n";
    }
  };
  callbacks.on_checkpoint = [&](const Trainer& t) {
    last_checkpoint = run_dir / "checkpoints" / checkpoint_name(t.completed_steps());
    save_checkpoint(last_checkpoint, t.model(), t.optimizer_state(), t.completed_steps());
    write_text(loss_path, loss_csv);
  };
  if (trainer->completed_steps() < cfg.train.max_steps) train(*trainer, train_part, callbacks);

  const fs::path final_path = run_dir / "checkpoints" / "final.ckpt";
  save_checkpoint(final_path, trainer->model(), trainer->optimizer_state(), trainer->completed_steps());
  write_text(loss_path, loss_csv);

  std::vector<ConfigEntry> extra{{"corpus_bytes", std::to_string(corpus.byte_count)},
                                 {"train_tokens", std::to_string(train_part.ids.size())},
                                 {"heldout_tokens", std::to_string(heldout.ids.size())},
                                 {"steps", std::to_string(trainer->completed_steps())},
                                 {"checkpoint", final_path.string()},
                                 {"loss_csv", loss_path.string()}};
  if (heldout.ids.size() >= 2) {
    const double ppl = perplexity(trainer->model(), heldout.ids);
    out << "heldout_ppl " << fixed(ppl, 4) << "\n";
    extra.emplace_back("heldout_ppl", format_double(ppl));
  }
  out << "checkpoint " << final_path.string() << "\n";
  append_manifest(run_dir, &cfg, inv.info(std::move(extra)));
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const CheckpointOptions& o, std::optional<int> exit_layer, Index window, const Invocation& inv,
             std::ostream& out) {
  RunConfig run;
  const auto ckpt = o.load(run);
  const auto tokens = o.eval_tokens(run);
  const int k = exit_layer.value_or(ckpt.model.config.layers);
  const double ce = mean_cross_entropy(ckpt.model, tokens, k, window);
  const double ppl = std::exp(ce);
  out << "variant " << ckpt.model.config.variant.label() << " exit " << k << " split " << o.split << "\n";
  out << "mean_ce " << fixed(ce, 6) << "\nppl " << fixed(ppl, 4) << "\n";

  const fs::path run_dir = o.resolve_run_dir();
  const fs::path report = run_dir / "reports" / ("eval_exit" + std::to_string(k) + ".csv");
  std::ostringstream csv;
  csv << "variant,exit_layer,split,tokens,mean_ce,ppl\n"
      << ckpt.model.config.variant.label() << ',' << k << ',' << o.split << ',' << tokens.size() << ','
      << format_double(ce) << ',' << format_double(ppl) << '\n';
  write_text(report, csv.str());
  append_manifest(run_dir, &run,
                  inv.info({{"checkpoint", o.checkpoint}, {"report", report.string()}, {"ppl", format_double(ppl)}}));
  return kExitOk;
}

// ---- sweep -----------------------------------------------------------------

struct SweepCliOptions {
  std::vector<int> exits;
  std::string prompt = "Once upon a time";
  Index gen_tokens = 64;
  int repeats = 3;
  Index window = 0;
  std::string output;
};

int cmd_sweep(const CheckpointOptions& o, const SweepCliOptions& s, const Invocation& inv, std::ostream& out) {
  RunConfig run;
  const auto ckpt = o.load(run);
  const auto tokens = o.eval_tokens(run);
  const auto exits = s.exits.empty() ? ckpt.model.config.default_exit_layers() : s.exits;
  SweepOptions options;
  options.prompt = prompt_ids(s.prompt);
  options.gen_tokens = s.gen_tokens;
  options.repeats = s.repeats;
  options.window = s.window;
  const auto report = exit_sweep(ckpt.model, tokens, exits, options);
  print_sweep(out, report);
  out << "note: " << kDeltaSignNote << "\n";
  out << "threads " << Eigen::nbThreads() << "\n";

  const fs::path run_dir = o.resolve_run_dir();
  const fs::path path = s.output.empty() ? run_dir / "reports" / "sweep.csv" : fs::path(s.output);
  std::ostringstream csv;
  write_sweep_csv(csv, std::span<const ExitSweepReport>(&report, 1));
  write_text(path, csv.str());
  out << "sweep_csv " << path.string() << "\n";
  append_manifest(run_dir, &run,
                  inv.info({{"checkpoint", o.checkpoint},
                            {"report", path.string()},
                            {"threads", std::to_string(Eigen::nbThreads())},
                            {"sign_convention", kDeltaSignNote}}));
  return kExitOk;
}

// ---- profile ---------------------------------------------------------------

int cmd_profile(const CheckpointOptions& o, Index probe_batch, Index probe_seq, const std::string& output,
                const Invocation& inv, std::ostream& out) {
  RunConfig run;
  const auto ckpt = o.load(run);
  auto tokens = o.eval_tokens(run);
  const Index seq = probe_seq > 0 ? std::min(probe_seq, ckpt.model.config.max_seq_len)
                                  : std::min<Index>(128, ckpt.model.config.max_seq_len);
  if (probe_batch < 1) throw RangeError("--probe-batch must be >= 1");
  const auto windows = sequential_windows(tokens, seq, probe_batch);
  if (windows.empty()) throw RangeError("probe corpus holds no complete window");
  const auto profile = variance_profile(ckpt.model, windows.front().inputs);
  const auto label = ckpt.model.config.variant.label();
  out << "variant " << label << " probe " << windows.front().inputs.batch << "x" << seq << "\n";
  for (std::size_t l = 0; l < profile.std_per_layer.size(); ++l) {
    out << "  layer " << std::setw(3) << (l + 1) << "  std " << fixed(profile.std_per_layer[l], 6) << "\n";
  }
  const fs::path run_dir = o.resolve_run_dir();
  const fs::path path = output.empty() ? run_dir / "reports" / "variance.csv" : fs::path(output);
  std::ostringstream csv;
  write_variance_csv(csv, label, profile);
  write_text(path, csv.str());
  out << "variance_csv " << path.string() << "\n";
  append_manifest(run_dir, &run, inv.info({{"checkpoint", o.checkpoint}, {"report", path.string()}}));
  return kExitOk;
}

// ---- gen -------------------------------------------------------------------

int cmd_gen(const CheckpointOptions& o, const std::string& prompt, Index n, std::optional<int> exit_layer, int repeats,
            const Invocation& inv, std::ostream& out) {
  RunConfig run;
  const auto ckpt = o.load(run);
  const auto ids = prompt_ids(prompt);
  const auto frozen = ckpt.model.frozen();
  const auto result = generate(frozen, ids, n, exit_layer);
  double tok_per_s = static_cast<double>(result.tokens.size()) / std::max(result.elapsed_seconds, 1e-12);
  if (repeats >= 3) tok_per_s = throughput(frozen, ids, n, exit_layer, repeats).tok_per_s;

  std::ostringstream id_text;
  for (std::size_t i = 0; i < result.tokens.size(); ++i) id_text << (i ? " " : "") << result.tokens[i];
  out << "text " << prompt << detokenize(result.tokens) << "\n";
  out << "tokens " << id_text.str() << "\n";
  out << "tok_per_s " << fixed(tok_per_s, 1) << "\n";

  const fs::path run_dir = o.resolve_run_dir();
  const fs::path path = run_dir / "reports" / "gen.txt";
  write_text(path, "prompt " + prompt + "\nexit " +
                       std::to_string(exit_layer.value_or(ckpt.model.config.layers)) + "\ntokens " + id_text.str() +
                       "\ntext " + detokenize(result.tokens) + "\n");
  append_manifest(run_dir, &run,
                  inv.info({{"checkpoint", o.checkpoint}, {"tok_per_s", format_double(tok_per_s)},
                            {"report", path.string()}}));
  return kExitOk;
}

// ---- compare ---------------------------------------------------------------

int cmd_compare(const std::vector<std::string>& sweeps, const std::vector<std::string>& variances,
                const std::string& run_dir_opt, const Invocation& inv, std::ostream& out) {
  std::map<std::string, ExitSweepReport> reports;
  for (const auto& path : sweeps) {
    std::istringstream in(read_file(path));
    for (auto& r : read_sweep_csv(in)) {
      const auto name = r.variant;
      if (!reports.emplace(name, std::move(r)).second) {
        throw RangeError("variant " + name + " appears in more than one sweep report");
      }
    }
  }
  const auto rows = compare_variants(reports);
  out << "variant     full_ppl    tok/s      quality  speed  delta@3L/4  viability\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(10) << r.variant << std::right << "  " << std::setw(10) << fixed(r.full_ppl, 4)
        << "  " << std::setw(8) << fixed(r.full_tok_per_s, 1) << "  " << std::setw(7) << r.quality_rank << "  "
        << std::setw(5) << r.speed_rank << "  " << std::setw(10)
        << (r.delta_at_three_quarters ? fixed(*r.delta_at_three_quarters, 2) : std::string("NA")) << "  "
        << r.viability << "\n";
  }
  out << "note: " << kDeltaSignNote << "\n";

  const fs::path run_dir = run_dir_opt.empty() ? fs::path("runs") / "compare" : fs::path(run_dir_opt);
  std::ostringstream csv;
  write_comparison_csv(csv, rows);
  write_text(run_dir / "reports" / "comparison.csv", csv.str());
  std::vector<ConfigEntry> extra{{"report", (run_dir / "reports" / "comparison.csv").string()}};

  if (!variances.empty()) {
    std::map<std::string, VarianceProfile> profiles;
    for (const auto& path : variances) {
      std::istringstream in(read_file(path));
      for (auto& [name, p] : read_variance_csv(in)) profiles[name] = std::move(p);
    }
    std::ostringstream vcsv;
    vcsv << "variant,hadamard,final_layer_std\n";
    out << "final-layer activation std\n";
    for (const auto& [name, p] : profiles) {
      if (p.std_per_layer.empty()) continue;
      const bool hadamard = VariantConfig::parse(name).features.hadamard;
      vcsv << name << ',' << (hadamard ? "true" : "false") << ',' << format_double(p.std_per_layer.back()) << '\n';
      out << "  " << std::left << std::setw(10) << name << std::right << " " << fixed(p.std_per_layer.back(), 6)
          << (hadamard ? "  (Hadamard)" : "") << "\n";
    }
    // The 8-bit twins differ only in the Hadamard rotation.
    if (profiles.count("v1") && profiles.count("v3") && !profiles["v1"].std_per_layer.empty() &&
        !profiles["v3"].std_per_layer.empty()) {
      const bool lower = profiles["v3"].std_per_layer.back() < profiles["v1"].std_per_layer.back();
      out << "hadamard_final_std_lower " << (lower ? "yes" : "no") << " (v3 vs v1, informational)\n";
      extra.emplace_back("hadamard_final_std_lower", lower ? "yes" : "no");
    }
    write_text(run_dir / "reports" / "variance_comparison.csv", vcsv.str());
  }
  append_manifest(run_dir, nullptr, inv.info(std::move(extra)));
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quantized early-exit transformer lab", "bitskip"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "train a variant and write checkpoints and the loss CSV");
  train_cmd->add_option("--config", train_opts.config, "key = value config file");
  train_cmd->add_option("--variant", train_opts.variant, "v1, v2, v3 or baseline");
  train_cmd->add_option("--corpus", train_opts.corpus, "UTF-8 text file");
  train_cmd->add_option("--out", train_opts.out, "output root (run.out_dir)");
  train_cmd->add_option("--name", train_opts.name, "run name (run.name)");
  train_cmd->add_option("--steps", train_opts.steps, "optimizer steps (train.max_steps)");
  train_cmd->add_option("--seed", train_opts.seed, "sets model.seed and train.seed");
  train_cmd->add_option("--resume", train_opts.resume, "continue from this checkpoint");
  train_cmd->add_option("--set", train_opts.sets, "key=value override, repeatable");
  train_cmd->add_flag("--quiet", train_opts.quiet, "no per-step progress lines");

  CheckpointOptions eval_ckpt;
  std::optional<int> eval_exit;
  Index eval_window = 0;
  auto* eval_cmd = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus");
  eval_ckpt.attach(eval_cmd, true);
  eval_cmd->add_option("--exit", eval_exit, "exit layer (default: full model)");
  eval_cmd->add_option("--window", eval_window, "evaluation window (default: max_seq_len)");

  CheckpointOptions sweep_ckpt;
  SweepCliOptions sweep_opts;
  auto* sweep_cmd = app.add_subcommand("sweep", "perplexity and throughput at several exit layers");
  sweep_ckpt.attach(sweep_cmd, true);
  sweep_cmd->add_option("--exits", sweep_opts.exits, "exit layers (default: L/4, L/2, 3L/4, L)")->delimiter(',');
  sweep_cmd->add_option("--prompt", sweep_opts.prompt, "prompt for the throughput runs");
  sweep_cmd->add_option("--gen-tokens", sweep_opts.gen_tokens, "tokens generated per timed run");
  sweep_cmd->add_option("--repeats", sweep_opts.repeats, "timed runs per exit (>= 3)");
  sweep_cmd->add_option("--window", sweep_opts.window, "evaluation window (default: max_seq_len)");
  sweep_cmd->add_option("--output", sweep_opts.output, "CSV path (default: <run>/reports/sweep.csv)");

  CheckpointOptions profile_ckpt;
  Index probe_batch = 4;
  Index probe_seq = 0;
  std::string profile_output;
  auto* profile_cmd = app.add_subcommand("profile", "per-layer activation standard deviation");
  profile_ckpt.attach(profile_cmd, true);
  profile_cmd->add_option("--probe-batch", probe_batch, "probe windows");
  profile_cmd->add_option("--probe-seq", probe_seq, "probe window length (default: min(128, max_seq_len))");
  profile_cmd->add_option("--output", profile_output, "CSV path (default: <run>/reports/variance.csv)");

  CheckpointOptions gen_ckpt;
  std::string gen_prompt = "Once upon a time";
  Index gen_n = 64;
  std::optional<int> gen_exit;
  int gen_repeats = 0;
  auto* gen_cmd = app.add_subcommand("gen", "greedy generation from a prompt");
  gen_ckpt.attach(gen_cmd, false);
  gen_cmd->add_option("--prompt", gen_prompt, "prompt text");
  gen_cmd->add_option("-n,--tokens", gen_n, "tokens to generate");
  gen_cmd->add_option("--exit", gen_exit, "exit layer (default: full model)");
  gen_cmd->add_option("--repeats", gen_repeats, "report the median tok/s of this many timed runs (>= 3)");

  std::vector<std::string> compare_sweeps;
  std::vector<std::string> compare_variances;
  std::string compare_dir;
  auto* compare_cmd = app.add_subcommand("compare", "rank variants from sweep CSVs");
  compare_cmd->add_option("--sweep", compare_sweeps, "sweep CSV, repeatable")->required();
  compare_cmd->add_option("--variance", compare_variances, "variance CSV, repeatable");
  compare_cmd->add_option("--run-dir", compare_dir, "output directory (default: runs/compare)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  Invocation inv;
  inv.args = args;
  try {
    if (train_cmd->parsed()) {
      inv.command = "train";
      return cmd_train(train_opts, inv, out);
    }
    if (eval_cmd->parsed()) {
      inv.command = "eval";
      return cmd_eval(eval_ckpt, eval_exit, eval_window, inv, out);
    }
    if (sweep_cmd->parsed()) {
      inv.command = "sweep";
      return cmd_sweep(sweep_ckpt, sweep_opts, inv, out);
    }
    if (profile_cmd->parsed()) {
      inv.command = "profile";
      return cmd_profile(profile_ckpt, probe_batch, probe_seq, profile_output, inv, out);
    }
    if (gen_cmd->parsed()) {
      inv.command = "gen";
      return cmd_gen(gen_ckpt, gen_prompt, gen_n, gen_exit, gen_repeats, inv, out);
    }
    if (compare_cmd->parsed()) {
      inv.command = "compare";
      return cmd_compare(compare_sweeps, compare_variances, compare_dir, inv, out);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const VariantMismatchError& e) {
    err << "variant mismatch: " << e.what() << "\n";
    return kExitConfig;
  } catch (const RangeError& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace bitskip
