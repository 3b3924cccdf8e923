// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
//
//   bitskip_acceptance <corpus> <workdir> [--steps N]

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bitskip/checkpoint.hpp"
#include "bitskip/cli.hpp"
#include "bitskip/evalbench.hpp"
#include "bitskip/fileio.hpp"
#include "bitskip/hadamard.hpp"
#include "bitskip/quant.hpp"
#include "bitskip/training.hpp"
#include "oracles.hpp"

using namespace bitskip;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path corpus;
  fs::path work;
  std::int64_t steps = 2000;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

int cli(const std::vector<std::string>& args, std::string* captured = nullptr) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (captured != nullptr) *captured = out.str();
  if (code != kExitOk && !err.str().empty()) std::cerr << err.str();
  return code;
}

// ---- 1 ----------------------------------------------------------------------

Outcome hadamard_correctness(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  double matrix_err = 0.0;
  for (Index n = 1; n <= 32; n *= 2) {
    const auto h = oracle::hadamard_matrix(n);
    for (int trial = 0; trial < 8; ++trial) {
      const Vector<double> x = oracle::random_matrix<double>(n, 1, rng);
      matrix_err = std::max(matrix_err, (fht(x) - h * x).cwiseAbs().maxCoeff());
    }
  }
  double inv_err = 0.0, iso_err = 0.0;
  for (Index n = 1; n <= 4096; n *= 2) {
    const Vector<float> x = oracle::random_matrix<float>(n, 1, rng);
    const Vector<float> y = fht(x);
    inv_err = std::max(inv_err, static_cast<double>((fht(y) - x).cwiseAbs().maxCoeff()));
    iso_err = std::max(iso_err, std::abs(static_cast<double>(y.norm()) - x.norm()) / std::max(1.0f, x.norm()));
  }
  const double secs = seconds_since(t0);
  const bool ok = matrix_err <= 1e-5 && inv_err <= 1e-5 && iso_err <= 1e-5 && secs < 5.0;
  return {ok, "matrix err " + fmt(matrix_err) + ", involution err " + fmt(inv_err) + ", isometry err " +
                  fmt(iso_err) + ", " + fmt(secs, 3) + " s"};
}

// ---- 2 ----------------------------------------------------------------------

Outcome quantizer_oracles(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> dim(1, 32);
  std::uniform_real_distribution<double> spread(0.01, 3.0);
  int mismatched = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto w = oracle::random_matrix<float>(dim(rng), dim(rng), rng, spread(rng));
    const auto got = ternary_quantize(w);
    const auto want = oracle::ternary(w);
    bool same = got.alpha == want.alpha;
    for (Index i = 0; i < w.size() && same; ++i) same = got.codes.data()[i] == want.codes[static_cast<std::size_t>(i)];
    mismatched += same ? 0 : 1;
  }
  int bound_violations = 0, idempotence_failures = 0;
  for (int bits : {8, 4}) {
    const double q = bits == 8 ? 127.0 : 7.0;
    for (int trial = 0; trial < 500; ++trial) {
      const auto x = oracle::random_matrix<float>(4, 64, rng, spread(rng));
      const auto out = quantize_activations(x, bits);
      for (Index r = 0; r < x.rows(); ++r) {
        const double s = x.row(r).cwiseAbs().maxCoeff();
        const double err = (out.values.row(r) - x.row(r)).cwiseAbs().maxCoeff();
        if (err > s / q * 0.5 + 1e-6) ++bound_violations;
      }
      const auto again = quantize_activations(out.values, bits);
      if ((again.values - out.values).cwiseAbs().maxCoeff() > 1e-6f) ++idempotence_failures;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = mismatched == 0 && bound_violations == 0 && idempotence_failures == 0 && secs < 10.0;
  return {ok, std::to_string(mismatched) + "/1000 ternary mismatches, " + std::to_string(bound_violations) +
                  " bound violations, " + std::to_string(idempotence_failures) + " idempotence failures, " +
                  fmt(secs, 3) + " s"};
}

// ---- 3 ----------------------------------------------------------------------

ModelConfig toy_config(VariantName v, int layers, Index hidden) {
  ModelConfig c;
  c.layers = layers;
  c.hidden = hidden;
  c.heads = 4;
  c.kv_heads = 1;
  c.ffn_dim = 2 * hidden;
  c.max_seq_len = 64;
  c.schedule = DropoutSchedule{0.5, ScheduleMode::raw, layers};
  c.variant = VariantConfig::of(v);
  c.seed = 99;
  return c;
}

Outcome gradient_integrity(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  auto model = build_model<double>(toy_config(VariantName::baseline, 2, 32));
  // Larger weights than the initializer's so every path carries signal.
  std::mt19937_64 rng(3);
  for (auto& p : model.parameters()) {
    if (p.decay) p.tensor.mutable_value() = oracle::random_matrix<double>(p.tensor.rows(), p.tensor.cols(), rng, 0.2);
  }
  TokenBatch batch{2, 8, {}};
  std::vector<std::int32_t> targets;
  for (int i = 0; i < 16; ++i) {
    batch.ids.push_back(static_cast<std::int32_t>(rng() % kByteVocab));
    targets.push_back(static_cast<std::int32_t>(rng() % kByteVocab));
  }
  std::vector<BasicTensor<double>> params;
  for (auto& p : model.parameters()) {
    p.tensor.set_requires_grad(true);
    params.push_back(p.tensor);
  }
  {
    GradientTape<double> tape;
    const auto trace = forward_full(model, batch);
    tape.backward(early_exit_loss(model, trace, targets, 0.3).total);
  }
  const auto loss = [&] {
    NoGradGuard<double> guard;
    return early_exit_loss(model, forward_full(model, batch), targets, 0.3).breakdown.total;
  };
  const auto fd = oracle::finite_difference_check(params, loss, 24, rng, 1e-5, 1e-3, 1e-9);

  // STE nodes hand the upstream gradient through untouched.
  bool ste_exact = true;
  for (int bits : {4, 8}) {
    auto x = BasicTensor<double>::from_matrix(oracle::random_matrix<double>(3, 16, rng, 3.0), true);
    const auto up = BasicTensor<double>::from_matrix(oracle::random_matrix<double>(3, 16, rng));
    {
      GradientTape<double> tape;
      tape.backward(sum(mul(quantize_activations_ste(x, bits), up)));
    }
    ste_exact = ste_exact && x.grad() == up.value();
  }
  {
    auto w = BasicTensor<double>::from_matrix(oracle::random_matrix<double>(6, 5, rng), true);
    const auto up = BasicTensor<double>::from_matrix(oracle::random_matrix<double>(6, 5, rng));
    {
      GradientTape<double> tape;
      tape.backward(sum(mul(ternary_weight_ste(w), up)));
    }
    ste_exact = ste_exact && w.grad() == up.value();
  }
  const double secs = seconds_since(t0);
  const bool ok = fd.pass_fraction() >= 0.99 && ste_exact && secs < 60.0;
  return {ok, std::to_string(fd.passed) + "/" + std::to_string(fd.checked) + " coordinates within 1e-3 (worst " +
                  fmt(fd.worst, 3) + "), STE exact " + (ste_exact ? "yes" : "no") + ", " + fmt(secs, 3) + " s"};
}

// ---- 4 ----------------------------------------------------------------------

Outcome objective_identity(const Context& ctx) {
  const auto corpus = split_corpus(load_corpus(ctx.corpus), 0.1).first;
  auto cfg = TrainConfig::defaults_for(VariantConfig::of(VariantName::v1));
  cfg.max_steps = 200;
  cfg.warmup_steps = 20;
  cfg.batch_size = 4;
  cfg.grad_accum_steps = 1;
  cfg.seq_len = 32;
  cfg.seed = 4;
  Trainer trainer(build_model<float>(toy_config(VariantName::v1, 4, 64)), cfg);
  const auto log = train(trainer, corpus);
  double worst = 0.0, weight_err = 0.0;
  for (const auto& r : log.records) {
    double expected = r.loss.main_loss;
    for (std::size_t i = 0; i < r.loss.exit_losses.size(); ++i) {
      expected += 0.3 * r.loss.weights[i] * r.loss.exit_losses[i];
    }
    worst = std::max(worst, std::abs(r.loss.total - expected));
    weight_err = std::max(weight_err, std::abs(std::accumulate(r.loss.weights.begin(), r.loss.weights.end(), 0.0) - 1.0));
    if (r.loss.lambda != 0.3) worst = 1.0;
  }
  const bool ok = log.records.size() == 200 && worst <= 1e-5 && weight_err <= 1e-6;
  return {ok, std::to_string(log.records.size()) + " steps, max identity residual " + fmt(worst, 3) +
                  ", max |sum w - 1| " + fmt(weight_err, 3)};
}

// ---- shared runs for 5-9 --------------------------------------------------------

struct Runs {
  fs::path root;
  bool trained = false;
  double v1_ppl = 0.0, baseline_ppl = 0.0, v3_ppl = 0.0;
  double train_seconds = 0.0;
  std::string error;

  fs::path ckpt(const std::string& name) const { return root / name / "checkpoints" / "final.ckpt"; }
};

std::vector<std::string> desk_settings(const Context& ctx) {
  return {"--steps", std::to_string(ctx.steps), "--seed", "1234", "--quiet",
          "--set",   "train.batch_size=2",      "--set",  "train.grad_accum_steps=1",
          "--set",   "train.seq_len=64",        "--set",  "train.log_every=50"};
}

double heldout_ppl(const Context& ctx, const fs::path& ckpt_path) {
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto heldout = split_corpus(load_corpus(ctx.corpus), 0.1).second;
  return perplexity(ckpt.model.frozen(), heldout.ids);
}

Runs& desk_runs(const Context& ctx) {
  static Runs runs;
  static bool attempted = false;
  if (attempted) return runs;
  attempted = true;
  runs.root = ctx.work / "runs";
  fs::remove_all(runs.root);
  const auto t0 = std::chrono::steady_clock::now();
  for (const char* variant : {"v1", "baseline", "v3"}) {
    std::vector<std::string> args{"train", "--variant", variant, "--corpus", ctx.corpus.string(), "--out",
                                  runs.root.string()};
    const auto extra = desk_settings(ctx);
    args.insert(args.end(), extra.begin(), extra.end());
    const auto ts = std::chrono::steady_clock::now();
    if (cli(args) != kExitOk) {
      runs.error = std::string("training ") + variant + " failed";
      return runs;
    }
    std::cout << "  trained " << variant << " in " << fmt(seconds_since(ts), 4) << " s\n" << std::flush;
  }
  runs.train_seconds = seconds_since(t0);
  runs.v1_ppl = heldout_ppl(ctx, runs.ckpt("v1"));
  runs.baseline_ppl = heldout_ppl(ctx, runs.ckpt("baseline"));
  runs.v3_ppl = heldout_ppl(ctx, runs.ckpt("v3"));
  runs.trained = true;
  return runs;
}

// ---- 5 ----------------------------------------------------------------------

Outcome training_smoke(const Context& ctx) {
  const auto& runs = desk_runs(ctx);
  if (!runs.trained) return {false, runs.error};
  const auto cfg = load_checkpoint(runs.ckpt("v1")).model.config;
  const bool shape = cfg.layers == 8 && cfg.hidden == 256;
  const bool ok = shape && runs.v1_ppl <= 52.0 && runs.baseline_ppl <= 52.0;
  return {ok, "held-out ppl v1 " + fmt(runs.v1_ppl) + ", baseline " + fmt(runs.baseline_ppl) + " after " +
                  std::to_string(ctx.steps) + " steps (L=" + std::to_string(cfg.layers) + ", d=" +
                  std::to_string(cfg.hidden) + "), three runs took " + fmt(runs.train_seconds, 4) +
                  " s on " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " hardware threads"};
}

// ---- 6 ----------------------------------------------------------------------

Outcome exit_sweep_mechanics(const Context& ctx) {
  const auto& runs = desk_runs(ctx);
  if (!runs.trained) return {false, runs.error};
  const auto csv = runs.root / "v1" / "reports" / "sweep.csv";
  std::string printed;
  const int code = cli({"sweep", "--checkpoint", runs.ckpt("v1").string(), "--corpus", ctx.corpus.string(),
                        "--repeats", "5", "--gen-tokens", "64", "--output", csv.string()},
                       &printed);
  if (code != kExitOk) return {false, "sweep exited with " + std::to_string(code)};
  std::ifstream in(csv);
  const auto reports = read_sweep_csv(in);
  if (reports.size() != 1) return {false, "sweep CSV holds " + std::to_string(reports.size()) + " variants"};
  const auto& rep = reports.front();
  const int three_q = rep.layers * 3 / 4;
  const ExitSweepEntry* at = nullptr;
  for (const auto& e : rep.entries) {
    if (e.exit_layer == three_q) at = &e;
  }
  if (at == nullptr) return {false, "no row for exit " + std::to_string(three_q)};
  const auto ratio = quality_speed_ratio(26.0, 32.4);
  const bool ratio_ok = ratio && std::abs(*ratio - 0.80) <= 0.005;
  const bool sign_note = printed.find(kDeltaSignNote) != std::string::npos;
  const bool table_mapping = std::abs(ppl_delta_pct(1.18, 1.13) - 4.0) <= 0.5;
  const bool ok = at->speed_gain_pct >= 15.0 && ratio_ok && sign_note && table_mapping;
  return {ok, "exit " + std::to_string(three_q) + "/" + std::to_string(rep.layers) + " speed gain " +
                  fmt(at->speed_gain_pct) + "%, ppl delta " + fmt(at->ppl_delta_pct) + "%; ratio(26.0, 32.4) = " +
                  (ratio ? fmt(*ratio, 4) : std::string("NA")) + "; sign note printed " + (sign_note ? "yes" : "no")};
}

// ---- 7 ----------------------------------------------------------------------

Outcome variance_comparison(const Context& ctx) {
  const auto& runs = desk_runs(ctx);
  if (!runs.trained) return {false, runs.error};
  for (const char* v : {"v1", "v3"}) {
    if (cli({"profile", "--checkpoint", runs.ckpt(v).string(), "--corpus", ctx.corpus.string()}) != kExitOk) {
      return {false, std::string("profile ") + v + " failed"};
    }
  }
  const auto v3_sweep = runs.root / "v3" / "reports" / "sweep.csv";
  if (cli({"sweep", "--checkpoint", runs.ckpt("v3").string(), "--corpus", ctx.corpus.string(), "--output",
           v3_sweep.string()}) != kExitOk) {
    return {false, "sweep v3 failed"};
  }
  const auto cmp_dir = runs.root / "compare";
  std::string printed;
  const int code = cli({"compare", "--sweep", (runs.root / "v1" / "reports" / "sweep.csv").string(), "--sweep",
                        v3_sweep.string(), "--variance", (runs.root / "v1" / "reports" / "variance.csv").string(),
                        "--variance", (runs.root / "v3" / "reports" / "variance.csv").string(), "--run-dir",
                        cmp_dir.string()},
                       &printed);
  if (code != kExitOk) return {false, "compare exited with " + std::to_string(code)};
  const bool artifacts = fs::exists(cmp_dir / "reports" / "comparison.csv") &&
                         fs::exists(cmp_dir / "reports" / "variance_comparison.csv");
  std::string trend = "unknown";
  const auto pos = printed.find("hadamard_final_std_lower ");
  if (pos != std::string::npos) trend = printed.substr(pos + 25, printed.find('\n', pos) - pos - 25);
  return {artifacts, "variance and comparison CSVs written; Hadamard final-layer std lower: " + trend +
                         "; held-out ppl v3 " + fmt(runs.v3_ppl)};
}

// ---- 8 ----------------------------------------------------------------------

Outcome determinism(const Context& ctx) {
  const auto root = ctx.work / "determinism";
  fs::remove_all(root);
  const std::vector<std::string> settings{
      "--variant", "v3",   "--corpus", ctx.corpus.string(), "--out", root.string(), "--steps", "30", "--seed", "77",
      "--quiet",   "--set", "train.batch_size=2", "--set", "train.seq_len=32", "--set", "train.log_every=1",
      "--set",     "train.checkpoint_every=10", "--set", "model.layers=4", "--set", "model.hidden=64",
      "--set",     "model.ffn_dim=128", "--set", "model.heads=4", "--set", "model.kv_heads=1"};
  for (const char* name : {"a", "b"}) {
    std::vector<std::string> args{"train", "--name", name};
    args.insert(args.end(), settings.begin(), settings.end());
    if (cli(args) != kExitOk) return {false, std::string("train ") + name + " failed"};
  }
  bool same = read_file(root / "a" / "logs" / "loss.csv") == read_file(root / "b" / "logs" / "loss.csv");
  int files = 1;
  for (const auto& entry : fs::directory_iterator(root / "a" / "checkpoints")) {
    same = same && read_file(entry.path()) == read_file(root / "b" / "checkpoints" / entry.path().filename());
    ++files;
  }
  std::string gen_a, gen_b;
  for (auto* target : {&gen_a, &gen_b}) {
    std::string out;
    if (cli({"gen", "--checkpoint", (root / "a" / "checkpoints" / "final.ckpt").string(), "--prompt", "The ", "-n",
             "48"},
            &out) != kExitOk) {
      return {false, "gen failed"};
    }
    *target = out.substr(0, out.find("tok_per_s"));
  }
  const bool gen_same = !gen_a.empty() && gen_a == gen_b;
  return {same && gen_same, std::to_string(files) + " artifacts byte-identical: " + (same ? "yes" : "no") +
                                "; gen streams identical: " + (gen_same ? "yes" : "no")};
}

// ---- 9 ----------------------------------------------------------------------

Outcome persistence(const Context& ctx) {
  const auto dir = ctx.work / "persistence";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto cfg = TrainConfig::defaults_for(VariantConfig::of(VariantName::v1));
  cfg.max_steps = 5;
  cfg.warmup_steps = 2;
  cfg.batch_size = 2;
  cfg.grad_accum_steps = 1;
  cfg.seq_len = 32;
  Trainer trainer(build_model<float>(toy_config(VariantName::v1, 4, 64)), cfg);
  train(trainer, split_corpus(load_corpus(ctx.corpus), 0.1).first);

  std::mt19937_64 rng(9);
  TokenBatch probe{2, 24, {}};
  for (int i = 0; i < 48; ++i) probe.ids.push_back(static_cast<std::int32_t>(rng() % kByteVocab));
  const auto before = forward_full(trainer.model(), probe).logits_final.value();
  const auto path = dir / "model.ckpt";
  save_checkpoint(path, trainer.model(), trainer.optimizer_state(), trainer.completed_steps());
  const auto loaded = load_checkpoint(path);
  const auto after = forward_full(loaded.model, probe).logits_final.value();
  const bool identical = before == after;

  const auto bytes = read_file(path);
  auto flipped = bytes;
  flipped[3] = static_cast<char>(flipped[3] ^ 0x5a);
  write_file_atomic(dir / "magic.ckpt", flipped);
  write_file_atomic(dir / "truncated.ckpt", std::string_view(bytes).substr(0, bytes.size() - 100));
  const auto gen = [&](const fs::path& p, const char* variant) {
    std::vector<std::string> args{"gen", "--checkpoint", p.string(), "--prompt", "a", "-n", "2"};
    if (variant != nullptr) {
      args.push_back("--variant");
      args.push_back(variant);
    }
    return cli(args);
  };
  const int magic_code = gen(dir / "magic.ckpt", nullptr);
  const int trunc_code = gen(dir / "truncated.ckpt", nullptr);
  const int mismatch_code = gen(path, "v2");
  const int missing_code = gen(dir / "absent.ckpt", nullptr);
  const bool codes = magic_code == kExitRuntime && trunc_code == kExitRuntime && mismatch_code == kExitConfig &&
                     missing_code == kExitRuntime;
  return {identical && codes, std::string("logits bit-identical: ") + (identical ? "yes" : "no") +
                                  "; exit codes bad magic " + std::to_string(magic_code) + ", truncated " +
                                  std::to_string(trunc_code) + ", variant mismatch " + std::to_string(mismatch_code) +
                                  ", missing " + std::to_string(missing_code)};
}

// ---- 10 ---------------------------------------------------------------------

Outcome exit_equivalence(const Context& ctx) {
  std::mt19937_64 rng(10);
  double worst = 0.0;
  int probes = 0;
  std::vector<Model<float>> models;
  for (auto v : {VariantName::v1, VariantName::v2, VariantName::v3, VariantName::baseline}) {
    models.push_back(build_model<float>(toy_config(v, 4, 64)));
  }
  const auto& runs = desk_runs(ctx);
  if (runs.trained) models.push_back(load_checkpoint(runs.ckpt("v1")).model);
  for (const auto& m : models) {
    for (int trial = 0; trial < 5; ++trial) {
      TokenBatch probe{2, 1 + static_cast<Index>(rng() % 32), {}};
      for (Index i = 0; i < probe.batch * probe.seq; ++i) {
        probe.ids.push_back(static_cast<std::int32_t>(rng() % m.config.vocab_size));
      }
      const auto a = forward_exit_at(m, probe, m.config.layers).value();
      const auto b = forward_full(m, probe).logits_final.value();
      worst = std::max(worst, static_cast<double>((a - b).cwiseAbs().maxCoeff()));
      ++probes;
    }
  }
  return {worst <= 1e-6, std::to_string(probes) + " probes over " + std::to_string(models.size()) +
                             " models, max |diff| " + fmt(worst, 3)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: bitskip_acceptance <corpus> <workdir> [--steps N]\n";
    return 1;
  }
  Context ctx{argv[1], argv[2]};
  for (int i = 3; i + 1 < argc; i += 2) {
    if (std::string(argv[i]) == "--steps") ctx.steps = std::stoll(argv[i + 1]);
  }
  fs::create_directories(ctx.work);

  const std::vector<std::pair<const char*, std::function<Outcome(const Context&)>>> criteria{
      {"hadamard correctness", hadamard_correctness},
      {"quantizer oracles", quantizer_oracles},
      {"gradient integrity", gradient_integrity},
      {"objective identity", objective_identity},
      {"desk-scale training", training_smoke},
      {"exit-sweep mechanics", exit_sweep_mechanics},
      {"variance profiles", variance_comparison},
      {"determinism", determinism},
      {"persistence", persistence},
      {"exit equivalence", exit_equivalence},
  };
  std::vector<std::string> lines;
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::ostringstream line;
    line << "criterion " << (i + 1) << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
         << o.detail << " [" << fmt(seconds_since(t0), 4) << " s]";
    std::cout << line.str() << "\n" << std::flush;
    lines.push_back(line.str());
    failures += o.pass ? 0 : 1;
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l.substr(0, l.find("  ")) << "\n";
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
