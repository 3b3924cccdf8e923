#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "bitskip/evalbench.hpp"
#include "oracles.hpp"

using namespace bitskip;

namespace {

ModelConfig small_model(VariantName v, int layers = 4) {
  ModelConfig c;
  c.layers = layers;
  c.hidden = 32;
  c.heads = 4;
  c.kv_heads = 2;
  c.ffn_dim = 64;
  c.vocab_size = kByteVocab;
  c.max_seq_len = 32;
  c.schedule = DropoutSchedule{0.5, ScheduleMode::raw, layers};
  c.variant = VariantConfig::of(v);
  c.seed = 21;
  return c;
}

std::vector<std::int32_t> random_ids(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int32_t> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(static_cast<std::int32_t>(rng() % 256));
  return ids;
}

ExitSweepReport report(const std::string& name, double full_ppl, double q_ppl, double full_tok, double q_tok) {
  return build_sweep_report(name, 4, {{3, q_ppl, q_tok}, {4, full_ppl, full_tok}});
}

}  // namespace

TEST_CASE("delta, gain and ratio arithmetic") {
  CHECK(ppl_delta_pct(1.18, 1.13) == doctest::Approx(4.42).epsilon(1e-3));
  CHECK(std::abs(ppl_delta_pct(1.18, 1.13) - 4.0) <= 0.5);
  CHECK(speed_gain_pct(13.0, 10.0) == doctest::Approx(30.0));
  const auto r = quality_speed_ratio(26.0, 32.4);
  REQUIRE(r.has_value());
  CHECK(std::abs(*r - 0.80) <= 0.005);
  CHECK_FALSE(quality_speed_ratio(5.0, 0.0).has_value());
  CHECK_FALSE(quality_speed_ratio(5.0, -3.0).has_value());
}

TEST_CASE("sweep reports derive the delta columns") {
  const auto rep = build_sweep_report("v1", 4, {{4, 10.0, 100.0}, {2, 12.0, 150.0}, {3, 11.0, 90.0}});
  REQUIRE(rep.entries.size() == 3);
  CHECK(rep.entries[0].exit_layer == 2);
  CHECK(rep.entries[0].ppl_delta_pct == doctest::Approx(20.0));
  CHECK(rep.entries[0].speed_gain_pct == doctest::Approx(50.0));
  CHECK(*rep.entries[0].quality_speed_ratio == doctest::Approx(0.4));
  CHECK_FALSE(rep.entries[1].quality_speed_ratio.has_value());
  CHECK(rep.entries[2].ppl_delta_pct == 0.0);
  CHECK(rep.entries[2].speed_gain_pct == 0.0);

  const auto single = build_sweep_report("v1", 4, {{4, 7.0, 50.0}});
  REQUIRE(single.entries.size() == 1);
  CHECK(single.entries[0].ppl_delta_pct == 0.0);
  CHECK(single.entries[0].speed_gain_pct == 0.0);
  CHECK_FALSE(single.entries[0].quality_speed_ratio.has_value());

  CHECK_THROWS_AS(build_sweep_report("v1", 4, {{2, 7.0, 50.0}}), RangeError);
}

TEST_CASE("sweep CSV round-trips exactly") {
  std::vector<ExitSweepReport> reps{build_sweep_report("v1", 4, {{1, 31.0 / 3.0, 123.456789}, {4, 9.1, 100.1}}),
                                    build_sweep_report("baseline", 4, {{2, 1e-3, 7.0}, {4, 1.0 / 7.0, 9.0}})};
  std::stringstream buf;
  write_sweep_csv(buf, reps);
  const auto text = buf.str();
  CHECK(text.rfind("variant,exit_layer,ppl,tok_per_s,ppl_delta_pct,speed_gain_pct,ratio\n", 0) == 0);
  CHECK(text.find("NA") != std::string::npos);
  const auto back = read_sweep_csv(buf);
  REQUIRE(back.size() == 2);
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(back[r].variant == reps[r].variant);
    CHECK(back[r].layers == 4);
    REQUIRE(back[r].entries.size() == reps[r].entries.size());
    for (std::size_t i = 0; i < back[r].entries.size(); ++i) {
      const auto& a = back[r].entries[i];
      const auto& b = reps[r].entries[i];
      CHECK(a.exit_layer == b.exit_layer);
      CHECK(a.ppl == b.ppl);
      CHECK(a.tok_per_s == b.tok_per_s);
      CHECK(a.ppl_delta_pct == b.ppl_delta_pct);
      CHECK(a.speed_gain_pct == b.speed_gain_pct);
      CHECK(a.quality_speed_ratio == b.quality_speed_ratio);
    }
  }
  std::istringstream bad("variant,exit_layer,ppl,tok_per_s,ppl_delta_pct,speed_gain_pct,ratio\nv1,x,1,2,3,4,NA\n");
  CHECK_THROWS_AS(read_sweep_csv(bad), FormatError);
}

TEST_CASE("variant comparison") {
  std::map<std::string, ExitSweepReport> reps;
  reps["v1"] = report("v1", 20.0, 20.8, 100.0, 130.0);       // +4%
  reps["v2"] = report("v2", 30.0, 44.49, 110.0, 140.0);      // +48.3%
  reps["baseline"] = report("baseline", 15.0, 16.0, 90.0, 120.0);
  const auto rows = compare_variants(reps);
  REQUIRE(rows.size() == 3);
  std::map<std::string, VariantRanking> by;
  for (const auto& r : rows) by[r.variant] = r;
  CHECK(by["baseline"].quality_rank == 1);
  CHECK(by["v1"].quality_rank == 2);
  CHECK(by["v2"].quality_rank == 3);
  CHECK(by["v2"].speed_rank == 1);
  CHECK(by["v1"].speed_rank == 2);
  CHECK(by["baseline"].speed_rank == 3);
  CHECK(*by["v1"].delta_at_three_quarters == doctest::Approx(4.0));
  CHECK(by["v1"].viability == "excellent");
  CHECK(*by["v2"].delta_at_three_quarters == doctest::Approx(48.3));
  CHECK(by["v2"].viability == "poor");

  // Equal perplexity: the faster variant ranks first on quality too.
  std::map<std::string, ExitSweepReport> tie;
  tie["a"] = report("a", 10.0, 10.5, 50.0, 60.0);
  tie["b"] = report("b", 10.0, 10.5, 80.0, 90.0);
  std::map<std::string, VariantRanking> t;
  for (const auto& r : compare_variants(tie)) t[r.variant] = r;
  CHECK(t["b"].quality_rank == 1);
  CHECK(t["a"].quality_rank == 2);

  std::map<std::string, ExitSweepReport> one;
  one["a"] = reps["v1"];
  CHECK_THROWS(compare_variants(one));

  std::ostringstream out;
  write_comparison_csv(out, rows);
  CHECK(out.str().rfind("variant,full_ppl,full_tok_per_s,quality_rank,speed_rank,delta_at_3q_pct,viability\n", 0) ==
        0);
}

TEST_CASE("median") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK(median({5.0}) == 5.0);
}

TEST_CASE("an untrained model has near-uniform perplexity") {
  const auto m = build_model<float>(small_model(VariantName::v1));
  const auto ids = random_ids(600, 1);
  const double ppl = perplexity(m, ids);
  CHECK(ppl > 0.9 * kByteVocab);
  CHECK(ppl < 1.1 * kByteVocab);
  CHECK(std::log(ppl) == doctest::Approx(mean_cross_entropy(m, ids)).epsilon(1e-12));
  const double early = perplexity(m, ids, 2);
  CHECK(std::isfinite(early));
}

TEST_CASE("perplexity agrees with a direct cross-entropy oracle") {
  const auto m = build_model<float>(small_model(VariantName::baseline, 2));
  const auto ids = random_ids(40, 2);
  // Window 16: 39 predictions across three windows, the last one padded.
  double total = 0.0;
  int count = 0;
  for (std::size_t start = 0; start + 1 < ids.size(); start += 16) {
    const std::size_t len = std::min<std::size_t>(16, ids.size() - 1 - start);
    const std::vector<std::int32_t> in(ids.begin() + static_cast<long>(start),
                                       ids.begin() + static_cast<long>(start + len));
    const std::vector<std::int32_t> tgt(ids.begin() + static_cast<long>(start + 1),
                                        ids.begin() + static_cast<long>(start + 1 + len));
    const auto logits = forward_full(m, TokenBatch::single(in)).logits_final.value();
    total += oracle::cross_entropy(logits, tgt) * static_cast<double>(len);
    count += static_cast<int>(len);
  }
  CHECK(mean_cross_entropy(m, ids, std::nullopt, 16) == doctest::Approx(total / count).epsilon(1e-5));
}

TEST_CASE("variance profile") {
  const auto m = build_model<float>(small_model(VariantName::v3));
  const auto ids = random_ids(32, 3);
  const TokenBatch probe{2, 16, ids};
  const auto prof = variance_profile(m, probe);
  REQUIRE(prof.std_per_layer.size() == 4);
  for (double s : prof.std_per_layer) CHECK(s > 0.0);

  // Population std of the trace, computed directly.
  const auto trace = forward_full(m, probe);
  for (std::size_t l = 0; l < 4; ++l) {
    const auto& h = trace.hidden_per_layer[l].value();
    double mean = 0.0;
    for (Index i = 0; i < h.size(); ++i) mean += h.data()[i];
    mean /= static_cast<double>(h.size());
    double var = 0.0;
    for (Index i = 0; i < h.size(); ++i) var += (h.data()[i] - mean) * (h.data()[i] - mean);
    CHECK(prof.std_per_layer[l] == doctest::Approx(std::sqrt(var / static_cast<double>(h.size()))).epsilon(1e-6));
  }

  std::stringstream buf;
  write_variance_csv(buf, "v3", prof);
  write_variance_csv(buf, "v1", VarianceProfile{{0.5, 0.25}});
  // Only the first header line is expected; strip repeated headers.
  std::string text = buf.str();
  const std::string header = "variant,layer,std\n";
  CHECK(text.rfind(header, 0) == 0);
  std::string merged = header;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line + "\n" != header) merged += line + "\n";
  }
  std::istringstream in(merged);
  const auto back = read_variance_csv(in);
  REQUIRE(back.size() == 2);
  CHECK(back.at("v3").std_per_layer == prof.std_per_layer);
  CHECK(back.at("v1").std_per_layer == std::vector<double>{0.5, 0.25});
}

TEST_CASE("a skipped block leaves the spread unchanged") {
  // With zero-gain norms every block is the identity, so each layer's std
  // equals the embedding's.
  auto m = build_model<float>(small_model(VariantName::baseline, 3));
  for (auto& b : m.blocks) {
    b.attention.norm_gain.mutable_value().setZero();
    b.ffn.norm_gain.mutable_value().setZero();
  }
  const auto ids = random_ids(16, 4);
  const auto prof = variance_profile(m, TokenBatch{1, 16, ids});
  const auto emb = embedding(m.embedding, std::span<const std::int32_t>(ids)).value();
  const double mean = emb.cast<double>().mean();
  const double sd = std::sqrt((emb.cast<double>().array() - mean).square().mean());
  for (double s : prof.std_per_layer) CHECK(s == doctest::Approx(sd).epsilon(1e-9));
}

TEST_CASE("throughput and sweep plumbing") {
  const auto m = build_model<float>(small_model(VariantName::v1));
  const std::vector<std::int32_t> prompt{kBos, 'a', 'b'};
  const auto t = throughput(m, prompt, 4, std::nullopt, 3);
  CHECK(t.samples.size() == 3);
  CHECK(t.tok_per_s > 0.0);
  CHECK(t.threads >= 1);
  CHECK_THROWS(throughput(m, prompt, 4, std::nullopt, 2));

  SweepOptions opts;
  opts.prompt = prompt;
  opts.gen_tokens = 4;
  const auto rep = exit_sweep(m, random_ids(100, 5), {2, 4}, opts);
  REQUIRE(rep.entries.size() == 2);
  CHECK(rep.layers == 4);
  CHECK(rep.variant == "v1");
  CHECK(rep.entries[1].ppl_delta_pct == 0.0);
}
