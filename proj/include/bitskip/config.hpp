#pragma once

// Run configuration: flat `key = value` text, one key per line, `#` starts a
// comment. Resolution order is built-in defaults (chosen by run.variant) <
// config file < command-line overrides, last assignment wins.
//
// Keys:
//   run.variant run.corpus run.out_dir run.name run.holdout
//   model.layers model.hidden model.heads model.kv_heads model.ffn_dim
//   model.vocab_size model.max_seq_len model.schedule_mode model.seed
//   model.norm_eps model.rope_base
//   train.lr_peak train.warmup_steps train.max_steps train.batch_size
//   train.grad_accum_steps train.seq_len train.weight_decay train.clip_norm
//   train.lambda train.p_max train.seed train.log_every
//   train.checkpoint_every train.early_exit

#include <chrono>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bitskip/model.hpp"
#include "bitskip/training.hpp"

namespace bitskip {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string corpus;
  std::string out_dir = "runs";
  std::string name;          // empty: the variant label
  double holdout = 0.1;      // trailing fraction of the corpus kept for evaluation

  std::string run_name() const { return name.empty() ? model.variant.label() : name; }
  std::filesystem::path run_dir() const { return std::filesystem::path(out_dir) / run_name(); }
  void validate() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

using ConfigEntry = std::pair<std::string, std::string>;

// Parses config text into ordered entries; ConfigError on malformed lines.
std::vector<ConfigEntry> parse_config_text(std::string_view text, std::string_view origin = "config");

// "key=value" command-line override.
ConfigEntry parse_override(std::string_view text);

// Applies defaults, then `entries` in order. Unknown keys and values of the
// wrong type raise ConfigError, as does a config violating model or
// training invariants.
RunConfig resolve_config(const std::vector<ConfigEntry>& entries);

// Reads `path` (when non-empty), appends the overrides and resolves.
RunConfig load_config(const std::filesystem::path& path, const std::vector<ConfigEntry>& overrides);

// Every key with its resolved value; resolve_config(parse_config_text(x))
// reproduces the same RunConfig.
std::string config_text(const RunConfig& config);

// Version string baked in at build time.
std::string version_string();

inline constexpr const char* kTokenizerNote =
    "byte-level tokenizer (256 byte ids + BOS/EOS/PAD, vocab 259) used in place of GPT-2 BPE";

struct ManifestInfo {
  std::string command;
  std::vector<std::string> args;
  std::chrono::system_clock::time_point started;
  std::chrono::system_clock::time_point finished;
  std::vector<ConfigEntry> extra;  // command-specific facts (inputs, outputs)
};

// Appends one section describing this invocation to <run_dir>/manifest.txt.
// `config` may be null for commands that do not touch a model.
void append_manifest(const std::filesystem::path& run_dir, const RunConfig* config, const ManifestInfo& info);

std::string iso_timestamp(std::chrono::system_clock::time_point t);

}  // namespace bitskip
