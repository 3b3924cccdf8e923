#include "bitskip/config.hpp"

#include <algorithm>
#include <charconv>
#include <ctime>
#include <functional>
#include <sstream>

#include "bitskip/errors.hpp"
#include "bitskip/fileio.hpp"

#ifndef BITSKIP_VERSION
#define BITSKIP_VERSION "0.1.0"
#endif

namespace bitskip {

namespace {

std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

[[noreturn]] void type_error(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("key " + key + " expects " + expected + ", got '" + value + "'");
}

template <typename Int>
Int parse_integer(const std::string& key, const std::string& value) {
  Int out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (value.empty() || ec != std::errc() || ptr != end) type_error(key, value, "an integer");
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (value.empty() || ec != std::errc() || ptr != end) type_error(key, value, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  type_error(key, value, "true or false");
}

ScheduleMode parse_schedule_mode(const std::string& key, const std::string& value) {
  if (value == "raw") return ScheduleMode::raw;
  if (value == "sum_normalized") return ScheduleMode::sum_normalized;
  type_error(key, value, "raw or sum_normalized");
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
std::string int_text(T v) {
  return std::to_string(v);
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    const auto add = [&](const char* key, auto set, auto get) { f.push_back(Field{key, set, get}); };
    add("run.variant", [](RunConfig& c, const std::string& v) { c.model.variant = VariantConfig::parse(v); },
        [](const RunConfig& c) { return c.model.variant.label(); });
    add("run.corpus", [](RunConfig& c, const std::string& v) { c.corpus = v; },
        [](const RunConfig& c) { return c.corpus; });
    add("run.out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
        [](const RunConfig& c) { return c.out_dir; });
    add("run.name", [](RunConfig& c, const std::string& v) { c.name = v; },
        [](const RunConfig& c) { return c.name; });
    add("run.holdout", [](RunConfig& c, const std::string& v) { c.holdout = parse_real("run.holdout", v); },
        [](const RunConfig& c) { return format_double(c.holdout); });

    add("model.layers", [](RunConfig& c, const std::string& v) { c.model.layers = parse_integer<int>("model.layers", v); },
        [](const RunConfig& c) { return int_text(c.model.layers); });
    add("model.hidden", [](RunConfig& c, const std::string& v) { c.model.hidden = parse_integer<Index>("model.hidden", v); },
        [](const RunConfig& c) { return int_text(c.model.hidden); });
    add("model.heads", [](RunConfig& c, const std::string& v) { c.model.heads = parse_integer<Index>("model.heads", v); },
        [](const RunConfig& c) { return int_text(c.model.heads); });
    add("model.kv_heads",
        [](RunConfig& c, const std::string& v) { c.model.kv_heads = parse_integer<Index>("model.kv_heads", v); },
        [](const RunConfig& c) { return int_text(c.model.kv_heads); });
    add("model.ffn_dim",
        [](RunConfig& c, const std::string& v) { c.model.ffn_dim = parse_integer<Index>("model.ffn_dim", v); },
        [](const RunConfig& c) { return int_text(c.model.ffn_dim); });
    add("model.vocab_size",
        [](RunConfig& c, const std::string& v) { c.model.vocab_size = parse_integer<Index>("model.vocab_size", v); },
        [](const RunConfig& c) { return int_text(c.model.vocab_size); });
    add("model.max_seq_len",
        [](RunConfig& c, const std::string& v) { c.model.max_seq_len = parse_integer<Index>("model.max_seq_len", v); },
        [](const RunConfig& c) { return int_text(c.model.max_seq_len); });
    add("model.schedule_mode",
        [](RunConfig& c, const std::string& v) { c.model.schedule.mode = parse_schedule_mode("model.schedule_mode", v); },
        [](const RunConfig& c) {
          return std::string(c.model.schedule.mode == ScheduleMode::raw ? "raw" : "sum_normalized");
        });
    add("model.seed",
        [](RunConfig& c, const std::string& v) { c.model.seed = parse_integer<std::uint64_t>("model.seed", v); },
        [](const RunConfig& c) { return int_text(c.model.seed); });
    add("model.norm_eps", [](RunConfig& c, const std::string& v) { c.model.norm_eps = parse_real("model.norm_eps", v); },
        [](const RunConfig& c) { return format_double(c.model.norm_eps); });
    add("model.rope_base",
        [](RunConfig& c, const std::string& v) { c.model.rope_base = parse_real("model.rope_base", v); },
        [](const RunConfig& c) { return format_double(c.model.rope_base); });

    add("train.lr_peak", [](RunConfig& c, const std::string& v) { c.train.lr_peak = parse_real("train.lr_peak", v); },
        [](const RunConfig& c) { return format_double(c.train.lr_peak); });
    add("train.warmup_steps",
        [](RunConfig& c, const std::string& v) {
          c.train.warmup_steps = parse_integer<std::int64_t>("train.warmup_steps", v);
        },
        [](const RunConfig& c) { return int_text(c.train.warmup_steps); });
    add("train.max_steps",
        [](RunConfig& c, const std::string& v) { c.train.max_steps = parse_integer<std::int64_t>("train.max_steps", v); },
        [](const RunConfig& c) { return int_text(c.train.max_steps); });
    add("train.batch_size",
        [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_integer<Index>("train.batch_size", v); },
        [](const RunConfig& c) { return int_text(c.train.batch_size); });
    add("train.grad_accum_steps",
        [](RunConfig& c, const std::string& v) {
          c.train.grad_accum_steps = parse_integer<int>("train.grad_accum_steps", v);
        },
        [](const RunConfig& c) { return int_text(c.train.grad_accum_steps); });
    add("train.seq_len",
        [](RunConfig& c, const std::string& v) { c.train.seq_len = parse_integer<Index>("train.seq_len", v); },
        [](const RunConfig& c) { return int_text(c.train.seq_len); });
    add("train.weight_decay",
        [](RunConfig& c, const std::string& v) { c.train.weight_decay = parse_real("train.weight_decay", v); },
        [](const RunConfig& c) { return format_double(c.train.weight_decay); });
    add("train.clip_norm",
        [](RunConfig& c, const std::string& v) { c.train.clip_norm = parse_real("train.clip_norm", v); },
        [](const RunConfig& c) { return format_double(c.train.clip_norm); });
    add("train.lambda", [](RunConfig& c, const std::string& v) { c.train.lambda = parse_real("train.lambda", v); },
        [](const RunConfig& c) { return format_double(c.train.lambda); });
    add("train.p_max", [](RunConfig& c, const std::string& v) { c.train.p_max = parse_real("train.p_max", v); },
        [](const RunConfig& c) { return format_double(c.train.p_max); });
    add("train.seed",
        [](RunConfig& c, const std::string& v) { c.train.seed = parse_integer<std::uint64_t>("train.seed", v); },
        [](const RunConfig& c) { return int_text(c.train.seed); });
    add("train.log_every",
        [](RunConfig& c, const std::string& v) { c.train.log_every = parse_integer<std::int64_t>("train.log_every", v); },
        [](const RunConfig& c) { return int_text(c.train.log_every); });
    add("train.checkpoint_every",
        [](RunConfig& c, const std::string& v) {
          c.train.checkpoint_every = parse_integer<std::int64_t>("train.checkpoint_every", v);
        },
        [](const RunConfig& c) { return int_text(c.train.checkpoint_every); });
    add("train.early_exit",
        [](RunConfig& c, const std::string& v) { c.train.early_exit = parse_bool("train.early_exit", v); },
        [](const RunConfig& c) { return std::string(c.train.early_exit ? "true" : "false"); });
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  const auto& table = fields();
  const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  return *it;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (model.schedule.p_max != train.p_max) throw ConfigError("model schedule p_max differs from train.p_max");
  if (train.seq_len > model.max_seq_len) throw ConfigError("train.seq_len exceeds model.max_seq_len");
  if (!(holdout > 0.0 && holdout < 1.0)) throw ConfigError("run.holdout must lie strictly between 0 and 1");
  const auto name_text = run_name();
  if (name_text.find('/') != std::string::npos || name_text == "." || name_text == "..") {
    throw ConfigError("run.name must be a plain directory name");
  }
}

std::vector<ConfigEntry> parse_config_text(std::string_view text, std::string_view origin) {
  std::vector<ConfigEntry> entries;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
    entries.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return entries;
}

ConfigEntry parse_override(std::string_view text) {
  const auto entries = parse_config_text(text, "override");
  if (entries.size() != 1) throw ConfigError("override must be a single key=value, got '" + std::string(text) + "'");
  return entries.front();
}

RunConfig resolve_config(const std::vector<ConfigEntry>& entries) {
  RunConfig config;
  for (const auto& [key, value] : entries) {
    if (key == "run.variant") config.model.variant = VariantConfig::parse(value);
  }
  config.train = TrainConfig::defaults_for(config.model.variant);
  for (const auto& [key, value] : entries) find_field(key).set(config, value);
  config.model.schedule.layers = config.model.layers;
  config.model.schedule.p_max = config.train.p_max;
  config.validate();
  return config;
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<ConfigEntry>& overrides) {
  std::vector<ConfigEntry> entries;
  if (!path.empty()) entries = parse_config_text(read_file(path), path.string());
  entries.insert(entries.end(), overrides.begin(), overrides.end());
  return resolve_config(entries);
}

std::string config_text(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

std::string version_string() { return BITSKIP_VERSION; }

std::string iso_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t secs = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void append_manifest(const std::filesystem::path& run_dir, const RunConfig* config, const ManifestInfo& info) {
  const auto path = run_dir / "manifest.txt";
  std::string text;
  if (std::filesystem::exists(path)) text = read_file(path);
  std::ostringstream section;
  if (!text.empty()) section << '\n';
  section << "[" << info.command << "]\n";
  section << "version = " << version_string() << "\n";
  section << "started = " << iso_timestamp(info.started) << "\n";
  section << "finished = " << iso_timestamp(info.finished) << "\n";
  if (config) section << "seed = " << config->model.seed << " (model), " << config->train.seed << " (data)\n";
  section << "tokenizer = " << kTokenizerNote << "\n";
  section << "argv =";
  for (const auto& a : info.args) section << ' ' << a;
  section << "\n";
  for (const auto& [key, value] : info.extra) section << key << " = " << value << "\n";
  if (config) section << "# resolved config\n" << config_text(*config);
  write_file_atomic(path, text + section.str());
}

}  // namespace bitskip
