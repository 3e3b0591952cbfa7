#include "stabpa/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "stabpa/format.hpp"

namespace stabpa {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " +
                    std::string(want));
}

template <typename T>
T parse_integer(std::string_view key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(trim(v.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

std::string fmt(double x) { return format_double(x); }
std::string fmt(bool b) { return b ? "true" : "false"; }
template <typename T>
std::string fmt(T x)
  requires std::is_integral_v<T>
{
  return std::to_string(x);
}

struct Entry {
  const char* name;
  const char* help;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Field accessors for the common scalar types.
template <typename Member>
Entry field(const char* name, const char* help, Member member) {
  using T = std::remove_cvref_t<decltype(std::declval<RunConfig&>().*member)>;
  return {name, help,
          [member](RunConfig& c, std::string_view k, std::string_view v) {
            if constexpr (std::is_same_v<T, bool>)
              c.*member = parse_bool(k, v);
            else if constexpr (std::is_floating_point_v<T>)
              c.*member = parse_double(k, v);
            else
              c.*member = parse_integer<T>(k, v);
          },
          [member](const RunConfig& c) { return fmt(c.*member); }};
}

template <typename Section, typename Member>
Entry nested(const char* name, const char* help, Section section, Member member) {
  using T = std::remove_cvref_t<decltype(std::declval<RunConfig&>().*section.*member)>;
  return {name, help,
          [section, member](RunConfig& c, std::string_view k, std::string_view v) {
            auto& dst = c.*section.*member;
            if constexpr (std::is_same_v<T, bool>)
              dst = parse_bool(k, v);
            else if constexpr (std::is_floating_point_v<T>)
              dst = parse_double(k, v);
            else
              dst = parse_integer<T>(k, v);
          },
          [section, member](const RunConfig& c) { return fmt(c.*section.*member); }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    using R = RunConfig;
    const auto d = &R::data;
    const auto t = &R::train;
    const auto e = &R::eval;
    std::vector<Entry> v{
        field("seed", "master seed; copied into data.seed, train.seed and eval.seed", &R::seed),
        nested("data.base_classes", "number of base classes", d, &SyntheticConfig::base_classes),
        nested("data.validation_classes", "number of validation classes", d,
               &SyntheticConfig::validation_classes),
        nested("data.novel_classes", "number of novel classes", d, &SyntheticConfig::novel_classes),
        nested("data.dim", "input feature dimension", d, &SyntheticConfig::dim),
        nested("data.center_scale", "std of class-center coordinates", d, &SyntheticConfig::center_scale),
        nested("data.center_rank", "dimension of the shared class-center subspace (0 = full)", d,
               &SyntheticConfig::center_rank),
        nested("data.intra_class_std", "per-sample noise std", d, &SyntheticConfig::intra_class_std),
        nested("data.shift_magnitude", "norm of the target-domain shift vector", d,
               &SyntheticConfig::shift_magnitude),
        nested("data.rotation_angle", "target-domain rotation angle (radians) per plane", d,
               &SyntheticConfig::rotation_angle),
        nested("data.samples_per_class", "samples per class and domain", d,
               &SyntheticConfig::samples_per_class),
        nested("data.unlabeled_imbalance", "class imbalance of the unlabeled target set", d,
               &SyntheticConfig::unlabeled_imbalance),
        nested("train.epochs", "main-loop epochs", t, &TrainConfig::epochs),
        nested("train.batch_size", "samples per step, half source and half target", t,
               &TrainConfig::batch_size),
        nested("train.learning_rate", "Adam learning rate", t, &TrainConfig::learning_rate),
        nested("train.tau_s2t", "temperature of the source-to-target loss", t, &TrainConfig::tau_s2t),
        nested("train.tau_t2s", "temperature of the target-to-source loss", t, &TrainConfig::tau_t2s),
        nested("train.beta", "pseudo-label confidence threshold", t, &TrainConfig::beta),
        nested("train.lambda", "weight of the frozen classifier in pseudo-labels", t, &TrainConfig::lambda),
        nested("train.momentum", "target prototype momentum", t, &TrainConfig::momentum),
        nested("train.use_augmentation", "strong augmentation of both batch halves", t,
               &TrainConfig::use_augmentation),
        nested("train.use_s2t", "enable the source-to-target loss", t, &TrainConfig::use_s2t),
        nested("train.use_t2s", "enable the target-to-source loss", t, &TrainConfig::use_t2s),
        nested("train.aux_ce", "cross-entropy on the source half", t, &TrainConfig::aux_ce),
        nested("train.aux_ce_weight", "weight of the cross-entropy term", t, &TrainConfig::aux_ce_weight),
        nested("train.initial_epochs", "epochs of the frozen initial classifier", t,
               &TrainConfig::initial_epochs),
        nested("train.fresh_start", "re-initialize the encoder after the initial classifier", t,
               &TrainConfig::fresh_start),
        {"train.hidden_widths", "comma-separated hidden layer widths",
         [](RunConfig& c, std::string_view k, std::string_view v) {
           std::vector<int> w;
           for (auto item : split_list(v))
             if (!item.empty()) w.push_back(parse_integer<int>(k, item));
           c.train.hidden_widths = std::move(w);
         },
         [](const RunConfig& c) {
           std::string s;
           for (std::size_t i = 0; i < c.train.hidden_widths.size(); ++i)
             s += (i ? "," : "") + std::to_string(c.train.hidden_widths[i]);
           return s;
         }},
        nested("train.embedding_dim", "encoder output dimension", t, &TrainConfig::embedding_dim),
        nested("train.head_temperature", "classifier logit temperature", t, &TrainConfig::head_temperature),
        nested("train.checkpoint_every", "epochs between checkpoints (0 = final only)", t,
               &TrainConfig::checkpoint_every),
        {"augment.ops", "comma-separated ops: noise, jitter, cutout, scale, fade",
         [](RunConfig& c, std::string_view k, std::string_view v) {
           std::vector<AugmentOp> ops;
           for (auto item : split_list(v)) {
             try {
               ops.push_back(parse_augment_op(item));
             } catch (const std::exception&) {
               bad_value(k, item, "an augmentation op");
             }
           }
           c.train.augment.ops = std::move(ops);
         },
         [](const RunConfig& c) {
           std::string s;
           for (std::size_t i = 0; i < c.train.augment.ops.size(); ++i)
             s += (i ? "," : "") + std::string(to_string(c.train.augment.ops[i]));
           return s;
         }},
        {"augment.ops_per_sample", "ops applied per strong augmentation",
         [](RunConfig& c, std::string_view k, std::string_view v) {
           c.train.augment.ops_per_sample = parse_integer<int>(k, v);
         },
         [](const RunConfig& c) { return fmt(c.train.augment.ops_per_sample); }},
        {"augment.max_magnitude", "upper bound of the per-op magnitude",
         [](RunConfig& c, std::string_view k, std::string_view v) {
           c.train.augment.max_magnitude = parse_double(k, v);
         },
         [](const RunConfig& c) { return fmt(c.train.augment.max_magnitude); }},
        {"augment.feature_scale", "reference scale of the additive ops",
         [](RunConfig& c, std::string_view k, std::string_view v) {
           c.train.augment.feature_scale = parse_double(k, v);
         },
         [](const RunConfig& c) { return fmt(c.train.augment.feature_scale); }},
        {"augment.weak_sigma", "std of weak augmentation, in feature_scale units",
         [](RunConfig& c, std::string_view k, std::string_view v) {
           c.train.augment.weak_sigma = parse_double(k, v);
         },
         [](const RunConfig& c) { return fmt(c.train.augment.weak_sigma); }},
        nested("eval.episodes", "episodes per evaluation", e, &EvalConfig::episodes),
        nested("eval.way", "classes per episode", e, &EvalConfig::way),
        nested("eval.shot", "support samples per class", e, &EvalConfig::shot),
        nested("eval.queries_per_class", "query samples per class", e, &EvalConfig::queries_per_class),
        {"eval.probe_steps", "gradient steps of the linear probe",
         [](RunConfig& c, std::string_view k, std::string_view v) {
           c.eval.probe.steps = parse_integer<int>(k, v);
         },
         [](const RunConfig& c) { return fmt(c.eval.probe.steps); }},
        {"eval.probe_learning_rate", "learning rate of the linear probe",
         [](RunConfig& c, std::string_view k, std::string_view v) {
           c.eval.probe.learning_rate = parse_double(k, v);
         },
         [](const RunConfig& c) { return fmt(c.eval.probe.learning_rate); }},
        nested("eval.diagnostics", "also report PD and ADR", e, &EvalConfig::diagnostics),
    };
    return v;
  }();
  return table;
}

const Entry& find_entry(std::string_view key) {
  for (const auto& e : entries())
    if (key == e.name) return e;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_text(RunConfig& config, std::string_view text, std::string_view origin,
                const std::filesystem::path& base_dir, std::set<std::filesystem::path>& open_files);

void apply_file(RunConfig& config, const std::filesystem::path& path,
                std::set<std::filesystem::path>& open_files) {
  std::error_code ec;
  auto canonical = std::filesystem::weakly_canonical(path, ec);
  if (ec) canonical = path;
  if (!open_files.insert(canonical).second)
    throw ConfigError("config include cycle through " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  apply_text(config, buf.str(), path.string(), path.parent_path(), open_files);
  open_files.erase(canonical);
}

void apply_text(RunConfig& config, std::string_view text, std::string_view origin,
                const std::filesystem::path& base_dir, std::set<std::filesystem::path>& open_files) {
  int line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = std::string(origin) + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": missing key");
    try {
      if (key == "include")
        apply_file(config, base_dir / std::filesystem::path(std::string(value)), open_files);
      else
        find_entry(key).set(config, key, value);
    } catch (const ConfigError& err) {
      throw ConfigError(where + ": " + err.what());
    }
  }
}

}  // namespace

void RunConfig::propagate_seed() {
  data.seed = seed;
  train.seed = seed;
  eval.seed = seed;
}

void RunConfig::validate() const {
  try {
    data.validate();
    train.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (eval.episodes < 1) throw ConfigError("eval.episodes must be >= 1");
  if (eval.way < 2) throw ConfigError("eval.way must be >= 2");
  if (eval.shot < 1 || eval.queries_per_class < 1)
    throw ConfigError("eval.shot and eval.queries_per_class must be >= 1");
  if (eval.probe.steps < 0 || !(eval.probe.learning_rate > 0.0))
    throw ConfigError("eval probe needs steps >= 0 and a positive learning rate");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back({e.name, e.help});
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  find_entry(key).set(config, key, trim(value));
}

std::string get_config_value(const RunConfig& config, std::string_view key) {
  return find_entry(key).get(config);
}

void apply_config_text(RunConfig& config, std::string_view text, std::string_view origin,
                       const std::filesystem::path& base_dir) {
  std::set<std::filesystem::path> open_files;
  apply_text(config, text, origin, base_dir, open_files);
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::set<std::filesystem::path> open_files;
  apply_file(config, path, open_files);
}

std::string env_var_name(std::string_view key) {
  std::string s = "STABPA_";
  for (char c : key) s += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> apply_env_overrides(RunConfig& config, const EnvLookup& lookup) {
  const EnvLookup get = lookup ? lookup : [](const std::string& name) -> std::optional<std::string> {
    const char* v = std::getenv(name.c_str());
    if (!v) return std::nullopt;
    return std::string(v);
  };
  std::vector<std::string> applied;
  for (const auto& e : entries()) {
    const auto name = env_var_name(e.name);
    if (auto v = get(name)) {
      try {
        e.set(config, e.name, trim(*v));
      } catch (const ConfigError& err) {
        throw ConfigError(name + ": " + err.what());
      }
      applied.push_back(e.name);
    }
  }
  return applied;
}

std::string format_config(const RunConfig& config) {
  std::string out;
  for (const auto& e : entries()) {
    out += e.name;
    out += " = ";
    out += e.get(config);
    out += '\n';
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(format_config(config))));
  return buf;
}

}  // namespace stabpa
