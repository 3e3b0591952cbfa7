#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "stabpa/data.hpp"
#include "stabpa/eval.hpp"
#include "stabpa/train.hpp"

namespace stabpa {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a command needs, grouped the way the config file names keys:
/// data.*, train.*, augment.* and eval.*, plus the top-level seed.
struct RunConfig {
  std::uint64_t seed = 0;
  SyntheticConfig data;
  TrainConfig train;
  EvalConfig eval;

  /// Pushes the top-level seed into every section.
  void propagate_seed();
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

struct ConfigKey {
  std::string name;
  std::string help;
};

/// Every recognized key, in print order.
const std::vector<ConfigKey>& config_keys();

/// Sets one key from its textual value. Unknown keys and unparsable values
/// throw ConfigError naming the key.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& config, std::string_view key);

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
/// `include = other.cfg` loads another file (relative to this one) at that
/// point, so later lines override it.
void apply_config_text(RunConfig& config, std::string_view text, std::string_view origin,
                       const std::filesystem::path& base_dir = {});
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// STABPA_<KEY> with dots replaced by underscores, e.g. STABPA_TRAIN_EPOCHS.
std::string env_var_name(std::string_view key);

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

/// Applies every STABPA_* override found by `lookup` (the process
/// environment by default). Returns the keys that were overridden.
std::vector<std::string> apply_env_overrides(RunConfig& config, const EnvLookup& lookup = {});

/// Canonical text: one `key = value` line per key in print order.
std::string format_config(const RunConfig& config);

/// 64-bit FNV-1a of format_config, as 16 hex digits.
std::string config_hash(const RunConfig& config);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace stabpa
