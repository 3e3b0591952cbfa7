#pragma once

#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <string>
#include <vector>

#include "stabpa/config.hpp"

namespace stabpa {

/// Record of one command invocation, written as run_manifest.json at the
/// end of the run.
struct RunManifest {
  std::string command;
  std::string config_text;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string build_id;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
  double wall_clock_seconds = 0.0;
};

nlohmann::json to_json(const RunManifest& manifest);
RunManifest run_manifest_from_json(const nlohmann::json& j);

inline constexpr const char* kRunManifestFile = "run_manifest.json";
inline constexpr const char* kCheckpointFile = "checkpoint.json";
inline constexpr const char* kMetricsFile = "metrics.csv";

std::string build_id();

/// Entry point of the `stabpa` executable. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stabpa
