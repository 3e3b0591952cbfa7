#pragma once

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <stdexcept>
#include <string>

#include "stabpa/train.hpp"

namespace stabpa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string config_text;  // format_config of the run
  std::string config_hash;
  std::string variant;  // "stabpa" or "source-only"
  TrainState state;
  TrainLog log;
  std::optional<EncoderParams> initial_encoder;

  bool operator==(const Checkpoint&) const = default;
};

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_json(const nlohmann::json& j);

nlohmann::json to_json(const EncoderParams& params);
EncoderParams encoder_from_json(const nlohmann::json& j);

nlohmann::json to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Metrics CSV: one row per optimizer step.
std::string metrics_csv(const TrainLog& log);

/// Pseudo-label CSV: one row per unlabeled target sample.
std::string pseudo_label_csv(const PseudoLabelStore& store, const SamplePool& unlabeled);

}  // namespace stabpa
