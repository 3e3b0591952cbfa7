#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <json.hpp>
#include <optional>
#include <span>
#include <vector>

#include "stabpa/data.hpp"
#include "stabpa/encoder.hpp"

namespace stabpa {

struct ProbeConfig {
  int steps = 1000;
  double learning_rate = 1.0;

  bool operator==(const ProbeConfig&) const = default;
};

/// Per-episode multinomial logistic regression head.
struct ProbeHead {
  Eigen::MatrixXd weight;  // way x embedding_dim
  Eigen::VectorXd bias;    // way
  int steps_run = 0;

  Eigen::VectorXd logits(const Eigen::VectorXd& embedding) const;
  int predict(const Eigen::VectorXd& embedding) const;
};

/// Full-batch gradient descent on the mean cross-entropy, from zero
/// weights and bias, for exactly `config.steps` steps.
ProbeHead fit_probe(const Eigen::MatrixXd& support_embeddings, std::span<const int> support_labels, int way,
                    const ProbeConfig& config = {});

struct EvalConfig {
  int episodes = 600;
  int way = 5;
  int shot = 5;
  int queries_per_class = 15;
  std::uint64_t seed = 0;
  ProbeConfig probe;
  /// Chance-level control: permute query labels before scoring.
  bool shuffle_query_labels = false;
  bool diagnostics = true;  // also compute PD and ADR

  bool operator==(const EvalConfig&) const = default;
};

struct EvalReport {
  Situation situation = Situation::SourceTarget;
  int way = 0;
  int shot = 0;
  int episodes = 0;
  int queries_per_class = 0;
  std::uint64_t seed = 0;
  double mean = 0.0;
  double ci = 0.0;  // 1.96 * population std / sqrt(episodes)
  std::vector<double> per_episode;
  std::optional<double> pd;
  std::optional<double> adr_source;
  std::optional<double> adr_target;
  bool normalized_features = true;
  int probe_steps = 0;

  bool operator==(const EvalReport&) const = default;
};

struct MeanCi {
  double mean = 0.0;
  double ci = 0.0;
};

MeanCi mean_and_ci(std::span<const double> values);

/// Episodic evaluation with a frozen encoder.
EvalReport evaluate(const EncoderParams& encoder, const SamplePool& novel_source,
                    const SamplePool& novel_target, Situation situation, const EvalConfig& config);

/// Same protocol on precomputed embeddings (rows aligned with the pools).
EvalReport evaluate_embeddings(const Eigen::MatrixXd& source_embeddings, const SamplePool& novel_source,
                               const Eigen::MatrixXd& target_embeddings, const SamplePool& novel_target,
                               Situation situation, const EvalConfig& config);

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Diagnostics. Encoder overloads use normalized embeddings.

/// Per-class mean rows, ordered by class id.
struct ClassPrototypes {
  std::vector<int> classes;
  Eigen::MatrixXd means;
};

ClassPrototypes class_prototypes(const Eigen::MatrixXd& embeddings, std::span<const int> labels);

/// Mean over classes of |p_k^s - p_k^t|.
double prototype_distance(const Eigen::MatrixXd& source_embeddings, std::span<const int> source_labels,
                          const Eigen::MatrixXd& target_embeddings, std::span<const int> target_labels);
double prototype_distance(const EncoderParams& encoder, const SamplePool& novel_source,
                          const SamplePool& novel_target);

/// |f(x) - p_y| / min_{k != y} |f(x) - p_k| for every sample.
std::vector<double> distance_ratios(const Eigen::MatrixXd& embeddings, std::span<const int> labels);
double average_distance_ratio(const Eigen::MatrixXd& embeddings, std::span<const int> labels);
double average_distance_ratio(const EncoderParams& encoder, const SamplePool& pool);

/// Fraction of samples whose nearest prototype is their own (ties lose).
double nearest_prototype_accuracy(const Eigen::MatrixXd& embeddings, std::span<const int> labels);

}  // namespace stabpa
