#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

#include "stabpa/encoder.hpp"
#include "stabpa/rng.hpp"

namespace stabpa {

/// Linear base-class head without bias. Row k, normalized, doubles as the
/// source prototype of class k.
struct ClassifierHead {
  Eigen::MatrixXd weight;  // classes x embedding_dim
  double temperature = 1.0;

  int class_count() const { return static_cast<int>(weight.rows()); }
  bool operator==(const ClassifierHead&) const = default;
};

ClassifierHead init_head(int classes, int embedding_dim, std::uint64_t seed);

ParamView parameter_view(ClassifierHead& head);

/// softmax(W u / temperature).
Eigen::VectorXd predict_probs(const ClassifierHead& head, const Eigen::VectorXd& embedding);
/// Row-wise version; rows of `embeddings` are unit vectors.
Eigen::MatrixXd predict_probs_batch(const ClassifierHead& head, const Eigen::MatrixXd& embeddings);

/// Numerically stable softmax of each row.
Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits);

struct CrossEntropyResult {
  double loss = 0.0;                // mean over the batch
  Eigen::MatrixXd grad_embeddings;  // d loss / d embeddings
  Eigen::MatrixXd grad_weight;      // d loss / d W
  int correct = 0;
};

CrossEntropyResult cross_entropy(const ClassifierHead& head, const Eigen::MatrixXd& embeddings,
                                 std::span<const int> labels);

struct PseudoLabel {
  int label = 0;
  double confidence = 0.0;
};

/// argmax and max of lambda * p0 + (1 - lambda) * pt; ties go to the lowest
/// class id.
PseudoLabel interpolate_pseudo_label(const Eigen::VectorXd& frozen_probs, const Eigen::VectorXd& online_probs,
                                     double lambda);

/// Index of the largest entry; ties go to the lowest index.
int argmax(const Eigen::Ref<const Eigen::VectorXd>& v);

struct FrozenClassifier {
  EncoderParams encoder;
  ClassifierHead head;
};

/// Pseudo-labels of the unlabeled target pool.
struct PseudoLabelStore {
  Eigen::MatrixXd frozen_probs;  // p0, one row per target sample
  std::vector<int> labels;
  std::vector<double> confidences;
  std::vector<int> frozen_labels;
  std::vector<int> online_labels;
  int refresh_count = 0;

  std::size_t size() const { return labels.size(); }
  bool operator==(const PseudoLabelStore&) const = default;
};

struct InitialTrainingConfig {
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct InitialTrainingResult {
  FrozenClassifier classifier;
  double final_train_accuracy = 0.0;
};

/// Cross-entropy training of encoder and head on the labeled base set.
InitialTrainingResult train_initial_classifier(const Eigen::MatrixXd& base_features,
                                               std::span<const int> base_labels, EncoderParams encoder,
                                               ClassifierHead head, const InitialTrainingConfig& config);

/// p0 for every unlabeled sample. Labels start at the frozen argmax.
PseudoLabelStore cache_frozen_predictions(const FrozenClassifier& frozen,
                                          const Eigen::MatrixXd& unlabeled_features);

/// Recomputes online predictions with the current model and re-interpolates
/// every label.
void refresh_online_labels(PseudoLabelStore& store, const EncoderParams& encoder,
                           const ClassifierHead& online_head, const Eigen::MatrixXd& unlabeled_features,
                           double lambda);

}  // namespace stabpa
