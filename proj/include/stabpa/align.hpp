#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "stabpa/encoder.hpp"
#include "stabpa/pseudo.hpp"

namespace stabpa {

/// Momentum-averaged target prototypes, one row per base class. Rows start
/// at zero and are marked initialized on their first update.
struct PrototypeBank {
  Eigen::MatrixXd target;
  std::vector<std::uint8_t> initialized;
  double momentum = 0.1;

  static PrototypeBank zeros(int classes, int embedding_dim, double momentum);
  int class_count() const { return static_cast<int>(target.rows()); }
  bool operator==(const PrototypeBank&) const = default;
};

/// Rows of the head weight scaled to unit norm. Guarded mode divides by
/// max(|W_k|, 1e-12); strict mode throws on a zero row.
Eigen::MatrixXd source_prototypes(const ClassifierHead& head, NormMode mode = NormMode::Guarded);

/// For every class with at least one sample of confidence > beta:
/// p_k <- m p_k + (1 - m) * mean of those samples. Returns the number of
/// classes touched.
int update_target_prototypes(PrototypeBank& bank, const Eigen::MatrixXd& embeddings,
                             std::span<const int> pseudo_labels, std::span<const double> confidences,
                             double beta);

/// 2 / (1 + exp(-t / t_max)) - 1.
double curriculum_weight(std::int64_t step, std::int64_t max_steps);

struct CurriculumClock {
  std::int64_t step = 0;
  std::int64_t max_steps = 1;

  double weight() const { return curriculum_weight(step, max_steps); }
  void advance() { ++step; }
  bool operator==(const CurriculumClock&) const = default;
};

struct PrototypeLoss {
  double loss = 0.0;
  Eigen::VectorXd grad_embedding;
  Eigen::MatrixXd grad_prototypes;  // zero rows for inactive classes
};

/// -log softmax_q(-|u - p_k|^2 / tau) over the active rows of `prototypes`.
/// An empty `active` mask means every row is active.
PrototypeLoss prototype_softmax_loss(const Eigen::VectorXd& embedding, int positive,
                                     const Eigen::MatrixXd& prototypes, double tau,
                                     std::span<const std::uint8_t> active = {});

/// Source-to-target term against the momentum bank. Uninitialized classes
/// are left out of the softmax; returns nullopt when the positive class
/// itself is uninitialized.
std::optional<PrototypeLoss> loss_s2t(const Eigen::VectorXd& embedding, int label, const PrototypeBank& bank,
                                      double tau = 0.25);

struct SourcePrototypeLoss : PrototypeLoss {
  Eigen::MatrixXd grad_weight;  // through the row normalization of W
};

/// Target-to-source term against the normalized head rows.
SourcePrototypeLoss loss_t2s(const Eigen::VectorXd& embedding, int pseudo_label, const ClassifierHead& head,
                             double tau = 0.1);

/// Pulls d loss / d (normalized rows) back to d loss / d W.
Eigen::MatrixXd row_normalization_backward(const Eigen::MatrixXd& weight,
                                           const Eigen::MatrixXd& grad_normalized);

struct AlignmentSettings {
  bool use_s2t = true;
  bool use_t2s = true;
  double tau_s2t = 0.25;
  double tau_t2s = 0.1;
  double beta = 0.5;
  bool aux_ce = true;
  double aux_ce_weight = 1.0;
};

struct LossReport {
  std::int64_t step = 0;
  double weight = 0.0;    // w(t)
  double loss_s2t = 0.0;  // batch mean; skipped samples count as zero
  double loss_t2s = 0.0;  // (1/|batch|) * sum over confident samples
  double aux_ce = 0.0;
  double total = 0.0;
  int filtered_count = 0;  // target samples with confidence <= beta
  int skipped_source = 0;  // source samples whose class has no target prototype

  bool operator==(const LossReport&) const = default;
};

struct TargetBatchLabels {
  std::span<const int> labels;
  std::span<const double> confidences;
};

struct EmbeddingLossResult {
  LossReport report;
  Eigen::MatrixXd grad_source;  // d total / d source embeddings
  Eigen::MatrixXd grad_target;  // d total / d target embeddings
  Eigen::MatrixXd grad_head;    // d total / d W
};

/// Total batch loss as a function of already-computed embeddings:
///   w * mean_i l_st(source_i) + (1/|T|) sum_j 1(conf_j > beta) l_ts(target_j)
///   + aux_ce_weight * CE(source).
/// Target prototypes are constants here.
EmbeddingLossResult alignment_loss(const Eigen::MatrixXd& source_embeddings,
                                   std::span<const int> source_labels,
                                   const Eigen::MatrixXd& target_embeddings, const TargetBatchLabels& target,
                                   const PrototypeBank& bank, const ClassifierHead& head, double weight,
                                   const AlignmentSettings& settings);

struct BatchLossResult {
  LossReport report;
  EncoderParams grad_encoder;
  Eigen::MatrixXd grad_head;
};

/// Full batch objective on (augmented) raw inputs, with gradients for every
/// encoder parameter and the head weight.
BatchLossResult stabpa_batch_loss(const EncoderParams& encoder, const ClassifierHead& head,
                                  const PrototypeBank& bank, const Eigen::MatrixXd& source_x,
                                  std::span<const int> source_labels, const Eigen::MatrixXd& target_x,
                                  const TargetBatchLabels& target, const CurriculumClock& clock,
                                  const AlignmentSettings& settings);

}  // namespace stabpa
