#pragma once

#include <Eigen/Dense>
#include <string_view>
#include <vector>

#include "stabpa/rng.hpp"

namespace stabpa {

/// Label-preserving feature-vector transforms. Each takes a magnitude m >= 0;
/// m = 0 leaves the input unchanged.
enum class AugmentOp {
  GaussianNoise,         // x + m * scale * N(0, I)
  MultiplicativeJitter,  // x_i * (1 + m * N(0, 1))
  BlockCutout,           // zero a contiguous run of ceil(m * D) dims
  GlobalScale,           // x * (1 + m * U(-1, 1))
  FadeToMean,            // (1 - min(m, 1)) x + min(m, 1) * domain mean
};

std::string_view to_string(AugmentOp op);
AugmentOp parse_augment_op(std::string_view name);
std::vector<AugmentOp> all_augment_ops();

struct AugmentPolicy {
  std::vector<AugmentOp> ops = all_augment_ops();
  int ops_per_sample = 2;
  double max_magnitude = 0.5;
  /// Reference feature scale for the additive ops.
  double feature_scale = 1.0;
  /// Standard deviation of weak jitter, in units of feature_scale.
  double weak_sigma = 0.01;

  void validate() const;
  bool operator==(const AugmentPolicy&) const = default;
};

Eigen::VectorXd apply_augment_op(const Eigen::VectorXd& x, AugmentOp op, double magnitude,
                                 const Eigen::VectorXd& domain_mean, double feature_scale, Rng& rng);

/// x + N(0, (weak_sigma * feature_scale)^2 I).
Eigen::VectorXd weak_augment(const Eigen::VectorXd& x, const AugmentPolicy& policy, Rng& rng);

/// Applies `ops_per_sample` ops drawn uniformly (with replacement) from the
/// policy, each with a magnitude drawn from U[0, max_magnitude], in the
/// order drawn.
Eigen::VectorXd strong_augment(const Eigen::VectorXd& x, const Eigen::VectorXd& domain_mean,
                               const AugmentPolicy& policy, Rng& rng);

/// Strong augmentation of every row. FadeToMean uses the mean of the
/// unaugmented batch, which must come from a single domain.
Eigen::MatrixXd strong_augment_batch(const Eigen::MatrixXd& batch, const AugmentPolicy& policy, Rng& rng);

}  // namespace stabpa
