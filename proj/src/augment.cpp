#include "stabpa/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace stabpa {

std::string_view to_string(AugmentOp op) {
  switch (op) {
    case AugmentOp::GaussianNoise:
      return "noise";
    case AugmentOp::MultiplicativeJitter:
      return "jitter";
    case AugmentOp::BlockCutout:
      return "cutout";
    case AugmentOp::GlobalScale:
      return "scale";
    case AugmentOp::FadeToMean:
      return "fade";
  }
  return "?";
}

AugmentOp parse_augment_op(std::string_view name) {
  for (auto op : all_augment_ops())
    if (to_string(op) == name) return op;
  throw std::invalid_argument("unknown augmentation op '" + std::string(name) + "'");
}

std::vector<AugmentOp> all_augment_ops() {
  return {AugmentOp::GaussianNoise, AugmentOp::MultiplicativeJitter, AugmentOp::BlockCutout,
          AugmentOp::GlobalScale, AugmentOp::FadeToMean};
}

void AugmentPolicy::validate() const {
  if (ops.empty()) throw std::invalid_argument("augment policy: op set is empty");
  if (ops_per_sample < 1) throw std::invalid_argument("augment policy: ops_per_sample must be >= 1");
  if (!(max_magnitude >= 0.0)) throw std::invalid_argument("augment policy: max_magnitude must be >= 0");
  if (!(feature_scale > 0.0)) throw std::invalid_argument("augment policy: feature_scale must be > 0");
  if (!(weak_sigma >= 0.0)) throw std::invalid_argument("augment policy: weak_sigma must be >= 0");
}

Eigen::VectorXd apply_augment_op(const Eigen::VectorXd& x, AugmentOp op, double magnitude,
                                 const Eigen::VectorXd& domain_mean, double feature_scale, Rng& rng) {
  Eigen::VectorXd y = x;
  const auto d = x.size();
  switch (op) {
    case AugmentOp::GaussianNoise: {
      std::normal_distribution<double> n(0.0, 1.0);
      for (Eigen::Index i = 0; i < d; ++i) y[i] += magnitude * feature_scale * n(rng);
      break;
    }
    case AugmentOp::MultiplicativeJitter: {
      std::normal_distribution<double> n(0.0, 1.0);
      for (Eigen::Index i = 0; i < d; ++i) y[i] *= 1.0 + magnitude * n(rng);
      break;
    }
    case AugmentOp::BlockCutout: {
      const auto len = std::min<Eigen::Index>(
          d, static_cast<Eigen::Index>(std::ceil(magnitude * static_cast<double>(d) - 1e-9)));
      if (len <= 0) break;
      std::uniform_int_distribution<Eigen::Index> start(0, d - len);
      y.segment(start(rng), len).setZero();
      break;
    }
    case AugmentOp::GlobalScale: {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      y *= 1.0 + magnitude * u(rng);
      break;
    }
    case AugmentOp::FadeToMean: {
      const double a = std::min(magnitude, 1.0);
      y = (1.0 - a) * x + a * domain_mean;
      break;
    }
  }
  return y;
}

Eigen::VectorXd weak_augment(const Eigen::VectorXd& x, const AugmentPolicy& policy, Rng& rng) {
  Eigen::VectorXd y = x;
  const double sigma = policy.weak_sigma * policy.feature_scale;
  if (sigma == 0.0) return y;
  std::normal_distribution<double> n(0.0, sigma);
  for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += n(rng);
  return y;
}

Eigen::VectorXd strong_augment(const Eigen::VectorXd& x, const Eigen::VectorXd& domain_mean,
                               const AugmentPolicy& policy, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, policy.ops.size() - 1);
  std::uniform_real_distribution<double> mag(0.0, policy.max_magnitude);
  Eigen::VectorXd y = x;
  for (int i = 0; i < policy.ops_per_sample; ++i) {
    const AugmentOp op = policy.ops[pick(rng)];
    const double m = policy.max_magnitude > 0.0 ? mag(rng) : 0.0;
    y = apply_augment_op(y, op, m, domain_mean, policy.feature_scale, rng);
  }
  return y;
}

Eigen::MatrixXd strong_augment_batch(const Eigen::MatrixXd& batch, const AugmentPolicy& policy, Rng& rng) {
  const Eigen::VectorXd mean = batch.colwise().mean().transpose();
  Eigen::MatrixXd out(batch.rows(), batch.cols());
  for (Eigen::Index r = 0; r < batch.rows(); ++r)
    out.row(r) = strong_augment(batch.row(r).transpose(), mean, policy, rng).transpose();
  return out;
}

}  // namespace stabpa
