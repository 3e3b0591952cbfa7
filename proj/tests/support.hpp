#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "stabpa/encoder.hpp"

namespace stabpa::testing {

// Central differences of a scalar function of a flat parameter vector.
inline Eigen::VectorXd numeric_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                        Eigen::VectorXd x, double h = 1e-6) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// |a - b| / max(|a|, |b|) in the Euclidean norm; 0 when both vanish.
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double scale = std::max(a.norm(), b.norm());
  if (scale == 0.0) return 0.0;
  return (a - b).norm() / scale;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                                     double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Eigen::VectorXd random_unit(Eigen::Index dim, std::mt19937_64& rng) {
  Eigen::VectorXd v = random_matrix(dim, 1, rng);
  return v / v.norm();
}

// Flattens every encoder weight and bias, in layer order.
inline Eigen::VectorXd flatten(const EncoderParams& p) {
  Eigen::Index n = 0;
  for (const auto& l : p.layers) n += l.weight.size() + l.bias.size();
  Eigen::VectorXd v(n);
  Eigen::Index at = 0;
  for (const auto& l : p.layers) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) v[at++] = l.weight.data()[i];
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) v[at++] = l.bias[i];
  }
  return v;
}

inline EncoderParams unflatten(EncoderParams p, const Eigen::VectorXd& v) {
  Eigen::Index at = 0;
  for (auto& l : p.layers) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = v[at++];
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = v[at++];
  }
  return p;
}

// Straight loops over one sample: affine, ReLU on hidden layers, then
// division by the norm.
inline Eigen::VectorXd naive_embedding(const EncoderParams& p, const Eigen::VectorXd& x) {
  std::vector<double> a(x.data(), x.data() + x.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& W = p.layers[l].weight;
    std::vector<double> z(static_cast<std::size_t>(W.rows()));
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      double s = p.layers[l].bias[r];
      for (Eigen::Index c = 0; c < W.cols(); ++c) s += W(r, c) * a[static_cast<std::size_t>(c)];
      const bool hidden = l + 1 < p.layers.size();
      z[static_cast<std::size_t>(r)] = hidden ? std::max(s, 0.0) : s;
    }
    a = std::move(z);
  }
  double sq = 0.0;
  for (double v : a) sq += v * v;
  const double n = std::max(std::sqrt(sq), kNormEpsilon);
  Eigen::VectorXd u(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) u[static_cast<Eigen::Index>(i)] = a[i] / n;
  return u;
}

}  // namespace stabpa::testing
