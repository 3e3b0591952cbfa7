#include <doctest.h>

#include <array>

#include "stabpa/encoder.hpp"
#include "support.hpp"

using namespace stabpa;
using namespace stabpa::testing;

TEST_CASE("batch forward matches the per-sample loop") {
  const std::array<int, 4> widths{12, 16, 8, 5};
  const auto p = init_encoder(widths, 3);
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd x = random_matrix(20, 12, rng);
  const auto out = forward_batch(p, x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::VectorXd want = naive_embedding(p, x.row(i).transpose());
    CHECK((out.embeddings.row(i).transpose() - want).norm() < 1e-12);
    CHECK(out.embeddings.row(i).norm() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("identity encoder maps a basis vector to itself") {
  EncoderParams p;
  p.layers.push_back({Eigen::MatrixXd::Identity(4, 4), Eigen::VectorXd::Zero(4)});
  const Eigen::VectorXd e1 = Eigen::VectorXd::Unit(4, 0);
  CHECK((forward(p, e1).embedding - e1).norm() == 0.0);
  CHECK((forward(p, 3.0 * e1).embedding - e1).norm() < 1e-15);
}

TEST_CASE("zero raw output is guarded or rejected") {
  EncoderParams p;
  p.layers.push_back({Eigen::MatrixXd::Zero(3, 2), Eigen::VectorXd::Zero(3)});
  const Eigen::VectorXd x = Eigen::VectorXd::Ones(2);
  CHECK(forward(p, x).embedding.norm() == 0.0);
  CHECK_THROWS_AS(forward(p, x, NormMode::Strict), ZeroNormError);
}

TEST_CASE("shape errors are reported") {
  const std::array<int, 3> widths{4, 6, 3};
  const auto p = init_encoder(widths, 0);
  CHECK_THROWS_AS(forward(p, Eigen::VectorXd::Ones(5)), ShapeError);
  const std::array<int, 1> bad{4};
  CHECK_THROWS(init_encoder(bad, 0));
}

TEST_CASE("initialization is seeded and bounded by the fan-in") {
  const std::array<int, 3> widths{9, 7, 4};
  const auto a = init_encoder(widths, 5);
  CHECK(a == init_encoder(widths, 5));
  CHECK_FALSE(a == init_encoder(widths, 6));
  CHECK(a.layers[0].weight.cwiseAbs().maxCoeff() <= 1.0 / 3.0);
  CHECK(a.parameter_count() == 9 * 7 + 7 + 7 * 4 + 4);
}

TEST_CASE("backward agrees with central differences") {
  const std::array<int, 4> widths{6, 10, 7, 4};
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = init_encoder(widths, trial);
    const Eigen::MatrixXd x = random_matrix(3, 6, rng);
    const Eigen::MatrixXd g = random_matrix(3, 4, rng);
    auto f = [&](const Eigen::VectorXd& v) {
      return (forward_batch(unflatten(p, v), x).embeddings.array() * g.array()).sum();
    };
    const auto fwd = forward_batch(p, x);
    const auto grads = backward_batch(p, fwd.cache, g);
    CHECK(relative_error(flatten(grads.params), numeric_gradient(f, flatten(p))) < 1e-6);

    auto fx = [&](const Eigen::VectorXd& v) {
      const Eigen::MatrixXd xi = Eigen::Map<const Eigen::MatrixXd>(v.data(), x.rows(), x.cols());
      return (forward_batch(p, xi).embeddings.array() * g.array()).sum();
    };
    const Eigen::VectorXd xflat = Eigen::Map<const Eigen::VectorXd>(x.data(), x.size());
    const Eigen::VectorXd gx = Eigen::Map<const Eigen::VectorXd>(grads.input.data(), grads.input.size());
    CHECK(relative_error(gx, numeric_gradient(fx, xflat)) < 1e-6);
  }
}

TEST_CASE("the normalization gradient is orthogonal to the embedding") {
  const std::array<int, 3> widths{5, 8, 6};
  const auto p = init_encoder(widths, 2);
  std::mt19937_64 rng(4);
  const Eigen::VectorXd x = random_matrix(5, 1, rng);
  const auto fwd = forward(p, x);
  // Moving along the embedding itself leaves the normalized output unchanged.
  const auto g = backward(p, fwd.cache, fwd.embedding);
  CHECK(flatten(g.params).norm() < 1e-10);
}

TEST_CASE("first Adam step moves by the learning rate") {
  std::vector<double> w{0.5, -2.0};
  const std::vector<double> g{1.0, 1.0};
  std::vector<ParamView> params{ParamView(w)};
  std::vector<GradView> grads{GradView(g)};
  auto state = make_adam(params, 1e-3);
  adam_step(params, grads, state);
  const double expected = -1e-3 / (1.0 + 1e-8);
  CHECK(w[0] - 0.5 == doctest::Approx(expected).epsilon(1e-12));
  CHECK(w[1] + 2.0 == doctest::Approx(expected).epsilon(1e-12));
  CHECK(state.step == 1);
}

TEST_CASE("Adam with zero gradients leaves parameters alone") {
  std::vector<double> w{1.0, 2.0, 3.0};
  const std::vector<double> g(3, 0.0);
  std::vector<ParamView> params{ParamView(w)};
  std::vector<GradView> grads{GradView(g)};
  auto state = make_adam(params, 1e-2);
  for (int i = 0; i < 5; ++i) adam_step(params, grads, state);
  CHECK(w == std::vector<double>{1.0, 2.0, 3.0});
}
