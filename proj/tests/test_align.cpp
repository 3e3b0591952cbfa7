#include <doctest.h>

#include <cmath>

#include "stabpa/align.hpp"
#include "support.hpp"

using namespace stabpa;
using namespace stabpa::testing;

namespace {

// Unit vector at squared distance 0.5 from (1, 0).
Eigen::VectorXd half_away() {
  Eigen::VectorXd v(2);
  v << 0.75, std::sqrt(1.0 - 0.75 * 0.75);
  return v;
}

}  // namespace

TEST_CASE("prototype loss with one rival at squared distance one half") {
  Eigen::MatrixXd protos(2, 2);
  protos.row(0) << 1.0, 0.0;
  protos.row(1) = half_away().transpose();
  const Eigen::VectorXd u = Eigen::VectorXd::Unit(2, 0);
  const auto r = prototype_softmax_loss(u, 0, protos, 0.25);
  CHECK(r.loss == doctest::Approx(0.1269280110429726).epsilon(1e-14));
  CHECK(r.loss == doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-14));
}

TEST_CASE("equidistant prototypes give log C") {
  for (int c : {2, 3, 7}) {
    const Eigen::MatrixXd protos = Eigen::MatrixXd::Identity(c, c);
    const auto r = prototype_softmax_loss(Eigen::VectorXd::Zero(c), 1, protos, 0.25);
    CHECK(r.loss == doctest::Approx(std::log(static_cast<double>(c))).epsilon(1e-14));
  }
}

TEST_CASE("target-to-source loss uses normalized head rows") {
  ClassifierHead head;
  head.weight.resize(2, 2);
  head.weight.row(0) << 2.0, 0.0;
  head.weight.row(1) = 3.0 * half_away().transpose();
  const auto r = loss_t2s(Eigen::VectorXd::Unit(2, 0), 0, head, 0.1);
  CHECK(r.loss == doctest::Approx(std::log1p(std::exp(-5.0))).epsilon(1e-14));
}

TEST_CASE("row normalization") {
  ClassifierHead head;
  head.weight.resize(1, 2);
  head.weight << 3.0, 4.0;
  const auto p = source_prototypes(head);
  CHECK(p(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(p(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
  head.weight.setZero();
  CHECK(source_prototypes(head).norm() == 0.0);
  CHECK_THROWS(source_prototypes(head, NormMode::Strict));
}

TEST_CASE("curriculum weight") {
  CHECK(curriculum_weight(0, 100) == 0.0);
  CHECK(curriculum_weight(100, 100) == doctest::Approx(0.4621171572600098).epsilon(1e-15));
  double prev = -1.0;
  for (int t = 0; t <= 100; ++t) {
    const double w = curriculum_weight(t, 100);
    CHECK(w > prev);
    prev = w;
  }
}

TEST_CASE("momentum bank follows the geometric closed form") {
  const double m = 0.1;
  auto bank = PrototypeBank::zeros(2, 3, m);
  Eigen::MatrixXd u(2, 3);
  u << 0.2, -0.4, 0.6, 0.4, 0.0, 0.2;  // mean (0.3, -0.2, 0.4)
  const Eigen::Vector3d mu(0.3, -0.2, 0.4);
  const std::vector<int> labels{1, 1};
  const std::vector<double> conf{0.9, 0.8};
  CHECK(update_target_prototypes(bank, u, labels, conf, 0.5) == 1);
  CHECK((bank.target.row(1).transpose() - 0.9 * mu).norm() < 1e-15);
  CHECK(bank.initialized[1]);
  CHECK_FALSE(bank.initialized[0]);
  CHECK(bank.target.row(0).norm() == 0.0);
  for (int j = 2; j <= 30; ++j) {
    update_target_prototypes(bank, u, labels, conf, 0.5);
    CHECK((bank.target.row(1).transpose() - (1.0 - std::pow(m, j)) * mu).norm() < 1e-12);
  }
}

TEST_CASE("bank ignores samples at or below the threshold") {
  auto bank = PrototypeBank::zeros(2, 2, 0.1);
  const Eigen::MatrixXd u = Eigen::MatrixXd::Identity(2, 2);
  const std::vector<int> labels{0, 1};
  const std::vector<double> conf{0.5, 0.6};
  CHECK(update_target_prototypes(bank, u, labels, conf, 0.5) == 1);
  CHECK_FALSE(bank.initialized[0]);
  CHECK(bank.initialized[1]);
}

TEST_CASE("source loss skips a class with no target prototype") {
  auto bank = PrototypeBank::zeros(3, 2, 0.1);
  bank.target.row(0) << 1.0, 0.0;
  bank.target.row(1) << 0.0, 1.0;
  bank.initialized = {1, 1, 0};
  CHECK_FALSE(loss_s2t(Eigen::VectorXd::Unit(2, 0), 2, bank).has_value());
  const auto r = loss_s2t(Eigen::VectorXd::Unit(2, 0), 0, bank);
  REQUIRE(r.has_value());
  // Row 2 sits at the origin, but it is masked out of the softmax.
  CHECK(r->loss == doctest::Approx(std::log1p(std::exp(-2.0 / 0.25))).epsilon(1e-14));
  CHECK(r->grad_prototypes.row(2).norm() == 0.0);
}

TEST_CASE("prototype loss gradients agree with central differences") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 2 + trial % 4;
    const Eigen::VectorXd u = random_unit(5, rng);
    const Eigen::MatrixXd protos = random_matrix(c, 5, rng, 0.5);
    const int y = trial % c;
    const auto r = prototype_softmax_loss(u, y, protos, 0.25);
    auto fu = [&](const Eigen::VectorXd& v) { return prototype_softmax_loss(v, y, protos, 0.25).loss; };
    CHECK(relative_error(r.grad_embedding, numeric_gradient(fu, u)) < 1e-7);
    auto fp = [&](const Eigen::VectorXd& v) {
      return prototype_softmax_loss(u, y, Eigen::Map<const Eigen::MatrixXd>(v.data(), c, 5), 0.25).loss;
    };
    const Eigen::VectorXd pf = Eigen::Map<const Eigen::VectorXd>(protos.data(), protos.size());
    const Eigen::VectorXd gp =
        Eigen::Map<const Eigen::VectorXd>(r.grad_prototypes.data(), r.grad_prototypes.size());
    CHECK(relative_error(gp, numeric_gradient(fp, pf)) < 1e-7);
  }
}

TEST_CASE("target-to-source weight gradient goes through the row normalization") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ClassifierHead head;
    head.weight = random_matrix(4, 6, rng);
    const Eigen::VectorXd u = random_unit(6, rng);
    const int y = trial % 4;
    const auto r = loss_t2s(u, y, head);
    auto fw = [&](const Eigen::VectorXd& v) {
      ClassifierHead h;
      h.weight = Eigen::Map<const Eigen::MatrixXd>(v.data(), 4, 6);
      return loss_t2s(u, y, h).loss;
    };
    const Eigen::VectorXd wf = Eigen::Map<const Eigen::VectorXd>(head.weight.data(), head.weight.size());
    const Eigen::VectorXd gw = Eigen::Map<const Eigen::VectorXd>(r.grad_weight.data(), r.grad_weight.size());
    CHECK(relative_error(gw, numeric_gradient(fw, wf)) < 1e-6);
  }
}

TEST_CASE("full batch loss gradients agree with central differences") {
  std::mt19937_64 rng(33);
  const std::array<int, 3> widths{5, 7, 4};
  for (int trial = 0; trial < 5; ++trial) {
    const auto enc = init_encoder(widths, trial);
    auto head = init_head(3, 4, trial);
    head.temperature = 0.5;
    auto bank = PrototypeBank::zeros(3, 4, 0.1);
    bank.target = random_matrix(3, 4, rng, 0.5);
    bank.initialized = {1, 1, trial % 2 ? std::uint8_t{0} : std::uint8_t{1}};
    const Eigen::MatrixXd xs = random_matrix(4, 5, rng);
    const Eigen::MatrixXd xt = random_matrix(4, 5, rng);
    const std::vector<int> ys{0, 1, 2, 1};
    const std::vector<int> yt{2, 0, 1, 0};
    const std::vector<double> conf{0.9, 0.4, 0.7, 0.6};
    const TargetBatchLabels target{yt, conf};
    const CurriculumClock clock{7, 20};
    AlignmentSettings settings;
    const auto r = stabpa_batch_loss(enc, head, bank, xs, ys, xt, target, clock, settings);
    auto f = [&](const Eigen::VectorXd& v) {
      return stabpa_batch_loss(unflatten(enc, v), head, bank, xs, ys, xt, target, clock, settings)
          .report.total;
    };
    CHECK(relative_error(flatten(r.grad_encoder), numeric_gradient(f, flatten(enc))) < 1e-5);
    CHECK(r.report.filtered_count == 1);
    CHECK(r.report.weight == doctest::Approx(curriculum_weight(7, 20)));
  }
}
