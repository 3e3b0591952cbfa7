#include <doctest.h>

#include "stabpa/train.hpp"

using namespace stabpa;

namespace {

DatasetBundle tiny_bundle() {
  SyntheticConfig c;
  c.dim = 12;
  c.base_classes = 4;
  c.validation_classes = 2;
  c.novel_classes = 5;
  c.samples_per_class = 24;
  c.center_rank = 4;
  return generate_synthetic(c);
}

TrainConfig tiny_config() {
  TrainConfig t;
  t.epochs = 3;
  t.batch_size = 32;
  t.initial_epochs = 3;
  t.hidden_widths = {16};
  t.embedding_dim = 8;
  return t;
}

}  // namespace

TEST_CASE("steps per epoch covers the larger pool in half batches") {
  const auto b = tiny_bundle();
  REQUIRE(b.unlabeled_target.size() == 144);
  CHECK(steps_per_epoch(b, tiny_config()) == 9);
}

TEST_CASE("training is deterministic and logs every step") {
  const auto b = tiny_bundle();
  const auto cfg = tiny_config();
  const auto a = train_stabpa(b, cfg);
  const auto c = train_stabpa(b, cfg);
  CHECK(a.state == c.state);
  CHECK(a.log == c.log);
  CHECK(a.state.epoch == 3);
  CHECK(a.log.steps.size() == static_cast<std::size_t>(3 * steps_per_epoch(b, cfg)));
  CHECK(a.log.epochs.size() == 3);
  CHECK(a.state.encoder.all_finite());
  CHECK(a.state.clock.max_steps == 3 * steps_per_epoch(b, cfg));
  for (const auto& s : a.log.steps) CHECK(std::isfinite(s.total));
}

TEST_CASE("resuming from an intermediate state reproduces the full run") {
  const auto b = tiny_bundle();
  auto cfg = tiny_config();
  cfg.checkpoint_every = 1;
  std::optional<std::pair<TrainState, TrainLog>> first;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const TrainState& s, const TrainLog& l) {
    if (!first) first.emplace(s, l);
  };
  const auto full = train_stabpa(b, cfg, hooks);
  REQUIRE(first.has_value());
  CHECK(first->first.epoch == 1);
  const auto resumed = continue_training(b, cfg, first->first, first->second);
  CHECK(resumed.state == full.state);
  CHECK(resumed.log == full.log);
}

TEST_CASE("online model starts from the initial classifier") {
  const auto b = tiny_bundle();
  const auto cfg = tiny_config();
  const auto initial = train_initial_model(b, cfg);
  const auto state = make_initial_state(b, cfg, initial);
  CHECK(state.encoder == initial.frozen.encoder);
  CHECK(state.head == initial.frozen.head);
  CHECK(state.bank.target.norm() == 0.0);
  CHECK(state.store.size() == b.unlabeled_target.size());
  auto fresh = cfg;
  fresh.fresh_start = true;
  CHECK_FALSE(make_initial_state(b, fresh, initial).encoder == initial.frozen.encoder);
}

TEST_CASE("disabled alignment terms contribute nothing") {
  const auto b = tiny_bundle();
  const auto r = train_source_only(b, tiny_config());
  for (const auto& s : r.log.steps) {
    CHECK(s.loss_s2t == 0.0);
    CHECK(s.loss_t2s == 0.0);
    CHECK(s.total == doctest::Approx(s.aux_ce));
  }
}

TEST_CASE("initial classifier learns the base classes") {
  const auto b = tiny_bundle();
  auto cfg = tiny_config();
  cfg.initial_epochs = 1;
  const double short_run = train_initial_model(b, cfg).train_accuracy;
  cfg.initial_epochs = 20;
  const double long_run = train_initial_model(b, cfg).train_accuracy;
  CHECK(long_run > short_run);
  CHECK(long_run > 0.5);
}

TEST_CASE("pseudo-label metrics against known truth") {
  PseudoLabelStore store;
  store.labels = {0, 1, 1, 2};
  store.frozen_labels = {0, 0, 1, 2};
  store.online_labels = {0, 1, 1, 1};
  store.confidences = {0.9, 0.3, 0.8, 0.6};
  const std::vector<int> truth{0, 1, 2, 2};
  const auto m = pseudo_label_metrics(store, truth, 3, 0.5);
  CHECK(m.evaluated == 4);
  CHECK(m.frozen_accuracy == doctest::Approx(0.5));
  CHECK(m.online_accuracy == doctest::Approx(0.5));
  CHECK(m.pseudo_accuracy == doctest::Approx(0.75));
  CHECK(m.confident_count == 3);
  CHECK(m.confident_accuracy == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("invalid training settings are rejected") {
  auto cfg = tiny_config();
  cfg.batch_size = 1;
  CHECK_THROWS(cfg.validate());
  cfg = tiny_config();
  cfg.lambda = 1.5;
  CHECK_THROWS(cfg.validate());
  cfg = tiny_config();
  cfg.momentum = 1.0;
  CHECK_THROWS(cfg.validate());
}
