#include "stabpa/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace stabpa {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 2 || batch_size % 2 != 0) fail("batch_size must be even and >= 2");
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (!(tau_s2t > 0.0) || !(tau_t2s > 0.0)) fail("temperatures must be > 0");
  if (!(beta >= 0.0 && beta < 1.0)) fail("beta must lie in [0, 1)");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(aux_ce_weight >= 0.0)) fail("aux_ce_weight must be >= 0");
  if (initial_epochs < 0) fail("initial_epochs must be >= 0");
  if (embedding_dim < 1) fail("embedding_dim must be >= 1");
  for (int h : hidden_widths)
    if (h < 1) fail("hidden widths must be >= 1");
  if (!(head_temperature > 0.0)) fail("head_temperature must be > 0");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  augment.validate();
}

std::vector<int> TrainConfig::widths(int input_dim) const {
  std::vector<int> w{input_dim};
  w.insert(w.end(), hidden_widths.begin(), hidden_widths.end());
  w.push_back(embedding_dim);
  return w;
}

AlignmentSettings TrainConfig::alignment() const {
  return {use_s2t, use_t2s, tau_s2t, tau_t2s, beta, aux_ce, aux_ce_weight};
}

int steps_per_epoch(const DatasetBundle& bundle, const TrainConfig& config) {
  const auto n = std::max(bundle.base_source.size(), bundle.unlabeled_target.size());
  const auto half = static_cast<std::size_t>(config.half_batch());
  return static_cast<int>((n + half - 1) / half);
}

namespace {

std::string save_rng(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

Rng load_rng(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw std::runtime_error("corrupt rng state in train state");
  return rng;
}

// Concatenated fresh permutations of [0, n) until `count` indices exist.
std::vector<std::size_t> epoch_order(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(count + n);
  std::vector<std::size_t> perm(n);
  while (out.size() < count) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    out.insert(out.end(), perm.begin(), perm.end());
  }
  out.resize(count);
  return out;
}

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& x, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

void check_bundle_for_training(const DatasetBundle& bundle) {
  if (bundle.base_source.empty()) throw std::invalid_argument("training needs a labeled base set");
  if (bundle.unlabeled_target.empty()) throw std::invalid_argument("training needs an unlabeled target set");
}

}  // namespace

EpochMetrics pseudo_label_metrics(const PseudoLabelStore& store, std::span<const int> truth,
                                  int base_class_count, double beta) {
  EpochMetrics m;
  m.refresh_count = store.refresh_count;
  if (truth.size() != store.size()) return m;
  int frozen = 0, online = 0, pseudo = 0, confident_hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= base_class_count) continue;
    ++m.evaluated;
    frozen += store.frozen_labels[i] == truth[i];
    online += store.online_labels[i] == truth[i];
    pseudo += store.labels[i] == truth[i];
    if (store.confidences[i] > beta) {
      ++m.confident_count;
      confident_hits += store.labels[i] == truth[i];
    }
  }
  if (m.evaluated > 0) {
    const double n = m.evaluated;
    m.frozen_accuracy = frozen / n;
    m.online_accuracy = online / n;
    m.pseudo_accuracy = pseudo / n;
  }
  if (m.confident_count > 0) m.confident_accuracy = static_cast<double>(confident_hits) / m.confident_count;
  return m;
}

InitialModel train_initial_model(const DatasetBundle& bundle, const TrainConfig& config) {
  config.validate();
  check_bundle_for_training(bundle);
  const auto widths = config.widths(bundle.dim);
  EncoderParams encoder = init_encoder(widths, derive_seed(config.seed, streams::kEncoderInit));
  ClassifierHead head =
      init_head(bundle.base_class_count, config.embedding_dim, derive_seed(config.seed, streams::kHeadInit));
  head.temperature = config.head_temperature;
  const InitialTrainingConfig ic{config.initial_epochs, config.half_batch(), config.learning_rate,
                                 config.seed};
  auto r = train_initial_classifier(feature_matrix(bundle.base_source), label_vector(bundle.base_source),
                                    std::move(encoder), std::move(head), ic);
  return {std::move(r.classifier), r.final_train_accuracy};
}

TrainState make_initial_state(const DatasetBundle& bundle, const TrainConfig& config,
                              const InitialModel& initial) {
  config.validate();
  check_bundle_for_training(bundle);
  TrainState s;
  s.steps_per_epoch = steps_per_epoch(bundle, config);
  s.clock.max_steps = std::max<std::int64_t>(1, static_cast<std::int64_t>(config.epochs) * s.steps_per_epoch);
  if (config.fresh_start) {
    const std::uint64_t fresh = derive_seed(config.seed, 0xF5E5);
    s.encoder = init_encoder(config.widths(bundle.dim), derive_seed(fresh, streams::kEncoderInit));
    s.head = init_head(bundle.base_class_count, config.embedding_dim, derive_seed(fresh, streams::kHeadInit));
    s.head.temperature = config.head_temperature;
  } else {
    s.encoder = initial.frozen.encoder;
    s.head = initial.frozen.head;
  }
  auto views = parameter_views(s.encoder);
  views.push_back(parameter_view(s.head));
  s.adam = make_adam(views, config.learning_rate);
  s.bank = PrototypeBank::zeros(bundle.base_class_count, config.embedding_dim, config.momentum);
  s.store = cache_frozen_predictions(initial.frozen, feature_matrix(bundle.unlabeled_target));
  s.batch_rng = save_rng(make_rng(config.seed, streams::kBatches));
  s.source_augment_rng = save_rng(make_rng(config.seed, streams::kSourceAugment));
  s.target_augment_rng = save_rng(make_rng(config.seed, streams::kTargetAugment));
  return s;
}

TrainResult continue_training(const DatasetBundle& bundle, const TrainConfig& config, TrainState state,
                              TrainLog log, const TrainHooks& hooks) {
  config.validate();
  check_bundle_for_training(bundle);
  if (state.steps_per_epoch != steps_per_epoch(bundle, config))
    throw std::invalid_argument("train state does not match dataset/config (steps per epoch)");

  const Eigen::MatrixXd source_x = feature_matrix(bundle.base_source);
  const std::vector<int> source_y = label_vector(bundle.base_source);
  const Eigen::MatrixXd target_x = feature_matrix(bundle.unlabeled_target);
  const auto settings = config.alignment();
  const auto half = static_cast<std::size_t>(config.half_batch());
  const auto per_epoch = static_cast<std::size_t>(state.steps_per_epoch);

  Rng batch_rng = load_rng(state.batch_rng);
  Rng source_aug = load_rng(state.source_augment_rng);
  Rng target_aug = load_rng(state.target_augment_rng);

  std::vector<int> yb(half);
  std::vector<int> tl(half);
  std::vector<double> tc(half);
  for (int epoch = state.epoch; epoch < config.epochs; ++epoch) {
    refresh_online_labels(state.store, state.encoder, state.head, target_x, config.lambda);
    auto em = pseudo_label_metrics(state.store, bundle.unlabeled_truth, bundle.base_class_count, config.beta);
    em.epoch = epoch;
    log.epochs.push_back(em);

    const auto src_order = epoch_order(source_x.rows(), per_epoch * half, batch_rng);
    const auto tgt_order = epoch_order(target_x.rows(), per_epoch * half, batch_rng);
    for (std::size_t step = 0; step < per_epoch; ++step) {
      const std::span<const std::size_t> si(src_order.data() + step * half, half);
      const std::span<const std::size_t> ti(tgt_order.data() + step * half, half);
      Eigen::MatrixXd xs = gather_rows(source_x, si);
      Eigen::MatrixXd xt = gather_rows(target_x, ti);
      for (std::size_t i = 0; i < half; ++i) {
        yb[i] = source_y[si[i]];
        tl[i] = state.store.labels[ti[i]];
        tc[i] = state.store.confidences[ti[i]];
      }
      Eigen::MatrixXd xs_in =
          config.use_augmentation ? strong_augment_batch(xs, config.augment, source_aug) : xs;
      Eigen::MatrixXd xt_in = config.use_augmentation && config.use_t2s
                                  ? strong_augment_batch(xt, config.augment, target_aug)
                                  : xt;

      auto res = stabpa_batch_loss(state.encoder, state.head, state.bank, xs_in, yb, xt_in, {tl, tc},
                                   state.clock, settings);
      if (!std::isfinite(res.report.total))
        throw std::runtime_error("non-finite loss at step " + std::to_string(state.clock.step) +
                                 " (s2t=" + std::to_string(res.report.loss_s2t) +
                                 ", t2s=" + std::to_string(res.report.loss_t2s) +
                                 ", ce=" + std::to_string(res.report.aux_ce) + ")");
      auto views = parameter_views(state.encoder);
      views.push_back(parameter_view(state.head));
      auto grads = gradient_views(res.grad_encoder);
      grads.emplace_back(res.grad_head.data(), static_cast<std::size_t>(res.grad_head.size()));
      adam_step(views, grads, state.adam);

      update_target_prototypes(state.bank, embed(state.encoder, xt), tl, tc, config.beta);
      state.clock.advance();
      log.steps.push_back(res.report);
    }
    state.epoch = epoch + 1;
    state.batch_rng = save_rng(batch_rng);
    state.source_augment_rng = save_rng(source_aug);
    state.target_augment_rng = save_rng(target_aug);
    if (hooks.on_checkpoint && config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0 &&
        state.epoch < config.epochs)
      hooks.on_checkpoint(state, log);
  }
  return {std::move(state), std::move(log), {}};
}

TrainResult train_from_initial(const DatasetBundle& bundle, const TrainConfig& config,
                               const InitialModel& initial, const TrainHooks& hooks) {
  auto result = continue_training(bundle, config, make_initial_state(bundle, config, initial), {}, hooks);
  result.initial_encoder = initial.frozen.encoder;
  return result;
}

TrainResult train_stabpa(const DatasetBundle& bundle, const TrainConfig& config, const TrainHooks& hooks) {
  return train_from_initial(bundle, config, train_initial_model(bundle, config), hooks);
}

TrainConfig source_only_config(TrainConfig config) {
  config.use_s2t = false;
  config.use_t2s = false;
  config.aux_ce = true;
  return config;
}

TrainResult train_source_only(const DatasetBundle& bundle, const TrainConfig& config,
                              const TrainHooks& hooks) {
  return train_stabpa(bundle, source_only_config(config), hooks);
}

}  // namespace stabpa
