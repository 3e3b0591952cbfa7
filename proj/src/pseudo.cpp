#include "stabpa/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace stabpa {

ClassifierHead init_head(int classes, int embedding_dim, std::uint64_t seed) {
  if (classes < 1 || embedding_dim < 1) throw ShapeError("head: dimensions must be positive");
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(embedding_dim));
  std::uniform_real_distribution<double> u(-bound, bound);
  ClassifierHead h;
  h.weight.resize(classes, embedding_dim);
  for (Eigen::Index c = 0; c < h.weight.cols(); ++c)
    for (Eigen::Index r = 0; r < h.weight.rows(); ++r) h.weight(r, c) = u(rng);
  return h;
}

ParamView parameter_view(ClassifierHead& head) {
  return {head.weight.data(), static_cast<std::size_t>(head.weight.size())};
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

Eigen::MatrixXd predict_probs_batch(const ClassifierHead& head, const Eigen::MatrixXd& embeddings) {
  if (embeddings.cols() != head.weight.cols())
    throw ShapeError("predict_probs: embedding dimension mismatch");
  return softmax_rows(embeddings * head.weight.transpose() / head.temperature);
}

Eigen::VectorXd predict_probs(const ClassifierHead& head, const Eigen::VectorXd& embedding) {
  return predict_probs_batch(head, embedding.transpose()).row(0).transpose();
}

CrossEntropyResult cross_entropy(const ClassifierHead& head, const Eigen::MatrixXd& embeddings,
                                 std::span<const int> labels) {
  const Eigen::Index n = embeddings.rows();
  if (static_cast<std::size_t>(n) != labels.size() || n == 0)
    throw ShapeError("cross_entropy: batch and label counts differ or are zero");
  Eigen::MatrixXd p = predict_probs_batch(head, embeddings);
  CrossEntropyResult r;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= head.class_count()) throw ShapeError("cross_entropy: label out of range");
    r.loss -= std::log(std::max(p(i, y), 1e-300));
    if (argmax(p.row(i).transpose()) == y) ++r.correct;
    p(i, y) -= 1.0;
  }
  r.loss /= static_cast<double>(n);
  // p now holds d(sum loss)/d logits.
  const double scale = 1.0 / (static_cast<double>(n) * head.temperature);
  r.grad_embeddings = scale * p * head.weight;
  r.grad_weight = scale * p.transpose() * embeddings;
  return r;
}

int argmax(const Eigen::Ref<const Eigen::VectorXd>& v) {
  int best = 0;
  for (Eigen::Index k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = static_cast<int>(k);
  return best;
}

PseudoLabel interpolate_pseudo_label(const Eigen::VectorXd& frozen_probs, const Eigen::VectorXd& online_probs,
                                     double lambda) {
  if (frozen_probs.size() != online_probs.size() || frozen_probs.size() == 0)
    throw ShapeError("interpolate_pseudo_label: length mismatch");
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("interpolate_pseudo_label: lambda must lie in [0, 1]");
  const Eigen::VectorXd q = lambda * frozen_probs + (1.0 - lambda) * online_probs;
  const int k = argmax(q);
  return {k, q[k]};
}

InitialTrainingResult train_initial_classifier(const Eigen::MatrixXd& base_features,
                                               std::span<const int> base_labels, EncoderParams encoder,
                                               ClassifierHead head, const InitialTrainingConfig& config) {
  const auto n = static_cast<std::size_t>(base_features.rows());
  if (n == 0) throw std::invalid_argument("train_initial_classifier: empty base set");
  if (base_labels.size() != n) throw ShapeError("train_initial_classifier: label count mismatch");
  if (config.batch_size < 1 || config.epochs < 0)
    throw std::invalid_argument("train_initial_classifier: invalid budget");
  check_encoder(encoder);

  auto views = parameter_views(encoder);
  views.push_back(parameter_view(head));
  AdamState adam = make_adam(views, config.learning_rate);
  Rng rng = make_rng(config.seed, streams::kInitialBatches);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n);
  Eigen::MatrixXd xb;
  std::vector<int> yb;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      xb.resize(static_cast<Eigen::Index>(stop - start), base_features.cols());
      yb.clear();
      for (std::size_t i = start; i < stop; ++i) {
        xb.row(static_cast<Eigen::Index>(i - start)) = base_features.row(static_cast<Eigen::Index>(order[i]));
        yb.push_back(base_labels[order[i]]);
      }
      const auto fwd = forward_batch(encoder, xb);
      const auto ce = cross_entropy(head, fwd.embeddings, yb);
      if (!std::isfinite(ce.loss)) throw std::runtime_error("initial classifier: non-finite loss");
      const auto back = backward_batch(encoder, fwd.cache, ce.grad_embeddings);
      auto grads = gradient_views(back.params);
      grads.emplace_back(ce.grad_weight.data(), static_cast<std::size_t>(ce.grad_weight.size()));
      adam_step(views, grads, adam);
    }
  }

  InitialTrainingResult result;
  const auto probs = predict_probs_batch(head, embed(encoder, base_features));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (argmax(probs.row(static_cast<Eigen::Index>(i)).transpose()) == base_labels[i]) ++correct;
  result.final_train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  result.classifier = {std::move(encoder), std::move(head)};
  return result;
}

PseudoLabelStore cache_frozen_predictions(const FrozenClassifier& frozen,
                                          const Eigen::MatrixXd& unlabeled_features) {
  PseudoLabelStore s;
  s.frozen_probs = predict_probs_batch(frozen.head, embed(frozen.encoder, unlabeled_features));
  const auto n = static_cast<std::size_t>(s.frozen_probs.rows());
  s.labels.resize(n);
  s.confidences.resize(n);
  s.frozen_labels.resize(n);
  s.online_labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = s.frozen_probs.row(static_cast<Eigen::Index>(i)).transpose();
    const int k = argmax(row);
    s.labels[i] = s.frozen_labels[i] = s.online_labels[i] = k;
    s.confidences[i] = row[k];
  }
  return s;
}

void refresh_online_labels(PseudoLabelStore& store, const EncoderParams& encoder,
                           const ClassifierHead& online_head, const Eigen::MatrixXd& unlabeled_features,
                           double lambda) {
  if (store.frozen_probs.rows() != unlabeled_features.rows() || store.size() != store.frozen_labels.size())
    throw std::logic_error("refresh_online_labels: frozen predictions missing for the target pool");
  if (store.frozen_probs.cols() != online_head.class_count())
    throw ShapeError("refresh_online_labels: class count mismatch");
  const Eigen::MatrixXd online = predict_probs_batch(online_head, embed(encoder, unlabeled_features));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Eigen::VectorXd pt = online.row(r).transpose();
    const auto pl = interpolate_pseudo_label(store.frozen_probs.row(r).transpose(), pt, lambda);
    store.labels[i] = pl.label;
    store.confidences[i] = pl.confidence;
    store.online_labels[i] = argmax(pt);
  }
  ++store.refresh_count;
}

}  // namespace stabpa
