#include "stabpa/align.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace stabpa {

PrototypeBank PrototypeBank::zeros(int classes, int embedding_dim, double momentum) {
  if (classes < 1 || embedding_dim < 1) throw ShapeError("prototype bank: dimensions must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("prototype bank: momentum must lie in [0, 1)");
  PrototypeBank b;
  b.target = Eigen::MatrixXd::Zero(classes, embedding_dim);
  b.initialized.assign(static_cast<std::size_t>(classes), 0);
  b.momentum = momentum;
  return b;
}

Eigen::MatrixXd source_prototypes(const ClassifierHead& head, NormMode mode) {
  Eigen::MatrixXd p = head.weight;
  for (Eigen::Index k = 0; k < p.rows(); ++k) {
    const double n = p.row(k).norm();
    if (n == 0.0 && mode == NormMode::Strict)
      throw ZeroNormError("source_prototypes: head row " + std::to_string(k) + " is zero");
    p.row(k) /= std::max(n, kNormEpsilon);
  }
  return p;
}

Eigen::MatrixXd row_normalization_backward(const Eigen::MatrixXd& weight,
                                           const Eigen::MatrixXd& grad_normalized) {
  Eigen::MatrixXd g(weight.rows(), weight.cols());
  for (Eigen::Index k = 0; k < weight.rows(); ++k) {
    const double raw = weight.row(k).norm();
    const double n = std::max(raw, kNormEpsilon);
    if (raw < kNormEpsilon) {
      g.row(k) = grad_normalized.row(k) / n;
      continue;
    }
    const Eigen::RowVectorXd p = weight.row(k) / n;
    g.row(k) = (grad_normalized.row(k) - grad_normalized.row(k).dot(p) * p) / n;
  }
  return g;
}

int update_target_prototypes(PrototypeBank& bank, const Eigen::MatrixXd& embeddings,
                             std::span<const int> pseudo_labels, std::span<const double> confidences,
                             double beta) {
  const auto n = static_cast<std::size_t>(embeddings.rows());
  if (pseudo_labels.size() != n || confidences.size() != n)
    throw ShapeError("update_target_prototypes: batch size mismatch");
  if (embeddings.cols() != bank.target.cols())
    throw ShapeError("update_target_prototypes: embedding dimension mismatch");
  const int classes = bank.class_count();
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(classes, embeddings.cols());
  std::vector<int> counts(static_cast<std::size_t>(classes), 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(confidences[i] > beta)) continue;
    const int k = pseudo_labels[i];
    if (k < 0 || k >= classes) throw ShapeError("update_target_prototypes: label out of range");
    sums.row(k) += embeddings.row(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(k)];
  }
  int touched = 0;
  for (int k = 0; k < classes; ++k) {
    const int c = counts[static_cast<std::size_t>(k)];
    if (c == 0) continue;
    bank.target.row(k) =
        bank.momentum * bank.target.row(k) + (1.0 - bank.momentum) * (sums.row(k) / static_cast<double>(c));
    bank.initialized[static_cast<std::size_t>(k)] = 1;
    ++touched;
  }
  return touched;
}

double curriculum_weight(std::int64_t step, std::int64_t max_steps) {
  if (max_steps <= 0) throw std::invalid_argument("curriculum_weight: max_steps must be positive");
  if (step < 0) throw std::invalid_argument("curriculum_weight: step must be non-negative");
  return 2.0 / (1.0 + std::exp(-static_cast<double>(step) / static_cast<double>(max_steps))) - 1.0;
}

namespace {

// Per-row softmax-over-negative-squared-distance terms. `coef` receives
// softmax - onehot on active columns (zero elsewhere) scaled by
// `row_scale[i]`; rows with row_scale 0 are skipped entirely.
struct DistanceSoftmax {
  Eigen::VectorXd losses;
  Eigen::MatrixXd coef;
};

DistanceSoftmax distance_softmax(const Eigen::MatrixXd& u, std::span<const int> positives,
                                 const Eigen::MatrixXd& prototypes, double tau,
                                 std::span<const std::uint8_t> active, std::span<const double> row_scale) {
  const Eigen::Index n = u.rows();
  const Eigen::Index c = prototypes.rows();
  DistanceSoftmax out{Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, c)};
  Eigen::VectorXd logits(c);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (row_scale[static_cast<std::size_t>(i)] == 0.0) continue;
    double max_logit = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < c; ++k) {
      if (!active.empty() && !active[static_cast<std::size_t>(k)]) continue;
      logits[k] = -(u.row(i) - prototypes.row(k)).squaredNorm() / tau;
      max_logit = std::max(max_logit, logits[k]);
    }
    double z = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) {
      if (!active.empty() && !active[static_cast<std::size_t>(k)]) continue;
      out.coef(i, k) = std::exp(logits[k] - max_logit);
      z += out.coef(i, k);
    }
    const int q = positives[static_cast<std::size_t>(i)];
    out.losses[i] = -(logits[q] - max_logit - std::log(z));
    out.coef.row(i) /= z;
    out.coef(i, q) -= 1.0;
    out.coef.row(i) *= row_scale[static_cast<std::size_t>(i)];
  }
  return out;
}

// d/du_i = (2/tau) sum_k coef_ik p_k, because sum_k coef_ik = 0.
Eigen::MatrixXd grad_wrt_embeddings(const DistanceSoftmax& ds, const Eigen::MatrixXd& prototypes,
                                    double tau) {
  return (2.0 / tau) * ds.coef * prototypes;
}

// d/dp_k = (2/tau) sum_i coef_ik (u_i - p_k).
Eigen::MatrixXd grad_wrt_prototypes(const DistanceSoftmax& ds, const Eigen::MatrixXd& u,
                                    const Eigen::MatrixXd& prototypes, double tau) {
  const Eigen::VectorXd col = ds.coef.colwise().sum().transpose();
  return (2.0 / tau) * (ds.coef.transpose() * u - col.asDiagonal() * prototypes);
}

void check_positive(int q, Eigen::Index classes, const char* what) {
  if (q < 0 || q >= classes)
    throw ShapeError(std::string(what) + ": class " + std::to_string(q) + " out of range");
}

}  // namespace

PrototypeLoss prototype_softmax_loss(const Eigen::VectorXd& embedding, int positive,
                                     const Eigen::MatrixXd& prototypes, double tau,
                                     std::span<const std::uint8_t> active) {
  if (!(tau > 0.0)) throw std::invalid_argument("prototype loss: tau must be positive");
  if (embedding.size() != prototypes.cols()) throw ShapeError("prototype loss: dimension mismatch");
  check_positive(positive, prototypes.rows(), "prototype loss");
  if (!active.empty()) {
    if (active.size() != static_cast<std::size_t>(prototypes.rows()))
      throw ShapeError("prototype loss: mask size mismatch");
    if (!active[static_cast<std::size_t>(positive)])
      throw std::invalid_argument("prototype loss: positive class is inactive");
  }
  const Eigen::MatrixXd u = embedding.transpose();
  const int q[1] = {positive};
  const double one[1] = {1.0};
  const auto ds = distance_softmax(u, q, prototypes, tau, active, one);
  return {ds.losses[0], grad_wrt_embeddings(ds, prototypes, tau).row(0).transpose(),
          grad_wrt_prototypes(ds, u, prototypes, tau)};
}

std::optional<PrototypeLoss> loss_s2t(const Eigen::VectorXd& embedding, int label, const PrototypeBank& bank,
                                      double tau) {
  check_positive(label, bank.class_count(), "loss_s2t");
  if (!bank.initialized[static_cast<std::size_t>(label)]) return std::nullopt;
  return prototype_softmax_loss(embedding, label, bank.target, tau, bank.initialized);
}

SourcePrototypeLoss loss_t2s(const Eigen::VectorXd& embedding, int pseudo_label, const ClassifierHead& head,
                             double tau) {
  const Eigen::MatrixXd protos = source_prototypes(head);
  SourcePrototypeLoss out;
  static_cast<PrototypeLoss&>(out) = prototype_softmax_loss(embedding, pseudo_label, protos, tau);
  out.grad_weight = row_normalization_backward(head.weight, out.grad_prototypes);
  return out;
}

EmbeddingLossResult alignment_loss(const Eigen::MatrixXd& source_embeddings,
                                   std::span<const int> source_labels,
                                   const Eigen::MatrixXd& target_embeddings, const TargetBatchLabels& target,
                                   const PrototypeBank& bank, const ClassifierHead& head, double weight,
                                   const AlignmentSettings& settings) {
  const Eigen::Index ns = source_embeddings.rows();
  const Eigen::Index nt = target_embeddings.rows();
  const Eigen::Index dim = head.weight.cols();
  const Eigen::Index classes = head.weight.rows();
  if (static_cast<std::size_t>(ns) != source_labels.size())
    throw ShapeError("alignment_loss: source label count mismatch");
  if (static_cast<std::size_t>(nt) != target.labels.size() ||
      static_cast<std::size_t>(nt) != target.confidences.size())
    throw ShapeError("alignment_loss: target label/confidence count mismatch");
  if (bank.class_count() != classes || bank.target.cols() != dim)
    throw ShapeError("alignment_loss: bank shape does not match head");

  EmbeddingLossResult r;
  r.report.weight = weight;
  r.grad_source = Eigen::MatrixXd::Zero(ns, dim);
  r.grad_target = Eigen::MatrixXd::Zero(nt, dim);
  r.grad_head = Eigen::MatrixXd::Zero(classes, dim);

  if (settings.use_s2t && ns > 0) {
    if (!(settings.tau_s2t > 0.0)) throw std::invalid_argument("tau_s2t must be positive");
    // Unit row scale so the report carries the loss even while w(t) = 0.
    std::vector<double> used(static_cast<std::size_t>(ns), 0.0);
    for (Eigen::Index i = 0; i < ns; ++i) {
      const int q = source_labels[static_cast<std::size_t>(i)];
      check_positive(q, classes, "alignment_loss (source)");
      if (bank.initialized[static_cast<std::size_t>(q)])
        used[static_cast<std::size_t>(i)] = 1.0;
      else
        ++r.report.skipped_source;
    }
    auto ds = distance_softmax(source_embeddings, source_labels, bank.target, settings.tau_s2t,
                               bank.initialized, used);
    r.report.loss_s2t = ds.losses.sum() / static_cast<double>(ns);
    ds.coef *= weight / static_cast<double>(ns);
    r.grad_source += grad_wrt_embeddings(ds, bank.target, settings.tau_s2t);
  }

  if (settings.use_t2s && nt > 0) {
    if (!(settings.tau_t2s > 0.0)) throw std::invalid_argument("tau_t2s must be positive");
    std::vector<double> scale(static_cast<std::size_t>(nt), 0.0);
    for (Eigen::Index j = 0; j < nt; ++j) {
      const auto jj = static_cast<std::size_t>(j);
      check_positive(target.labels[jj], classes, "alignment_loss (target)");
      if (target.confidences[jj] > settings.beta)
        scale[jj] = 1.0 / static_cast<double>(nt);
      else
        ++r.report.filtered_count;
    }
    const Eigen::MatrixXd protos = source_prototypes(head);
    const auto ds = distance_softmax(target_embeddings, target.labels, protos, settings.tau_t2s, {}, scale);
    r.report.loss_t2s = ds.losses.sum() / static_cast<double>(nt);
    r.grad_target += grad_wrt_embeddings(ds, protos, settings.tau_t2s);
    r.grad_head += row_normalization_backward(
        head.weight, grad_wrt_prototypes(ds, target_embeddings, protos, settings.tau_t2s));
  }

  if (settings.aux_ce && ns > 0) {
    const auto ce = cross_entropy(head, source_embeddings, source_labels);
    r.report.aux_ce = ce.loss;
    r.grad_source += settings.aux_ce_weight * ce.grad_embeddings;
    r.grad_head += settings.aux_ce_weight * ce.grad_weight;
  }

  r.report.total = weight * r.report.loss_s2t + r.report.loss_t2s +
                   (settings.aux_ce ? settings.aux_ce_weight * r.report.aux_ce : 0.0);
  return r;
}

BatchLossResult stabpa_batch_loss(const EncoderParams& encoder, const ClassifierHead& head,
                                  const PrototypeBank& bank, const Eigen::MatrixXd& source_x,
                                  std::span<const int> source_labels, const Eigen::MatrixXd& target_x,
                                  const TargetBatchLabels& target, const CurriculumClock& clock,
                                  const AlignmentSettings& settings) {
  const bool need_source = (settings.use_s2t || settings.aux_ce) && source_x.rows() > 0;
  const bool need_target = settings.use_t2s && target_x.rows() > 0;
  const Eigen::Index dim = encoder.embedding_dim();

  BatchEmbedding src, tgt;
  if (need_source) src = forward_batch(encoder, source_x);
  if (need_target) tgt = forward_batch(encoder, target_x);
  const Eigen::MatrixXd empty(0, dim);
  const double w = clock.weight();
  const auto al = alignment_loss(need_source ? src.embeddings : empty,
                                 need_source ? source_labels : std::span<const int>{},
                                 need_target ? tgt.embeddings : empty,
                                 need_target ? target : TargetBatchLabels{}, bank, head, w, settings);

  BatchLossResult out;
  out.report = al.report;
  out.report.step = clock.step;
  out.grad_head = al.grad_head;
  out.grad_encoder = encoder.zeros_like();
  auto accumulate = [&](const EncoderParams& g) {
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      out.grad_encoder.layers[l].weight += g.layers[l].weight;
      out.grad_encoder.layers[l].bias += g.layers[l].bias;
    }
  };
  if (need_source) accumulate(backward_batch(encoder, src.cache, al.grad_source).params);
  if (need_target) accumulate(backward_batch(encoder, tgt.cache, al.grad_target).params);
  return out;
}

}  // namespace stabpa
