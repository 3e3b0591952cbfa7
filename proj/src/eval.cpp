#include "stabpa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

#include "stabpa/pseudo.hpp"

namespace stabpa {

Eigen::VectorXd ProbeHead::logits(const Eigen::VectorXd& embedding) const {
  return weight * embedding + bias;
}

int ProbeHead::predict(const Eigen::VectorXd& embedding) const { return argmax(logits(embedding)); }

ProbeHead fit_probe(const Eigen::MatrixXd& support_embeddings, std::span<const int> support_labels, int way,
                    const ProbeConfig& config) {
  const Eigen::Index n = support_embeddings.rows();
  if (static_cast<std::size_t>(n) != support_labels.size() || n == 0)
    throw ShapeError("fit_probe: support and label counts differ or are zero");
  if (way < 2) throw std::invalid_argument("fit_probe: need at least two classes");
  if (config.steps < 0) throw std::invalid_argument("fit_probe: negative step count");
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, way);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = support_labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= way) throw ShapeError("fit_probe: label out of range");
    onehot(i, y) = 1.0;
  }
  if ((onehot.colwise().sum().array() > 0.0).count() < 2)
    throw std::invalid_argument("fit_probe: support covers a single class");

  // Gradient descent from zero keeps W in the row space of the support
  // features, W = A^T X, so every step only needs the n x n Gram matrix.
  const Eigen::MatrixXd gram = support_embeddings * support_embeddings.transpose();
  Eigen::MatrixXd coeffs = Eigen::MatrixXd::Zero(n, way);
  Eigen::RowVectorXd bias = Eigen::RowVectorXd::Zero(way);
  const double step = config.learning_rate / static_cast<double>(n);
  for (int s = 0; s < config.steps; ++s) {
    Eigen::MatrixXd logits = gram * coeffs;
    logits.rowwise() += bias;
    Eigen::MatrixXd grad = softmax_rows(logits) - onehot;
    coeffs -= step * grad;
    bias -= step * grad.colwise().sum();
  }
  ProbeHead head;
  head.weight = coeffs.transpose() * support_embeddings;
  head.bias = bias.transpose();
  head.steps_run = config.steps;
  return head;
}

MeanCi mean_and_ci(std::span<const double> values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= n;
  return {mean, 1.96 * std::sqrt(var) / std::sqrt(n)};
}

EvalReport evaluate_embeddings(const Eigen::MatrixXd& source_embeddings, const SamplePool& novel_source,
                               const Eigen::MatrixXd& target_embeddings, const SamplePool& novel_target,
                               Situation situation, const EvalConfig& config) {
  if (config.episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  if (static_cast<std::size_t>(source_embeddings.rows()) != novel_source.size() ||
      static_cast<std::size_t>(target_embeddings.rows()) != novel_target.size())
    throw ShapeError("evaluate: embeddings do not match pools");
  const ClassIndex source_index(novel_source);
  const ClassIndex target_index(novel_target);

  EvalReport report;
  report.situation = situation;
  report.way = config.way;
  report.shot = config.shot;
  report.episodes = config.episodes;
  report.queries_per_class = config.queries_per_class;
  report.seed = config.seed;
  report.probe_steps = config.probe.steps;
  report.per_episode.reserve(static_cast<std::size_t>(config.episodes));

  const std::uint64_t episode_root = derive_seed(config.seed, streams::kEpisodes);
  for (int e = 0; e < config.episodes; ++e) {
    Rng rng(derive_seed(episode_root, static_cast<std::uint64_t>(e)));
    const Episode ep = sample_episode(source_index, target_index, config.way, config.shot,
                                      config.queries_per_class, situation, rng);
    const auto& sup_emb = ep.support_domain == Domain::Source ? source_embeddings : target_embeddings;
    const auto& qry_emb = ep.query_domain == Domain::Source ? source_embeddings : target_embeddings;

    Eigen::MatrixXd xs(static_cast<Eigen::Index>(ep.support.size()), sup_emb.cols());
    std::vector<int> ys;
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      xs.row(static_cast<Eigen::Index>(i)) = sup_emb.row(static_cast<Eigen::Index>(ep.support[i].index));
      ys.push_back(ep.support[i].episode_label);
    }
    const ProbeHead probe = fit_probe(xs, ys, ep.way, config.probe);

    std::vector<int> truth;
    for (const auto& q : ep.query) truth.push_back(q.episode_label);
    if (config.shuffle_query_labels) std::shuffle(truth.begin(), truth.end(), rng);
    int correct = 0;
    for (std::size_t i = 0; i < ep.query.size(); ++i) {
      const Eigen::VectorXd u = qry_emb.row(static_cast<Eigen::Index>(ep.query[i].index)).transpose();
      if (probe.predict(u) == truth[i]) ++correct;
    }
    report.per_episode.push_back(static_cast<double>(correct) / static_cast<double>(ep.query.size()));
  }
  const auto mc = mean_and_ci(report.per_episode);
  report.mean = mc.mean;
  report.ci = mc.ci;

  if (config.diagnostics) {
    const auto ls = label_vector(novel_source);
    const auto lt = label_vector(novel_target);
    report.pd = prototype_distance(source_embeddings, ls, target_embeddings, lt);
    report.adr_source = average_distance_ratio(source_embeddings, ls);
    report.adr_target = average_distance_ratio(target_embeddings, lt);
  }
  return report;
}

EvalReport evaluate(const EncoderParams& encoder, const SamplePool& novel_source,
                    const SamplePool& novel_target, Situation situation, const EvalConfig& config) {
  return evaluate_embeddings(embed(encoder, feature_matrix(novel_source)), novel_source,
                             embed(encoder, feature_matrix(novel_target)), novel_target, situation, config);
}

nlohmann::json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"situation", std::string(to_string(r.situation))},
          {"way", r.way},
          {"shot", r.shot},
          {"episodes", r.episodes},
          {"queries_per_class", r.queries_per_class},
          {"seed", r.seed},
          {"mean", r.mean},
          {"ci", r.ci},
          {"pd", opt(r.pd)},
          {"adr_source", opt(r.adr_source)},
          {"adr_target", opt(r.adr_target)},
          {"normalized_features", r.normalized_features},
          {"probe_steps", r.probe_steps},
          {"per_episode", r.per_episode}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j[k].is_null()) return std::nullopt;
    return j[k].get<double>();
  };
  EvalReport r;
  r.situation = parse_situation(j.at("situation").get<std::string>());
  r.way = j.at("way").get<int>();
  r.shot = j.at("shot").get<int>();
  r.episodes = j.at("episodes").get<int>();
  r.queries_per_class = j.value("queries_per_class", 0);
  r.seed = j.value("seed", std::uint64_t{0});
  r.mean = j.at("mean").get<double>();
  r.ci = j.at("ci").get<double>();
  r.pd = opt("pd");
  r.adr_source = opt("adr_source");
  r.adr_target = opt("adr_target");
  r.normalized_features = j.value("normalized_features", true);
  r.probe_steps = j.value("probe_steps", 0);
  r.per_episode = j.at("per_episode").get<std::vector<double>>();
  return r;
}

// ---------------------------------------------------------------------------

ClassPrototypes class_prototypes(const Eigen::MatrixXd& embeddings, std::span<const int> labels) {
  if (static_cast<std::size_t>(embeddings.rows()) != labels.size())
    throw ShapeError("class_prototypes: label count mismatch");
  std::map<int, std::pair<Eigen::VectorXd, int>> acc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = acc.try_emplace(labels[i], Eigen::VectorXd::Zero(embeddings.cols()), 0);
    it->second.first += embeddings.row(static_cast<Eigen::Index>(i)).transpose();
    ++it->second.second;
  }
  ClassPrototypes p;
  p.means.resize(static_cast<Eigen::Index>(acc.size()), embeddings.cols());
  Eigen::Index r = 0;
  for (const auto& [k, sc] : acc) {
    p.classes.push_back(k);
    p.means.row(r++) = sc.first.transpose() / static_cast<double>(sc.second);
  }
  return p;
}

double prototype_distance(const Eigen::MatrixXd& source_embeddings, std::span<const int> source_labels,
                          const Eigen::MatrixXd& target_embeddings, std::span<const int> target_labels) {
  const auto ps = class_prototypes(source_embeddings, source_labels);
  const auto pt = class_prototypes(target_embeddings, target_labels);
  if (ps.classes != pt.classes)
    throw std::invalid_argument("prototype_distance: class sets differ between domains");
  if (ps.classes.empty()) throw std::invalid_argument("prototype_distance: no classes");
  return (ps.means - pt.means).rowwise().norm().mean();
}

double prototype_distance(const EncoderParams& encoder, const SamplePool& novel_source,
                          const SamplePool& novel_target) {
  return prototype_distance(embed(encoder, feature_matrix(novel_source)), label_vector(novel_source),
                            embed(encoder, feature_matrix(novel_target)), label_vector(novel_target));
}

namespace {

struct OwnAndNearest {
  double own = 0.0;
  double nearest_other = 0.0;
};

std::vector<OwnAndNearest> own_and_nearest(const Eigen::MatrixXd& embeddings, std::span<const int> labels) {
  const auto protos = class_prototypes(embeddings, labels);
  if (protos.classes.size() < 2) throw std::invalid_argument("distance ratio: need at least two classes");
  std::map<int, Eigen::Index> row_of;
  for (std::size_t r = 0; r < protos.classes.size(); ++r)
    row_of[protos.classes[r]] = static_cast<Eigen::Index>(r);
  std::vector<OwnAndNearest> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto x = embeddings.row(static_cast<Eigen::Index>(i));
    const Eigen::Index own = row_of.at(labels[i]);
    double nearest = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < protos.means.rows(); ++k)
      if (k != own) nearest = std::min(nearest, (x - protos.means.row(k)).norm());
    out[i] = {(x - protos.means.row(own)).norm(), nearest};
  }
  return out;
}

}  // namespace

std::vector<double> distance_ratios(const Eigen::MatrixXd& embeddings, std::span<const int> labels) {
  std::vector<double> r;
  for (const auto& d : own_and_nearest(embeddings, labels)) r.push_back(d.own / d.nearest_other);
  return r;
}

double average_distance_ratio(const Eigen::MatrixXd& embeddings, std::span<const int> labels) {
  const auto r = distance_ratios(embeddings, labels);
  return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
}

double average_distance_ratio(const EncoderParams& encoder, const SamplePool& pool) {
  return average_distance_ratio(embed(encoder, feature_matrix(pool)), label_vector(pool));
}

double nearest_prototype_accuracy(const Eigen::MatrixXd& embeddings, std::span<const int> labels) {
  const auto d = own_and_nearest(embeddings, labels);
  const auto hits = std::count_if(d.begin(), d.end(), [](const auto& x) { return x.own < x.nearest_other; });
  return static_cast<double>(hits) / static_cast<double>(d.size());
}

}  // namespace stabpa
