#include "stabpa/experiment.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "stabpa/format.hpp"

namespace stabpa {

namespace {

RunConfig for_seed(RunConfig config, std::uint64_t seed) {
  config.seed = seed;
  config.train.seed = seed;
  config.eval.seed = seed;
  return config;
}

const VariantSummary* find_summary(const std::vector<VariantSummary>& s, std::string_view name) {
  for (const auto& v : s)
    if (v.variant == name) return &v;
  return nullptr;
}

}  // namespace

TrainConfig Variant::apply(TrainConfig config) const {
  config.use_s2t = s2t;
  config.use_t2s = t2s;
  config.use_augmentation = augment;
  return config;
}

const std::vector<Variant>& ablation_variants() {
  static const std::vector<Variant> v{
      {"none", false, false, false}, {"aug", false, false, true}, {"s2t", true, false, false},
      {"t2s", false, true, false},   {"both", true, true, false}, {"both+aug", true, true, true},
  };
  return v;
}

const Variant& find_variant(std::string_view name) {
  for (const auto& v : ablation_variants())
    if (v.name == name) return v;
  throw std::invalid_argument("unknown ablation variant '" + std::string(name) + "'");
}

CrossDomainScore score_cross_domain(const EncoderParams& encoder, const DatasetBundle& bundle,
                                    const EvalConfig& eval) {
  const Eigen::MatrixXd es = embed(encoder, feature_matrix(bundle.novel_source));
  const Eigen::MatrixXd et = embed(encoder, feature_matrix(bundle.novel_target));
  EvalConfig cfg = eval;
  cfg.diagnostics = false;
  const auto st =
      evaluate_embeddings(es, bundle.novel_source, et, bundle.novel_target, Situation::SourceTarget, cfg);
  const auto ts =
      evaluate_embeddings(es, bundle.novel_source, et, bundle.novel_target, Situation::TargetSource, cfg);
  CrossDomainScore s;
  s.per_episode = st.per_episode;
  s.per_episode.insert(s.per_episode.end(), ts.per_episode.begin(), ts.per_episode.end());
  const auto mc = mean_and_ci(s.per_episode);
  s.accuracy = mc.mean;
  s.ci = mc.ci;
  s.st_accuracy = st.mean;
  s.ts_accuracy = ts.mean;
  s.pd = prototype_distance(es, label_vector(bundle.novel_source), et, label_vector(bundle.novel_target));
  s.adr_target = average_distance_ratio(et, label_vector(bundle.novel_target));
  return s;
}

std::vector<AblationRow> run_ablation(const RunConfig& config, const std::vector<Variant>& variants,
                                      const std::vector<std::uint64_t>& seeds,
                                      const BundleForSeed& bundle_for_seed,
                                      const std::function<void(const AblationRow&)>& progress) {
  std::vector<AblationRow> rows;
  for (const auto seed : seeds) {
    const RunConfig rc = for_seed(config, seed);
    const DatasetBundle& bundle = bundle_for_seed(seed);
    const InitialModel initial = train_initial_model(bundle, rc.train);
    const double initial_pd =
        prototype_distance(initial.frozen.encoder, bundle.novel_source, bundle.novel_target);
    for (const auto& v : variants) {
      const auto result = train_from_initial(bundle, v.apply(rc.train), initial);
      AblationRow row{v.name, seed, score_cross_domain(result.state.encoder, bundle, rc.eval), initial_pd,
                      result.state.encoder, result.log.epochs};
      if (progress) progress(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::vector<VariantSummary> summarize(const std::vector<AblationRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRow*>> groups;
  for (const auto& r : rows) {
    if (!groups.count(r.variant)) order.push_back(r.variant);
    groups[r.variant].push_back(&r);
  }
  std::vector<VariantSummary> out;
  for (const auto& name : order) {
    const auto& g = groups[name];
    std::vector<double> pooled;
    VariantSummary s{name};
    for (const auto* r : g) {
      pooled.insert(pooled.end(), r->score.per_episode.begin(), r->score.per_episode.end());
      s.pd += r->score.pd / static_cast<double>(g.size());
      s.adr_target += r->score.adr_target / static_cast<double>(g.size());
    }
    const auto mc = mean_and_ci(pooled);
    s.accuracy = mc.mean;
    s.ci = mc.ci;
    out.push_back(s);
  }
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,s2t,t2s,aug,seed,accuracy,ci,st_accuracy,ts_accuracy,pd,adr_target,initial_pd\n";
  for (const auto& r : rows) {
    const auto& v = find_variant(r.variant);
    out += r.variant + ',' + (v.s2t ? "1" : "0") + ',' + (v.t2s ? "1" : "0") + ',' + (v.augment ? "1" : "0") +
           ',' + std::to_string(r.seed) + ',' + format_double(r.score.accuracy) + ',' +
           format_double(r.score.ci) + ',' + format_double(r.score.st_accuracy) + ',' +
           format_double(r.score.ts_accuracy) + ',' + format_double(r.score.pd) + ',' +
           format_double(r.score.adr_target) + ',' + format_double(r.initial_pd) + '\n';
  }
  return out;
}

OrderingCheck check_ablation_ordering(const std::vector<VariantSummary>& summary, double margin) {
  OrderingCheck c;
  auto get = [&](std::string_view name) -> const VariantSummary* {
    const auto* s = find_summary(summary, name);
    if (!s) c.failures.push_back("missing variant " + std::string(name));
    return s;
  };
  const auto* none = get("none");
  const auto* s2t = get("s2t");
  const auto* t2s = get("t2s");
  const auto* both = get("both");
  const auto* full = get("both+aug");
  const auto* aug = get("aug");
  if (!c.failures.empty()) return c;
  auto less = [&](const VariantSummary* a, const VariantSummary* b) {
    if (!(a->accuracy < b->accuracy))
      c.failures.push_back(a->variant + " (" + format_double(a->accuracy) + ") is not below " + b->variant +
                           " (" + format_double(b->accuracy) + ")");
  };
  less(none, s2t);
  less(none, t2s);
  less(s2t, both);
  less(t2s, both);
  less(both, full);
  if (!(full->accuracy - aug->accuracy >= margin))
    c.failures.push_back("both+aug exceeds aug by " + format_double(full->accuracy - aug->accuracy) +
                         ", below the required " + format_double(margin));
  c.passed = c.failures.empty();
  return c;
}

std::vector<SweepPoint> robustness_grid(const TrainConfig& d) {
  std::vector<SweepPoint> g;
  for (double v : {0.0, 0.2, 0.4, 0.8, 1.0}) g.push_back({"lambda", v, v == d.lambda});
  for (double v : {0.0, 0.5, 0.9}) g.push_back({"beta", v, v == d.beta});
  for (double v : {0.1, 0.9}) g.push_back({"momentum", v, v == d.momentum});
  return g;
}

std::vector<SweepRow> run_sweep(const RunConfig& config, const std::vector<SweepPoint>& grid,
                                const std::vector<std::uint64_t>& seeds, const BundleForSeed& bundle_for_seed,
                                const std::function<void(const SweepRow&)>& progress) {
  auto configure = [](TrainConfig t, const SweepPoint& p) {
    if (p.parameter == "lambda")
      t.lambda = p.value;
    else if (p.parameter == "beta")
      t.beta = p.value;
    else if (p.parameter == "momentum")
      t.momentum = p.value;
    else
      throw std::invalid_argument("unknown sweep parameter '" + p.parameter + "'");
    return t;
  };
  std::vector<SweepRow> rows(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) rows[i].point = grid[i];
  std::vector<std::vector<double>> pooled(grid.size());
  for (const auto seed : seeds) {
    const RunConfig rc = for_seed(config, seed);
    const DatasetBundle& bundle = bundle_for_seed(seed);
    const InitialModel initial = train_initial_model(bundle, rc.train);
    // Points that resolve to the same training config share one run.
    std::vector<std::pair<TrainConfig, CrossDomainScore>> done;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const TrainConfig tc = configure(rc.train, grid[i]);
      auto it = std::find_if(done.begin(), done.end(), [&](const auto& d) { return d.first == tc; });
      if (it == done.end()) {
        const auto result = train_from_initial(bundle, tc, initial);
        done.emplace_back(tc, score_cross_domain(result.state.encoder, bundle, rc.eval));
        it = std::prev(done.end());
      }
      const auto& s = it->second;
      auto& acc = rows[i].score;
      const double share = 1.0 / static_cast<double>(seeds.size());
      acc.st_accuracy += share * s.st_accuracy;
      acc.ts_accuracy += share * s.ts_accuracy;
      acc.pd += share * s.pd;
      acc.adr_target += share * s.adr_target;
      pooled[i].insert(pooled[i].end(), s.per_episode.begin(), s.per_episode.end());
    }
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    auto& s = rows[i].score;
    s.per_episode = std::move(pooled[i]);
    const auto mc = mean_and_ci(s.per_episode);
    s.accuracy = mc.mean;
    s.ci = mc.ci;
    if (progress) progress(rows[i]);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "parameter,value,is_default,accuracy,ci,st_accuracy,ts_accuracy,pd,adr_target\n";
  for (const auto& r : rows)
    out += r.point.parameter + ',' + format_double(r.point.value) + ',' + (r.point.is_default ? "1" : "0") +
           ',' + format_double(r.score.accuracy) + ',' + format_double(r.score.ci) + ',' +
           format_double(r.score.st_accuracy) + ',' + format_double(r.score.ts_accuracy) + ',' +
           format_double(r.score.pd) + ',' + format_double(r.score.adr_target) + '\n';
  return out;
}

OrderingCheck check_sweep_defaults(const std::vector<SweepRow>& rows) {
  OrderingCheck c;
  std::vector<std::string> params;
  for (const auto& r : rows)
    if (std::find(params.begin(), params.end(), r.point.parameter) == params.end())
      params.push_back(r.point.parameter);
  for (const auto& p : params) {
    const SweepRow* best = nullptr;
    const SweepRow* def = nullptr;
    for (const auto& r : rows) {
      if (r.point.parameter != p) continue;
      if (!best || r.score.accuracy > best->score.accuracy) best = &r;
      if (r.point.is_default) def = &r;
    }
    if (!def) {
      c.failures.push_back(p + ": grid has no default value");
      continue;
    }
    if (def->score.accuracy + def->score.ci < best->score.accuracy - best->score.ci)
      c.failures.push_back(p + ": default " + format_double(def->point.value) + " (" +
                           format_double(def->score.accuracy) + ") is outside the CI of the best value " +
                           format_double(best->point.value) + " (" + format_double(best->score.accuracy) +
                           ")");
  }
  c.passed = c.failures.empty();
  return c;
}

}  // namespace stabpa
