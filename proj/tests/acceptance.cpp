#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "cli_fixture.hpp"
#include "stabpa/experiment.hpp"
#include "support.hpp"

using namespace stabpa;
using namespace stabpa::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool passed = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int report(int id, const std::string& name, Outcome& o) {
  std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << id << ": " << name << o.detail.str()
            << std::endl;
  return o.passed ? 0 : 1;
}

Eigen::VectorXd as_vector(const Eigen::MatrixXd& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

Eigen::MatrixXd as_matrix(const Eigen::VectorXd& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), rows, cols);
}

// A loss this close to zero has a gradient below the resolution of central
// differences, so such draws are replaced.
bool saturated(double loss, int& redrawn) {
  if (loss >= 1e-3) return false;
  ++redrawn;
  return true;
}

// ---------------------------------------------------------------------------

int gradient_exactness() {
  const auto t0 = Clock::now();
  Outcome o;
  std::mt19937_64 rng(2024);
  double worst_st = 0, worst_ts = 0, worst_batch = 0, worst_enc = 0;
  int redrawn = 0;
  constexpr int kInstances = 100;
  for (int i = 0; i < kInstances; ++i) {
    const int c = 2 + i % 5;
    const int d = 3 + i % 6;
    const int y = i % c;

    Eigen::VectorXd u;
    auto bank = PrototypeBank::zeros(c, d, 0.1);
    std::fill(bank.initialized.begin(), bank.initialized.end(), 1);
    std::optional<PrototypeLoss> st;
    do {
      u = random_unit(d, rng);
      bank.target = random_matrix(c, d, rng, 0.5);
      st = loss_s2t(u, y, bank);
    } while (saturated(st->loss, redrawn));
    auto f_st_u = [&](const Eigen::VectorXd& v) { return loss_s2t(v, y, bank)->loss; };
    auto f_st_p = [&](const Eigen::VectorXd& v) {
      auto b = bank;
      b.target = as_matrix(v, c, d);
      return loss_s2t(u, y, b)->loss;
    };
    worst_st = std::max(
        {worst_st, relative_error(st->grad_embedding, numeric_gradient(f_st_u, u)),
         relative_error(as_vector(st->grad_prototypes), numeric_gradient(f_st_p, as_vector(bank.target)))});

    ClassifierHead head;
    SourcePrototypeLoss ts;
    do {
      head.weight = random_matrix(c, d, rng);
      ts = loss_t2s(u, y, head);
    } while (saturated(ts.loss, redrawn));
    auto f_ts_u = [&](const Eigen::VectorXd& v) { return loss_t2s(v, y, head).loss; };
    auto f_ts_w = [&](const Eigen::VectorXd& v) {
      ClassifierHead h;
      h.weight = as_matrix(v, c, d);
      return loss_t2s(u, y, h).loss;
    };
    worst_ts = std::max(
        {worst_ts, relative_error(ts.grad_embedding, numeric_gradient(f_ts_u, u)),
         relative_error(as_vector(ts.grad_weight), numeric_gradient(f_ts_w, as_vector(head.weight)))});

    const std::array<int, 4> widths{5, 7, 6, d};
    const auto enc = init_encoder(widths, static_cast<std::uint64_t>(i));
    const Eigen::MatrixXd x = random_matrix(3, 5, rng);
    const Eigen::MatrixXd g = random_matrix(3, d, rng);
    const auto fwd = forward_batch(enc, x);
    const auto back = backward_batch(enc, fwd.cache, g);
    auto f_enc = [&](const Eigen::VectorXd& v) {
      return (forward_batch(unflatten(enc, v), x).embeddings.array() * g.array()).sum();
    };
    worst_enc =
        std::max(worst_enc, relative_error(flatten(back.params), numeric_gradient(f_enc, flatten(enc))));

    ClassifierHead bhead = init_head(c, d, static_cast<std::uint64_t>(i));
    bhead.temperature = 0.1 + 0.2 * (i % 3);
    const Eigen::MatrixXd xs = random_matrix(4, 5, rng);
    const Eigen::MatrixXd xt = random_matrix(4, 5, rng);
    std::vector<int> ys, yt;
    std::vector<double> conf;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int k = 0; k < 4; ++k) {
      ys.push_back((i + k) % c);
      yt.push_back((i + 2 * k) % c);
      conf.push_back(unit(rng));
    }
    const TargetBatchLabels target{yt, conf};
    const CurriculumClock clk{i, kInstances};
    const AlignmentSettings settings;
    const auto batch = stabpa_batch_loss(enc, bhead, bank, xs, ys, xt, target, clk, settings);
    auto f_batch = [&](const Eigen::VectorXd& v) {
      return stabpa_batch_loss(unflatten(enc, v), bhead, bank, xs, ys, xt, target, clk, settings)
          .report.total;
    };
    auto f_head = [&](const Eigen::VectorXd& v) {
      ClassifierHead h = bhead;
      h.weight = as_matrix(v, c, d);
      return stabpa_batch_loss(enc, h, bank, xs, ys, xt, target, clk, settings).report.total;
    };
    worst_batch = std::max(
        {worst_batch, relative_error(flatten(batch.grad_encoder), numeric_gradient(f_batch, flatten(enc))),
         relative_error(as_vector(batch.grad_head), numeric_gradient(f_head, as_vector(bhead.weight)))});
  }
  const double elapsed = seconds_since(t0);
  o.detail << " (max relative error: s2t " << worst_st << ", t2s " << worst_ts << ", batch " << worst_batch
           << ", encoder " << worst_enc << "; " << redrawn << " saturated draws replaced; " << elapsed
           << " s)";
  o.require(worst_st < 1e-5, "source-to-target gradient");
  o.require(worst_ts < 1e-5, "target-to-source gradient");
  o.require(worst_batch < 1e-5, "batch loss gradient");
  o.require(worst_enc < 1e-5, "encoder backward");
  o.require(elapsed < 30.0, "runtime under 30 s");
  return report(1, "analytic gradients match central differences on 100 instances", o);
}

// ---------------------------------------------------------------------------

int closed_forms() {
  Outcome o;
  const double w_end = curriculum_weight(500, 500);
  o.require(curriculum_weight(0, 500) == 0.0, "w(0) = 0");
  o.require(std::abs(w_end - (2.0 / (1.0 + std::exp(-1.0)) - 1.0)) < 1e-6, "w(T_max)");

  const double m = 0.1;
  auto bank = PrototypeBank::zeros(1, 4, m);
  const Eigen::MatrixXd u = (Eigen::MatrixXd(2, 4) << 0.1, 0.2, -0.3, 0.4, 0.3, -0.2, 0.1, 0.0).finished();
  const Eigen::VectorXd mu = u.colwise().mean().transpose();
  const std::vector<int> labels{0, 0};
  const std::vector<double> conf{0.9, 0.9};
  double worst = 0.0;
  for (int j = 1; j <= 50; ++j) {
    update_target_prototypes(bank, u, labels, conf, 0.5);
    worst =
        std::max(worst, (bank.target.row(0).transpose() - (1.0 - std::pow(m, j)) * mu).cwiseAbs().maxCoeff());
  }
  o.require(worst <= 1e-12, "momentum closed form");

  Eigen::VectorXd p0(2), pt(2);
  p0 << 0.7, 0.3;
  pt << 0.2, 0.8;
  // Hand computation with lambda = 0.2: q = (0.14 + 0.16, 0.06 + 0.64).
  const auto q = interpolate_pseudo_label(p0, pt, 0.2);
  const double q1 = 0.2 * 0.3 + 0.8 * 0.8;
  o.require(q.label == 1 && std::abs(q.confidence - q1) <= 1e-15, "interpolation example");
  o.require(std::abs(q.confidence - 0.70) < 1e-15, "interpolation equals 0.70");
  o.detail << " (w(T_max) = " << w_end << ", momentum error " << worst << ", q = (" << 1.0 - q.confidence
           << ", " << q.confidence << "))";
  return report(2, "curriculum weight, momentum prototype and interpolation closed forms", o);
}

// ---------------------------------------------------------------------------
// Independent re-derivation of the batch objective with explicit loops.

double brute_softmax_nll(const std::vector<double>& logits, int positive) {
  double mx = -INFINITY;
  for (double l : logits) mx = std::max(mx, l);
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return -(logits[static_cast<std::size_t>(positive)] - mx - std::log(z));
}

double sq_dist(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

double brute_batch_loss(const EncoderParams& enc, const ClassifierHead& head, const PrototypeBank& bank,
                        const Eigen::MatrixXd& xs, const std::vector<int>& ys, const Eigen::MatrixXd& xt,
                        const std::vector<int>& yt, const std::vector<double>& conf, double w,
                        const AlignmentSettings& s) {
  const int c = static_cast<int>(head.weight.rows());
  double st = 0.0;
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const int y = ys[static_cast<std::size_t>(i)];
    if (!bank.initialized[static_cast<std::size_t>(y)]) continue;
    const Eigen::VectorXd u = naive_embedding(enc, xs.row(i).transpose());
    std::vector<double> logits;
    int pos = 0;
    for (int k = 0; k < c; ++k) {
      if (!bank.initialized[static_cast<std::size_t>(k)]) continue;
      if (k == y) pos = static_cast<int>(logits.size());
      logits.push_back(-sq_dist(u, bank.target.row(k).transpose()) / s.tau_s2t);
    }
    st += brute_softmax_nll(logits, pos);
  }
  st /= static_cast<double>(xs.rows());

  double ts = 0.0;
  for (Eigen::Index j = 0; j < xt.rows(); ++j) {
    if (!(conf[static_cast<std::size_t>(j)] > s.beta)) continue;
    const Eigen::VectorXd u = naive_embedding(enc, xt.row(j).transpose());
    std::vector<double> logits;
    for (int k = 0; k < c; ++k) {
      const Eigen::VectorXd proto = head.weight.row(k).transpose() / head.weight.row(k).norm();
      logits.push_back(-sq_dist(u, proto) / s.tau_t2s);
    }
    ts += brute_softmax_nll(logits, yt[static_cast<std::size_t>(j)]);
  }
  ts /= static_cast<double>(xt.rows());

  double ce = 0.0;
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const Eigen::VectorXd u = naive_embedding(enc, xs.row(i).transpose());
    std::vector<double> logits;
    for (int k = 0; k < c; ++k) logits.push_back(head.weight.row(k).dot(u) / head.temperature);
    ce += brute_softmax_nll(logits, ys[static_cast<std::size_t>(i)]);
  }
  ce /= static_cast<double>(xs.rows());

  return (s.use_s2t ? w * st : 0.0) + (s.use_t2s ? ts : 0.0) + (s.aux_ce ? s.aux_ce_weight * ce : 0.0);
}

int loss_oracle() {
  Outcome o;
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::array<int, 3> widths{4, 6, 3};
  double worst = 0.0;
  int cases = 0;
  AlignmentSettings settings;
  for (int c = 1; c <= 3; ++c)
    for (int n = 1; n <= 3; ++n)
      for (int mask = 1; mask < (1 << c); ++mask)
        for (int rep = 0; rep < 4; ++rep) {
          const int b = c * n;
          const auto enc = init_encoder(widths, static_cast<std::uint64_t>(cases));
          auto head = init_head(c, 3, static_cast<std::uint64_t>(cases));
          head.temperature = 0.1 + unit(rng);
          auto bank = PrototypeBank::zeros(c, 3, 0.1);
          bank.target = random_matrix(c, 3, rng, 0.6);
          for (int k = 0; k < c; ++k) bank.initialized[static_cast<std::size_t>(k)] = (mask >> k) & 1;
          const Eigen::MatrixXd xs = random_matrix(b, 4, rng);
          const Eigen::MatrixXd xt = random_matrix(b, 4, rng);
          std::vector<int> ys, yt;
          std::vector<double> conf;
          for (int k = 0; k < c; ++k)
            for (int i = 0; i < n; ++i) {
              ys.push_back(k);
              yt.push_back((k + i) % c);
              conf.push_back(unit(rng));
            }
          settings.use_s2t = rep != 1;
          settings.use_t2s = rep != 2;
          settings.aux_ce = rep != 3;
          const CurriculumClock clk{cases % 17, 16};
          const auto r = stabpa_batch_loss(enc, head, bank, xs, ys, xt, {yt, conf}, clk, settings);
          const double want = brute_batch_loss(enc, head, bank, xs, ys, xt, yt, conf, clk.weight(), settings);
          worst = std::max(worst, std::abs(r.report.total - want));
          ++cases;
        }
  o.detail << " (" << cases << " batches, max abs difference " << worst << ")";
  o.require(worst <= 1e-10, "brute-force agreement");
  return report(3, "batch loss equals the brute-force re-derivation", o);
}

// ---------------------------------------------------------------------------

struct Benchmark {
  RunConfig config;
  std::map<std::uint64_t, DatasetBundle> bundles;

  const DatasetBundle& bundle(std::uint64_t seed) {
    auto it = bundles.find(seed);
    if (it == bundles.end()) {
      auto d = config.data;
      d.seed = seed;
      it = bundles.emplace(seed, generate_synthetic(d)).first;
    }
    return it->second;
  }
};

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

int trend_reproduction(const std::vector<AblationRow>& rows, double elapsed) {
  Outcome o;
  const auto summary = summarize(rows);
  o.detail << " (";
  for (const auto& s : summary) o.detail << s.variant << " " << s.accuracy << " +- " << s.ci << "; ";
  const auto ordering = check_ablation_ordering(summary, 0.05);
  for (const auto& f : ordering.failures) o.require(false, f);

  double initial_pd = 0.0;
  for (const auto& r : rows)
    if (r.variant == "both+aug") initial_pd += r.initial_pd / static_cast<double>(kSeeds.size());
  const VariantSummary *full = nullptr, *aug = nullptr;
  for (const auto& s : summary) {
    if (s.variant == "both+aug") full = &s;
    if (s.variant == "aug") aug = &s;
  }
  o.detail << "PD " << initial_pd << " -> " << full->pd << "; target ADR " << full->adr_target << " vs "
           << aug->adr_target << "; " << elapsed << " s)";
  o.require(full->pd < initial_pd, "PD decreases during training");
  o.require(full->adr_target < aug->adr_target, "target ADR below source-only");
  o.require(elapsed < 600.0, "runtime under 10 min");
  return report(4, "ablation ordering, margin over source-only, PD and ADR trends", o);
}

int pseudo_label_trend(const std::vector<AblationRow>& rows) {
  Outcome o;
  o.detail << " (";
  for (const auto& r : rows) {
    if (r.variant != "both+aug") continue;
    bool online_wins = false;
    bool filter_helps = true;
    for (const auto& e : r.epochs) {
      online_wins = online_wins || e.online_accuracy > e.frozen_accuracy;
      if (e.confident_count > 0) filter_helps = filter_helps && e.confident_accuracy > e.pseudo_accuracy;
    }
    const auto& last = r.epochs.back();
    o.detail << "seed " << r.seed << ": frozen " << last.frozen_accuracy << ", online "
             << last.online_accuracy << ", pseudo " << last.pseudo_accuracy << ", confident "
             << last.confident_accuracy << "; ";
    o.require(online_wins, "online beats frozen at some epoch, seed " + std::to_string(r.seed));
    o.require(filter_helps, "confident samples more accurate, seed " + std::to_string(r.seed));
  }
  o.detail << ")";
  return report(5, "online pseudo-labels overtake the frozen ones and filtering raises accuracy", o);
}

int protocol_fidelity(Benchmark& bench, const std::vector<AblationRow>& rows) {
  Outcome o;
  int encoders = 0;
  double worst_gap = INFINITY;
  for (const auto& r : rows) {
    auto one = bench.config.eval;
    one.seed = r.seed;
    one.shot = 1;
    const auto s1 = score_cross_domain(r.encoder, bench.bundle(r.seed), one);
    worst_gap = std::min(worst_gap, r.score.accuracy - s1.accuracy);
    o.require(r.score.accuracy >= s1.accuracy,
              r.variant + " seed " + std::to_string(r.seed) + " 5-shot >= 1-shot");
    ++encoders;
  }

  const auto& full =
      *std::find_if(rows.begin(), rows.end(), [](const auto& r) { return r.variant == "both+aug"; });
  const auto& b = bench.bundle(full.seed);
  auto cfg = bench.config.eval;
  cfg.seed = full.seed;
  cfg.shuffle_query_labels = true;
  const auto chance = evaluate(full.encoder, b.novel_source, b.novel_target, Situation::SourceTarget, cfg);
  const double target = 1.0 / cfg.way;
  o.require(std::abs(chance.mean - target) <= chance.ci, "shuffled control within CI of 1/way");

  cfg.shuffle_query_labels = false;
  const auto real = evaluate(full.encoder, b.novel_source, b.novel_target, Situation::TargetSource, cfg);
  double mean = 0.0;
  for (double a : real.per_episode) mean += a;
  mean /= static_cast<double>(real.per_episode.size());
  double var = 0.0;
  for (double a : real.per_episode) var += (a - mean) * (a - mean);
  var /= static_cast<double>(real.per_episode.size());
  const double ci = 1.96 * std::sqrt(var) / std::sqrt(600.0);
  o.require(real.per_episode.size() == 600, "600 episodes");
  o.require(std::abs(real.ci - ci) <= 1e-15, "CI recomputed from the episodes");
  o.require(real.probe_steps == 1000 && chance.probe_steps == 1000, "probe runs 1000 steps");
  o.detail << " (" << encoders << " encoders, smallest 5-shot minus 1-shot " << worst_gap << "; shuffled "
           << chance.mean << " +- " << chance.ci << "; CI " << real.ci << " vs " << ci << ")";
  return report(6, "shot monotonicity, chance control, CI and probe length", o);
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string text = read_file(e.path());
    if (e.path().filename() == kRunManifestFile) {
      auto j = nlohmann::json::parse(text);
      j.erase("wall_clock_seconds");
      text = j.dump();
      const std::string prefix = dir.string();
      for (auto at = text.find(prefix); at != std::string::npos; at = text.find(prefix, at))
        text.replace(at, prefix.size(), "<run>");
    }
    files[fs::relative(e.path(), dir).string()] = text;
  }
  return files;
}

int determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "stabpa_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto cfg = (root / "small.cfg").string();
  std::ofstream(cfg) << kSmallConfig;

  auto session = [&](const std::string& name) {
    const fs::path dir = root / name;
    const auto data = (dir / "data").string();
    const auto train = (dir / "train").string();
    const std::vector<std::vector<std::string>> commands{
        {"generate", "--config", cfg, "--seed", "11", "--out", data},
        {"train", "--config", cfg, "--seed", "11", "--data", data, "--out", train, "--pseudo-labels"},
        {"eval", "--config", cfg, "--seed", "11", "--checkpoint", train + "/" + kCheckpointFile, "--data",
         data, "--out", (dir / "eval").string()},
        {"ablate", "--config", cfg, "--seed", "11", "--data", data, "--out", (dir / "ablate").string(),
         "--seeds", "11"},
        {"sweep", "--config", cfg, "--seed", "11", "--data", data, "--out", (dir / "sweep").string(),
         "--seeds", "11"},
    };
    for (const auto& args : commands) {
      const auto r = run(args);
      o.require(r.code == 0, args.front() + " exits 0: " + r.err);
    }
    return snapshot(dir);
  };
  const auto a = session("a");
  const auto b = session("b");
  std::size_t differing = 0;
  for (const auto& [file, text] : a) {
    const auto it = b.find(file);
    if (it == b.end() || it->second != text) {
      ++differing;
      o.require(false, file + " differs");
    }
  }
  o.require(a.size() == b.size(), "same file set");
  o.detail << " (" << a.size() << " files compared across generate, train, eval, ablate and sweep; "
           << differing << " differ)";
  return report(7, "re-running every command with the same seed is bit-identical", o);
}

int robustness(Benchmark& bench) {
  Outcome o;
  const auto t0 = Clock::now();
  std::vector<SweepRow> rows;
  try {
    rows = run_sweep(bench.config, robustness_grid(bench.config.train), kSeeds,
                     [&](std::uint64_t s) -> const DatasetBundle& { return bench.bundle(s); });
  } catch (const std::exception& e) {
    o.require(false, std::string("sweep threw: ") + e.what());
    return report(8, "hyperparameter sweep", o);
  }
  const std::string table = sweep_csv(rows);
  std::cout << table;
  o.require(rows.size() == robustness_grid(bench.config.train).size(), "one row per grid point");
  o.require(std::count(table.begin(), table.end(), '\n') == static_cast<long>(rows.size() + 1),
            "table emitted");
  const auto check = check_sweep_defaults(rows);
  for (const auto& f : check.failures) o.require(false, f);
  o.detail << " (" << rows.size() << " grid points, " << seconds_since(t0) << " s)";
  return report(8, "sweep completes and the defaults are best or tied within CI", o);
}

}  // namespace

int main() {
  int failures = 0;
  failures += gradient_exactness();
  failures += closed_forms();
  failures += loss_oracle();

  Benchmark bench;
  bench.config.propagate_seed();
  const auto t0 = Clock::now();
  const auto rows = run_ablation(bench.config, ablation_variants(), kSeeds,
                                 [&](std::uint64_t s) -> const DatasetBundle& { return bench.bundle(s); });
  const double elapsed = seconds_since(t0);
  std::cout << ablation_csv(rows);
  failures += trend_reproduction(rows, elapsed);
  failures += pseudo_label_trend(rows);
  failures += protocol_fidelity(bench, rows);
  failures += determinism();
  failures += robustness(bench);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
