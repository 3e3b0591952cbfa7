#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stabpa/config.hpp"

namespace stabpa {

/// One row of the alignment ablation: which terms and whether strong
/// augmentation is on.
struct Variant {
  std::string name;
  bool s2t = false;
  bool t2s = false;
  bool augment = false;

  TrainConfig apply(TrainConfig config) const;
};

/// none, aug, s2t, t2s, both, both+aug.
const std::vector<Variant>& ablation_variants();
const Variant& find_variant(std::string_view name);

/// Cross-domain score of one encoder: the mean of the s-t and t-s episode
/// accuracies, plus the diagnostics used by the trend checks.
struct CrossDomainScore {
  double accuracy = 0.0;
  double ci = 0.0;                  // over the pooled episodes of both situations
  std::vector<double> per_episode;  // s-t episodes followed by t-s episodes
  double st_accuracy = 0.0;
  double ts_accuracy = 0.0;
  double pd = 0.0;
  double adr_target = 0.0;
};

CrossDomainScore score_cross_domain(const EncoderParams& encoder, const DatasetBundle& bundle,
                                    const EvalConfig& eval);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  CrossDomainScore score;
  double initial_pd = 0.0;  // PD of the shared initial encoder
  EncoderParams encoder;
  std::vector<EpochMetrics> epochs;
};

/// Maps a seed to the bundle trained on. The CLI reuses one dataset; the
/// acceptance suite regenerates the benchmark per seed.
using BundleForSeed = std::function<const DatasetBundle&(std::uint64_t seed)>;

/// Runs every variant for every seed. The initial classifier is trained
/// once per seed and shared by all variants of that seed.
std::vector<AblationRow> run_ablation(const RunConfig& config, const std::vector<Variant>& variants,
                                      const std::vector<std::uint64_t>& seeds,
                                      const BundleForSeed& bundle_for_seed,
                                      const std::function<void(const AblationRow&)>& progress = {});

struct VariantSummary {
  std::string variant;
  double accuracy = 0.0;  // over the pooled episodes of every seed
  double ci = 0.0;
  double pd = 0.0;
  double adr_target = 0.0;
};

std::vector<VariantSummary> summarize(const std::vector<AblationRow>& rows);

std::string ablation_csv(const std::vector<AblationRow>& rows);

struct OrderingCheck {
  bool passed = false;
  std::vector<std::string> failures;
};

/// none < {s2t, t2s} < both < both+aug, and both+aug - aug >= margin.
OrderingCheck check_ablation_ordering(const std::vector<VariantSummary>& summary, double margin = 0.05);

// ---------------------------------------------------------------------------
// Hyperparameter robustness sweep: one axis at a time around the defaults.

struct SweepPoint {
  std::string parameter;  // "lambda", "beta" or "momentum"
  double value = 0.0;
  bool is_default = false;
};

std::vector<SweepPoint> robustness_grid(const TrainConfig& defaults);

struct SweepRow {
  SweepPoint point;
  CrossDomainScore score;  // episodes pooled and diagnostics averaged over seeds
};

std::vector<SweepRow> run_sweep(const RunConfig& config, const std::vector<SweepPoint>& grid,
                                const std::vector<std::uint64_t>& seeds, const BundleForSeed& bundle_for_seed,
                                const std::function<void(const SweepRow&)>& progress = {});

std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Per parameter, the default value is best or its CI overlaps the best.
OrderingCheck check_sweep_defaults(const std::vector<SweepRow>& rows);

}  // namespace stabpa
