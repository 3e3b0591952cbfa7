#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "stabpa/rng.hpp"

namespace stabpa {

enum class Domain { Source, Target };

std::string_view to_string(Domain d);
Domain parse_domain(std::string_view s);

struct Sample {
  std::int64_t id = 0;
  Domain domain = Domain::Source;
  std::optional<int> label;
  Eigen::VectorXd features;

  bool operator==(const Sample&) const = default;
};

using SamplePool = std::vector<Sample>;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameters of the synthetic multi-domain benchmark.
///
/// Every class gets a source center drawn from N(0, center_scale^2 I), or,
/// with center_rank > 0, from the same distribution restricted to one shared
/// random subspace and rescaled to the same expected norm.
/// Target-domain samples of the same class are centred at R c + s, with R a
/// rotation by `rotation_angle` radians in every plane of a random
/// orthonormal basis and s a shared shift of norm `shift_magnitude`.
struct SyntheticConfig {
  int base_classes = 20;
  int validation_classes = 5;
  int novel_classes = 10;
  int dim = 64;
  double center_scale = 1.0;
  /// 0 draws centers from the full space. Otherwise every center lies in one
  /// shared random subspace of this dimension (same expected norm).
  int center_rank = 8;
  double intra_class_std = 1.5;
  double shift_magnitude = 4.0;
  double rotation_angle = 1.0;
  int samples_per_class = 100;
  /// 0 keeps U balanced. Otherwise class k of U keeps a fraction
  /// 1 - imbalance * k / (C - 1) of its samples.
  double unlabeled_imbalance = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SyntheticConfig&) const = default;
};

struct DatasetBundle {
  int dim = 0;
  int base_class_count = 0;
  int validation_class_count = 0;
  int novel_class_count = 0;

  SamplePool base_source;
  SamplePool unlabeled_target;
  SamplePool validation_source;
  SamplePool validation_target;
  SamplePool novel_source;
  SamplePool novel_target;

  /// Ground-truth classes of `unlabeled_target`, aligned by position. Only
  /// diagnostics read this; training never does.
  std::vector<int> unlabeled_truth;

  std::optional<SyntheticConfig> generator;

  int validation_class_begin() const { return base_class_count; }
  int novel_class_begin() const { return base_class_count + validation_class_count; }
  int total_class_count() const { return base_class_count + validation_class_count + novel_class_count; }

  /// Throws DataError when any structural invariant is broken.
  void validate() const;

  bool operator==(const DatasetBundle&) const = default;
};

DatasetBundle generate_synthetic(const SyntheticConfig& config);

/// Rows are samples.
Eigen::MatrixXd feature_matrix(std::span<const Sample> pool);
/// Throws if any sample is unlabeled.
std::vector<int> label_vector(std::span<const Sample> pool);

// ---------------------------------------------------------------------------
// Episodes

enum class Situation { SourceTarget, TargetSource, SourceSource };

std::string_view to_string(Situation s);
/// Accepts "s-t", "t-s", "s-s".
Situation parse_situation(std::string_view s);
Domain support_domain(Situation s);
Domain query_domain(Situation s);

struct EpisodeItem {
  std::size_t index = 0;  // position in the pool of the item's domain
  int class_id = 0;
  int episode_label = 0;  // in [0, way)
};

struct Episode {
  int way = 0;
  int shot = 0;
  int queries_per_class = 0;
  Domain support_domain = Domain::Source;
  Domain query_domain = Domain::Target;
  std::vector<int> classes;  // class ids; episode label i <-> classes[i]
  std::vector<EpisodeItem> support;
  std::vector<EpisodeItem> query;
};

/// Per-class sample positions of a labeled pool.
class ClassIndex {
 public:
  explicit ClassIndex(std::span<const Sample> pool);

  const std::vector<std::size_t>& positions(int class_id) const;
  bool contains(int class_id) const { return by_class_.contains(class_id); }
  std::vector<int> classes() const;

 private:
  std::map<int, std::vector<std::size_t>> by_class_;
};

/// Draws one N-way K-shot episode. Classes are chosen uniformly among novel
/// classes present in both pools; samples are drawn without replacement and
/// support/query never share a sample, also when both come from one pool.
Episode sample_episode(const ClassIndex& source_index, const ClassIndex& target_index, int way, int shot,
                       int queries_per_class, Situation situation, Rng& rng);

Episode sample_episode(std::span<const Sample> novel_source, std::span<const Sample> novel_target, int way,
                       int shot, int queries_per_class, Situation situation, Rng& rng);

// ---------------------------------------------------------------------------
// Persistence: one JSON-lines file per split plus manifest.json.

inline constexpr std::string_view kManifestFile = "manifest.json";

void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir);
DatasetBundle load_dataset(const std::filesystem::path& dir);

/// Reads one split file. `expected_dim` < 0 accepts the first row's width.
SamplePool read_split(const std::filesystem::path& file, int expected_dim);
void write_split(std::span<const Sample> pool, const std::filesystem::path& file);

/// Writes to `file`.tmp, then renames it into place.
void write_text_atomically(const std::filesystem::path& file, const std::string& text);

}  // namespace stabpa
