#include "stabpa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <set>
#include <sstream>

namespace stabpa {

using json = nlohmann::json;

std::string_view to_string(Domain d) { return d == Domain::Source ? "source" : "target"; }

Domain parse_domain(std::string_view s) {
  if (s == "source") return Domain::Source;
  if (s == "target") return Domain::Target;
  throw DataError("unknown domain tag '" + std::string(s) + "'");
}

void SyntheticConfig::validate() const {
  if (dim < 2) throw DataError("synthetic config: dim must be >= 2");
  if (base_classes < 1 || validation_classes < 1 || novel_classes < 1)
    throw DataError("synthetic config: class counts must be >= 1");
  if (center_rank < 0 || center_rank > dim)
    throw DataError("synthetic config: center_rank must lie in [0, dim]");
  if (samples_per_class < 1) throw DataError("synthetic config: samples_per_class must be >= 1");
  if (!(center_scale > 0.0) || !(intra_class_std > 0.0))
    throw DataError("synthetic config: scales must be strictly positive");
  if (!(shift_magnitude >= 0.0) || !std::isfinite(rotation_angle))
    throw DataError("synthetic config: shift magnitude must be >= 0 and angle finite");
  if (!(unlabeled_imbalance >= 0.0 && unlabeled_imbalance < 1.0))
    throw DataError("synthetic config: unlabeled_imbalance must lie in [0, 1)");
}

namespace {

void check_pool(const SamplePool& pool, std::string_view name, int dim, Domain domain, bool labeled,
                int class_begin, int class_end) {
  for (const auto& s : pool) {
    if (s.features.size() != dim)
      throw DataError(std::string(name) + ": sample " + std::to_string(s.id) + " has dimension " +
                      std::to_string(s.features.size()));
    if (!s.features.allFinite())
      throw DataError(std::string(name) + ": sample " + std::to_string(s.id) + " has non-finite features");
    if (s.domain != domain)
      throw DataError(std::string(name) + ": sample " + std::to_string(s.id) + " has the wrong domain");
    if (labeled != s.label.has_value())
      throw DataError(std::string(name) + ": sample " + std::to_string(s.id) +
                      (labeled ? " is missing its label" : " must be unlabeled"));
    if (labeled && (*s.label < class_begin || *s.label >= class_end))
      throw DataError(std::string(name) + ": sample " + std::to_string(s.id) + " has label " +
                      std::to_string(*s.label) + " outside its split");
  }
}

}  // namespace

void DatasetBundle::validate() const {
  if (dim < 1) throw DataError("bundle: dim must be positive");
  if (base_class_count < 1 || novel_class_count < 1 || validation_class_count < 0)
    throw DataError("bundle: invalid class counts");
  const int vb = validation_class_begin();
  const int nb = novel_class_begin();
  check_pool(base_source, "base_source", dim, Domain::Source, true, 0, base_class_count);
  check_pool(unlabeled_target, "unlabeled_target", dim, Domain::Target, false, 0, 0);
  check_pool(validation_source, "validation_source", dim, Domain::Source, true, vb, nb);
  check_pool(validation_target, "validation_target", dim, Domain::Target, true, vb, nb);
  check_pool(novel_source, "novel_source", dim, Domain::Source, true, nb, total_class_count());
  check_pool(novel_target, "novel_target", dim, Domain::Target, true, nb, total_class_count());
  if (!unlabeled_truth.empty()) {
    if (unlabeled_truth.size() != unlabeled_target.size())
      throw DataError("bundle: unlabeled_truth size mismatch");
    for (int y : unlabeled_truth)
      if (y < 0 || y >= nb)
        throw DataError("bundle: unlabeled target pool contains novel class " + std::to_string(y));
  }
  std::set<std::int64_t> ids;
  for (const SamplePool* p : {&base_source, &unlabeled_target, &validation_source, &validation_target,
                              &novel_source, &novel_target})
    for (const auto& s : *p)
      if (!ids.insert(s.id).second) throw DataError("bundle: duplicate sample id " + std::to_string(s.id));
}

DatasetBundle generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  Rng rng = make_rng(config.seed, streams::kGenerator);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int d = config.dim;
  auto gaussian = [&](int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal(rng);
    return v;
  };

  // Random orthonormal basis; rotate by the same angle in each of its planes.
  Eigen::MatrixXd g(d, d);
  for (int c = 0; c < d; ++c) g.col(c) = gaussian(d);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd basis = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd planar = Eigen::MatrixXd::Identity(d, d);
  const double cs = std::cos(config.rotation_angle);
  const double sn = std::sin(config.rotation_angle);
  for (int i = 0; i + 1 < d; i += 2) {
    planar(i, i) = cs;
    planar(i, i + 1) = -sn;
    planar(i + 1, i) = sn;
    planar(i + 1, i + 1) = cs;
  }
  const Eigen::MatrixXd rotation = basis * planar * basis.transpose();
  Eigen::VectorXd shift = gaussian(d);
  shift *= config.shift_magnitude / shift.norm();

  DatasetBundle b;
  b.dim = d;
  b.base_class_count = config.base_classes;
  b.validation_class_count = config.validation_classes;
  b.novel_class_count = config.novel_classes;
  b.generator = config;

  const int total = b.total_class_count();
  std::vector<Eigen::VectorXd> centers;
  centers.reserve(total);
  if (config.center_rank == 0) {
    for (int k = 0; k < total; ++k) centers.push_back(config.center_scale * gaussian(d));
  } else {
    const int r = config.center_rank;
    Eigen::MatrixXd h(d, r);
    for (int c = 0; c < r; ++c) h.col(c) = gaussian(d);
    Eigen::HouseholderQR<Eigen::MatrixXd> hqr(h);
    const Eigen::MatrixXd span = hqr.householderQ() * Eigen::MatrixXd::Identity(d, r);
    const double gain = config.center_scale * std::sqrt(static_cast<double>(d) / r);
    for (int k = 0; k < total; ++k) centers.push_back(gain * (span * gaussian(r)));
  }

  std::int64_t next_id = 0;
  auto draw = [&](int k, Domain dom, bool keep_label) {
    Sample s;
    s.id = next_id++;
    s.domain = dom;
    if (keep_label) s.label = k;
    const Eigen::VectorXd mean =
        dom == Domain::Source ? centers[k] : Eigen::VectorXd(rotation * centers[k] + shift);
    s.features = mean + config.intra_class_std * gaussian(d);
    return s;
  };

  const int n = config.samples_per_class;
  const int vb = b.validation_class_begin();
  const int nb = b.novel_class_begin();
  for (int k = 0; k < vb; ++k)
    for (int i = 0; i < n; ++i) b.base_source.push_back(draw(k, Domain::Source, true));
  // U holds base and validation classes of the target domain, unlabeled.
  const int unlabeled_classes = nb;
  for (int k = 0; k < unlabeled_classes; ++k) {
    int keep = n;
    if (config.unlabeled_imbalance > 0.0 && unlabeled_classes > 1) {
      const double frac = 1.0 - config.unlabeled_imbalance * k / static_cast<double>(unlabeled_classes - 1);
      keep = std::max(1, static_cast<int>(std::lround(frac * n)));
    }
    for (int i = 0; i < keep; ++i) {
      b.unlabeled_target.push_back(draw(k, Domain::Target, false));
      b.unlabeled_truth.push_back(k);
    }
  }
  for (int k = vb; k < nb; ++k) {
    for (int i = 0; i < n; ++i) b.validation_source.push_back(draw(k, Domain::Source, true));
    for (int i = 0; i < n; ++i) b.validation_target.push_back(draw(k, Domain::Target, true));
  }
  for (int k = nb; k < total; ++k) {
    for (int i = 0; i < n; ++i) b.novel_source.push_back(draw(k, Domain::Source, true));
    for (int i = 0; i < n; ++i) b.novel_target.push_back(draw(k, Domain::Target, true));
  }
  return b;
}

Eigen::MatrixXd feature_matrix(std::span<const Sample> pool) {
  if (pool.empty()) return {};
  Eigen::MatrixXd x(static_cast<Eigen::Index>(pool.size()), pool.front().features.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = pool[i].features.transpose();
  return x;
}

std::vector<int> label_vector(std::span<const Sample> pool) {
  std::vector<int> y;
  y.reserve(pool.size());
  for (const auto& s : pool) {
    if (!s.label) throw DataError("sample " + std::to_string(s.id) + " is unlabeled");
    y.push_back(*s.label);
  }
  return y;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Situation s) {
  switch (s) {
    case Situation::SourceTarget:
      return "s-t";
    case Situation::TargetSource:
      return "t-s";
    case Situation::SourceSource:
      return "s-s";
  }
  return "?";
}

Situation parse_situation(std::string_view s) {
  if (s == "s-t") return Situation::SourceTarget;
  if (s == "t-s") return Situation::TargetSource;
  if (s == "s-s") return Situation::SourceSource;
  throw DataError("unknown situation '" + std::string(s) + "' (expected s-t, t-s or s-s)");
}

Domain support_domain(Situation s) { return s == Situation::TargetSource ? Domain::Target : Domain::Source; }

Domain query_domain(Situation s) { return s == Situation::SourceTarget ? Domain::Target : Domain::Source; }

ClassIndex::ClassIndex(std::span<const Sample> pool) {
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (!pool[i].label) throw DataError("episode pools must be labeled");
    by_class_[*pool[i].label].push_back(i);
  }
}

const std::vector<std::size_t>& ClassIndex::positions(int class_id) const {
  auto it = by_class_.find(class_id);
  if (it == by_class_.end()) throw DataError("class " + std::to_string(class_id) + " not in pool");
  return it->second;
}

std::vector<int> ClassIndex::classes() const {
  std::vector<int> out;
  for (const auto& [k, _] : by_class_) out.push_back(k);
  return out;
}

namespace {

// First `count` entries of a partial Fisher-Yates shuffle of `pool`.
std::vector<std::size_t> draw_without_replacement(std::vector<std::size_t> pool, std::size_t count,
                                                  Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace

Episode sample_episode(const ClassIndex& source_index, const ClassIndex& target_index, int way, int shot,
                       int queries_per_class, Situation situation, Rng& rng) {
  if (way < 1 || shot < 1 || queries_per_class < 1)
    throw DataError("episode: way, shot and queries must be >= 1");
  const Domain sd = support_domain(situation);
  const Domain qd = query_domain(situation);
  const ClassIndex& sup = sd == Domain::Source ? source_index : target_index;
  const ClassIndex& qry = qd == Domain::Source ? source_index : target_index;

  std::vector<int> eligible;
  for (int k : sup.classes())
    if (qry.contains(k)) eligible.push_back(k);
  const bool same_pool = sd == qd;
  for (int k : eligible) {
    const std::size_t ns = sup.positions(k).size();
    const std::size_t nq = qry.positions(k).size();
    const bool ok =
        same_pool ? ns >= static_cast<std::size_t>(shot + queries_per_class)
                  : ns >= static_cast<std::size_t>(shot) && nq >= static_cast<std::size_t>(queries_per_class);
    if (!ok)
      throw DataError("episode: class " + std::to_string(k) + " has too few samples for shot=" +
                      std::to_string(shot) + ", queries=" + std::to_string(queries_per_class));
  }
  if (eligible.size() < static_cast<std::size_t>(way))
    throw DataError("episode: only " + std::to_string(eligible.size()) +
                    " classes available for way=" + std::to_string(way));

  std::vector<std::size_t> class_slots(eligible.size());
  std::iota(class_slots.begin(), class_slots.end(), std::size_t{0});
  class_slots = draw_without_replacement(std::move(class_slots), static_cast<std::size_t>(way), rng);

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries_per_class = queries_per_class;
  ep.support_domain = sd;
  ep.query_domain = qd;
  for (int label = 0; label < way; ++label) {
    const int k = eligible[class_slots[static_cast<std::size_t>(label)]];
    ep.classes.push_back(k);
    if (same_pool) {
      auto picked =
          draw_without_replacement(sup.positions(k), static_cast<std::size_t>(shot + queries_per_class), rng);
      for (int i = 0; i < shot; ++i) ep.support.push_back({picked[static_cast<std::size_t>(i)], k, label});
      for (int i = shot; i < shot + queries_per_class; ++i)
        ep.query.push_back({picked[static_cast<std::size_t>(i)], k, label});
    } else {
      for (auto p : draw_without_replacement(sup.positions(k), static_cast<std::size_t>(shot), rng))
        ep.support.push_back({p, k, label});
      for (auto p :
           draw_without_replacement(qry.positions(k), static_cast<std::size_t>(queries_per_class), rng))
        ep.query.push_back({p, k, label});
    }
  }
  return ep;
}

Episode sample_episode(std::span<const Sample> novel_source, std::span<const Sample> novel_target, int way,
                       int shot, int queries_per_class, Situation situation, Rng& rng) {
  return sample_episode(ClassIndex(novel_source), ClassIndex(novel_target), way, shot, queries_per_class,
                        situation, rng);
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kTruthFile = "unlabeled_truth.json";

struct SplitFile {
  const char* name;
  SamplePool DatasetBundle::* pool;
};

constexpr SplitFile kSplits[] = {
    {"base_source.jsonl", &DatasetBundle::base_source},
    {"unlabeled_target.jsonl", &DatasetBundle::unlabeled_target},
    {"validation_source.jsonl", &DatasetBundle::validation_source},
    {"validation_target.jsonl", &DatasetBundle::validation_target},
    {"novel_source.jsonl", &DatasetBundle::novel_source},
    {"novel_target.jsonl", &DatasetBundle::novel_target},
};

json synthetic_to_json(const SyntheticConfig& c) {
  return {{"base_classes", c.base_classes},
          {"validation_classes", c.validation_classes},
          {"novel_classes", c.novel_classes},
          {"dim", c.dim},
          {"center_scale", c.center_scale},
          {"center_rank", c.center_rank},
          {"intra_class_std", c.intra_class_std},
          {"shift_magnitude", c.shift_magnitude},
          {"rotation_angle", c.rotation_angle},
          {"samples_per_class", c.samples_per_class},
          {"unlabeled_imbalance", c.unlabeled_imbalance},
          {"seed", c.seed}};
}

SyntheticConfig synthetic_from_json(const json& j) {
  SyntheticConfig c;
  c.base_classes = j.at("base_classes").get<int>();
  c.validation_classes = j.at("validation_classes").get<int>();
  c.novel_classes = j.at("novel_classes").get<int>();
  c.dim = j.at("dim").get<int>();
  c.center_scale = j.at("center_scale").get<double>();
  c.center_rank = j.value("center_rank", 0);
  c.intra_class_std = j.at("intra_class_std").get<double>();
  c.shift_magnitude = j.at("shift_magnitude").get<double>();
  c.rotation_angle = j.at("rotation_angle").get<double>();
  c.samples_per_class = j.at("samples_per_class").get<int>();
  c.unlabeled_imbalance = j.at("unlabeled_imbalance").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void write_text_atomically(const std::filesystem::path& file, const std::string& text) {
  auto tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

void write_split(std::span<const Sample> pool, const std::filesystem::path& file) {
  std::string text;
  for (const auto& s : pool) {
    json row;
    row["id"] = s.id;
    row["domain"] = std::string(to_string(s.domain));
    row["label"] = s.label ? json(*s.label) : json(nullptr);
    row["features"] = std::vector<double>(s.features.data(), s.features.data() + s.features.size());
    text += row.dump();
    text += '\n';
  }
  write_text_atomically(file, text);
}

SamplePool read_split(const std::filesystem::path& file, int expected_dim) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  SamplePool pool;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = file.filename().string() + ":" + std::to_string(line_no);
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": malformed row: " + e.what());
    }
    if (!row.is_object() || !row.contains("id") || !row.contains("domain") || !row.contains("features") ||
        !row["features"].is_array() || !row["id"].is_number_integer() || !row["domain"].is_string())
      throw DataError(where + ": malformed row (need id, domain, label, features)");
    Sample s;
    s.id = row["id"].get<std::int64_t>();
    s.domain = parse_domain(row["domain"].get<std::string>());
    if (row.contains("label") && !row["label"].is_null()) {
      if (!row["label"].is_number_integer()) throw DataError(where + ": label must be an integer or null");
      s.label = row["label"].get<int>();
    }
    const auto& f = row["features"];
    const int d = static_cast<int>(f.size());
    if (expected_dim < 0) expected_dim = d;
    if (d != expected_dim)
      throw DataError(where + ": dimension mismatch (expected " + std::to_string(expected_dim) + ", got " +
                      std::to_string(d) + ")");
    s.features.resize(d);
    for (int i = 0; i < d; ++i) {
      if (!f[static_cast<std::size_t>(i)].is_number()) throw DataError(where + ": non-numeric feature");
      s.features[i] = f[static_cast<std::size_t>(i)].get<double>();
    }
    pool.push_back(std::move(s));
  }
  return pool;
}

void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  bundle.validate();
  std::filesystem::create_directories(dir);
  for (const auto& split : kSplits) write_split(bundle.*split.pool, dir / split.name);

  json truth = json::object();
  std::vector<std::int64_t> ids;
  for (const auto& s : bundle.unlabeled_target) ids.push_back(s.id);
  truth["ids"] = ids;
  truth["labels"] = bundle.unlabeled_truth;
  write_text_atomically(dir / kTruthFile, truth.dump() + "\n");

  json m;
  m["dim"] = bundle.dim;
  m["base_class_count"] = bundle.base_class_count;
  m["validation_class_count"] = bundle.validation_class_count;
  m["novel_class_count"] = bundle.novel_class_count;
  json counts = json::object();
  for (const auto& split : kSplits) counts[split.name] = (bundle.*split.pool).size();
  m["split_sizes"] = counts;
  m["generator"] = bundle.generator ? synthetic_to_json(*bundle.generator) : json(nullptr);
  write_text_atomically(dir / kManifestFile, m.dump(2) + "\n");
}

DatasetBundle load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestFile);
  if (!in) throw DataError("missing " + (dir / kManifestFile).string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  DatasetBundle b;
  try {
    b.dim = m.at("dim").get<int>();
    b.base_class_count = m.at("base_class_count").get<int>();
    b.validation_class_count = m.at("validation_class_count").get<int>();
    b.novel_class_count = m.at("novel_class_count").get<int>();
    if (m.contains("generator") && !m["generator"].is_null())
      b.generator = synthetic_from_json(m["generator"]);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  for (const auto& split : kSplits) b.*split.pool = read_split(dir / split.name, b.dim);

  if (std::filesystem::exists(dir / kTruthFile)) {
    std::ifstream tin(dir / kTruthFile);
    const json t = json::parse(tin);
    const auto ids = t.at("ids").get<std::vector<std::int64_t>>();
    const auto labels = t.at("labels").get<std::vector<int>>();
    if (ids.size() != b.unlabeled_target.size() || labels.size() != ids.size())
      throw DataError("unlabeled truth does not match unlabeled_target");
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] != b.unlabeled_target[i].id) throw DataError("unlabeled truth ids out of order");
    b.unlabeled_truth = labels;
  }
  b.validate();
  return b;
}

}  // namespace stabpa
