#include "stabpa/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "stabpa/format.hpp"

namespace stabpa {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "stabpa-checkpoint";
constexpr int kVersion = 1;

json vector_to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json head_to_json(const ClassifierHead& h) {
  return {{"temperature", h.temperature}, {"weight", matrix_to_json(h.weight)}};
}

ClassifierHead head_from_json(const json& j) {
  ClassifierHead h;
  h.temperature = j.at("temperature").get<double>();
  h.weight = matrix_from_json(j.at("weight"));
  return h;
}

json adam_to_json(const AdamState& a) {
  json first = json::array(), second = json::array();
  for (const auto& m : a.first_moment) first.push_back(vector_to_json(m));
  for (const auto& v : a.second_moment) second.push_back(vector_to_json(v));
  return {{"learning_rate", a.learning_rate},
          {"beta1", a.beta1},
          {"beta2", a.beta2},
          {"epsilon", a.epsilon},
          {"step", a.step},
          {"first_moment", first},
          {"second_moment", second}};
}

AdamState adam_from_json(const json& j) {
  AdamState a;
  a.learning_rate = j.at("learning_rate").get<double>();
  a.beta1 = j.at("beta1").get<double>();
  a.beta2 = j.at("beta2").get<double>();
  a.epsilon = j.at("epsilon").get<double>();
  a.step = j.at("step").get<std::int64_t>();
  for (const auto& m : j.at("first_moment")) a.first_moment.push_back(vector_from_json(m));
  for (const auto& v : j.at("second_moment")) a.second_moment.push_back(vector_from_json(v));
  return a;
}

json bank_to_json(const PrototypeBank& b) {
  return {{"momentum", b.momentum}, {"target", matrix_to_json(b.target)}, {"initialized", b.initialized}};
}

PrototypeBank bank_from_json(const json& j) {
  PrototypeBank b;
  b.momentum = j.at("momentum").get<double>();
  b.target = matrix_from_json(j.at("target"));
  b.initialized = j.at("initialized").get<std::vector<std::uint8_t>>();
  if (b.initialized.size() != static_cast<std::size_t>(b.target.rows()))
    throw CheckpointError("prototype bank: mask size does not match rows");
  return b;
}

json store_to_json(const PseudoLabelStore& s) {
  return {{"frozen_probs", matrix_to_json(s.frozen_probs)},
          {"labels", s.labels},
          {"confidences", s.confidences},
          {"frozen_labels", s.frozen_labels},
          {"online_labels", s.online_labels},
          {"refresh_count", s.refresh_count}};
}

PseudoLabelStore store_from_json(const json& j) {
  PseudoLabelStore s;
  s.frozen_probs = matrix_from_json(j.at("frozen_probs"));
  s.labels = j.at("labels").get<std::vector<int>>();
  s.confidences = j.at("confidences").get<std::vector<double>>();
  s.frozen_labels = j.at("frozen_labels").get<std::vector<int>>();
  s.online_labels = j.at("online_labels").get<std::vector<int>>();
  s.refresh_count = j.at("refresh_count").get<int>();
  return s;
}

json step_to_json(const LossReport& r) {
  return json::array(
      {r.step, r.weight, r.loss_s2t, r.loss_t2s, r.aux_ce, r.total, r.filtered_count, r.skipped_source});
}

LossReport step_from_json(const json& j) {
  if (!j.is_array() || j.size() != 8) throw CheckpointError("malformed step log entry");
  LossReport r;
  r.step = j[0].get<std::int64_t>();
  r.weight = j[1].get<double>();
  r.loss_s2t = j[2].get<double>();
  r.loss_t2s = j[3].get<double>();
  r.aux_ce = j[4].get<double>();
  r.total = j[5].get<double>();
  r.filtered_count = j[6].get<int>();
  r.skipped_source = j[7].get<int>();
  return r;
}

json epoch_to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"refresh_count", m.refresh_count},
          {"evaluated", m.evaluated},
          {"frozen_accuracy", m.frozen_accuracy},
          {"online_accuracy", m.online_accuracy},
          {"pseudo_accuracy", m.pseudo_accuracy},
          {"confident_accuracy", m.confident_accuracy},
          {"confident_count", m.confident_count}};
}

EpochMetrics epoch_from_json(const json& j) {
  EpochMetrics m;
  m.epoch = j.at("epoch").get<int>();
  m.refresh_count = j.at("refresh_count").get<int>();
  m.evaluated = j.at("evaluated").get<int>();
  m.frozen_accuracy = j.at("frozen_accuracy").get<double>();
  m.online_accuracy = j.at("online_accuracy").get<double>();
  m.pseudo_accuracy = j.at("pseudo_accuracy").get<double>();
  m.confident_accuracy = j.at("confident_accuracy").get<double>();
  m.confident_count = j.at("confident_count").get<int>();
  return m;
}

}  // namespace

json matrix_to_json(const Eigen::MatrixXd& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Eigen::MatrixXd matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size())
    throw CheckpointError("matrix: shape does not match data length");
  Eigen::MatrixXd m(rows, cols);
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[i++];
  return m;
}

json to_json(const EncoderParams& params) {
  json layers = json::array();
  for (const auto& l : params.layers)
    layers.push_back({{"weight", matrix_to_json(l.weight)}, {"bias", vector_to_json(l.bias)}});
  return {{"widths", params.widths()}, {"layers", layers}};
}

EncoderParams encoder_from_json(const json& j) {
  EncoderParams p;
  for (const auto& l : j.at("layers"))
    p.layers.push_back({matrix_from_json(l.at("weight")), vector_from_json(l.at("bias"))});
  if (p.layers.empty()) throw CheckpointError("encoder has no layers");
  if (j.contains("widths") && j["widths"].get<std::vector<int>>() != p.widths())
    throw CheckpointError("encoder widths do not match its layers");
  check_encoder(p);
  return p;
}

json to_json(const Checkpoint& c) {
  const auto& s = c.state;
  json log_steps = json::array();
  for (const auto& r : c.log.steps) log_steps.push_back(step_to_json(r));
  json log_epochs = json::array();
  for (const auto& m : c.log.epochs) log_epochs.push_back(epoch_to_json(m));
  json j = {{"format", kFormat},
            {"version", kVersion},
            {"variant", c.variant},
            {"config_hash", c.config_hash},
            {"config", c.config_text},
            {"epoch", s.epoch},
            {"steps_per_epoch", s.steps_per_epoch},
            {"encoder", to_json(s.encoder)},
            {"head", head_to_json(s.head)},
            {"adam", adam_to_json(s.adam)},
            {"bank", bank_to_json(s.bank)},
            {"store", store_to_json(s.store)},
            {"clock", {{"step", s.clock.step}, {"max_steps", s.clock.max_steps}}},
            {"rng",
             {{"batches", s.batch_rng},
              {"source_augment", s.source_augment_rng},
              {"target_augment", s.target_augment_rng}}},
            {"log", {{"steps", log_steps}, {"epochs", log_epochs}}}};
  j["initial_encoder"] = c.initial_encoder ? to_json(*c.initial_encoder) : json(nullptr);
  return j;
}

Checkpoint checkpoint_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != kFormat) throw CheckpointError("not a stabpa checkpoint");
    if (j.at("version").get<int>() != kVersion)
      throw CheckpointError("unsupported checkpoint version " + j.at("version").dump());
    Checkpoint c;
    c.variant = j.at("variant").get<std::string>();
    c.config_hash = j.at("config_hash").get<std::string>();
    c.config_text = j.at("config").get<std::string>();
    auto& s = c.state;
    s.epoch = j.at("epoch").get<int>();
    s.steps_per_epoch = j.at("steps_per_epoch").get<int>();
    s.encoder = encoder_from_json(j.at("encoder"));
    s.head = head_from_json(j.at("head"));
    s.adam = adam_from_json(j.at("adam"));
    s.bank = bank_from_json(j.at("bank"));
    s.store = store_from_json(j.at("store"));
    s.clock.step = j.at("clock").at("step").get<std::int64_t>();
    s.clock.max_steps = j.at("clock").at("max_steps").get<std::int64_t>();
    s.batch_rng = j.at("rng").at("batches").get<std::string>();
    s.source_augment_rng = j.at("rng").at("source_augment").get<std::string>();
    s.target_augment_rng = j.at("rng").at("target_augment").get<std::string>();
    for (const auto& r : j.at("log").at("steps")) c.log.steps.push_back(step_from_json(r));
    for (const auto& m : j.at("log").at("epochs")) c.log.epochs.push_back(epoch_from_json(m));
    if (!j.at("initial_encoder").is_null()) c.initial_encoder = encoder_from_json(j["initial_encoder"]);
    if (s.head.weight.cols() != s.encoder.embedding_dim())
      throw CheckpointError("head width does not match the encoder output");
    return c;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_text_atomically(path, to_json(checkpoint).dump() + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

std::string metrics_csv(const TrainLog& log) {
  std::string out = "step,w,loss_s2t,loss_t2s,aux_ce,total,filtered_count,skipped_source\n";
  for (const auto& r : log.steps) {
    out += std::to_string(r.step) + ',' + format_double(r.weight) + ',' + format_double(r.loss_s2t) + ',' +
           format_double(r.loss_t2s) + ',' + format_double(r.aux_ce) + ',' + format_double(r.total) + ',' +
           std::to_string(r.filtered_count) + ',' + std::to_string(r.skipped_source) + '\n';
  }
  return out;
}

std::string pseudo_label_csv(const PseudoLabelStore& store, const SamplePool& unlabeled) {
  if (store.size() != unlabeled.size())
    throw std::invalid_argument("pseudo_label_csv: store and pool sizes differ");
  std::string out = "id,label,confidence,frozen_label,online_label\n";
  for (std::size_t i = 0; i < store.size(); ++i) {
    const int online = i < store.online_labels.size() ? store.online_labels[i] : -1;
    out += std::to_string(unlabeled[i].id) + ',' + std::to_string(store.labels[i]) + ',' +
           format_double(store.confidences[i]) + ',' + std::to_string(store.frozen_labels[i]) + ',' +
           std::to_string(online) + '\n';
  }
  return out;
}

}  // namespace stabpa
