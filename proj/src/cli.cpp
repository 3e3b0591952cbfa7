#include "stabpa/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "stabpa/checkpoint.hpp"
#include "stabpa/experiment.hpp"
#include "stabpa/format.hpp"

#ifndef STABPA_BUILD_ID
#define STABPA_BUILD_ID "unknown"
#endif

namespace stabpa {

using nlohmann::json;
namespace fs = std::filesystem;

std::string build_id() { return STABPA_BUILD_ID; }

json to_json(const RunManifest& m) {
  return {{"command", m.command},         {"config", m.config_text},
          {"config_hash", m.config_hash}, {"seed", m.seed},
          {"build_id", m.build_id},       {"inputs", m.inputs},
          {"outputs", m.outputs},         {"wall_clock_seconds", m.wall_clock_seconds}};
}

RunManifest run_manifest_from_json(const json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config_text = j.at("config").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.build_id = j.at("build_id").get<std::string>();
  m.inputs = j.at("inputs");
  m.outputs = j.at("outputs");
  m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  return m;
}

namespace {

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool print_config = false;
};

struct EvalOptions {
  std::optional<std::string> situation;
  std::optional<int> way;
  std::optional<int> shot;
  std::optional<int> episodes;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "master seed (overrides the config)");
  cmd->add_flag("--print-config", o.print_config, "print the resolved config and exit");
}

void add_eval_flags(CLI::App* cmd, EvalOptions& o, bool with_situation) {
  if (with_situation)
    cmd->add_option("--situation", o.situation, "s-t, t-s or s-s")
        ->check(CLI::IsMember({"s-t", "t-s", "s-s"}));
  cmd->add_option("--way", o.way, "classes per episode")->check(CLI::PositiveNumber);
  cmd->add_option("--shot", o.shot, "support samples per class")->check(CLI::PositiveNumber);
  cmd->add_option("--episodes", o.episodes, "evaluation episodes")->check(CLI::PositiveNumber);
}

RunConfig resolve_config(const CommonOptions& o, const EvalOptions& e) {
  RunConfig c;
  if (!o.config_path.empty()) apply_config_file(c, o.config_path);
  apply_env_overrides(c);
  if (o.seed) c.seed = *o.seed;
  if (e.way) c.eval.way = *e.way;
  if (e.shot) c.eval.shot = *e.shot;
  if (e.episodes) c.eval.episodes = *e.episodes;
  c.propagate_seed();
  c.validate();
  return c;
}

void print_config(const RunConfig& c, std::ostream& out) {
  out << format_config(c) << "# config_hash = " << config_hash(c) << "\n";
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const auto v = std::stoull(item, &used);
    if (used != item.size()) throw CLI::ValidationError("--seeds", "not an integer: " + item);
    seeds.push_back(v);
  }
  if (seeds.empty()) throw CLI::ValidationError("--seeds", "empty seed list");
  return seeds;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("missing output " + p.string());
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void expect_file_equals(const fs::path& p, const std::string& text) {
  if (read_file(p) != text) throw ValidationError("output " + p.string() + " does not read back");
}

class Run {
 public:
  Run(std::string command, const RunConfig& config) : start_(std::chrono::steady_clock::now()) {
    manifest_.command = std::move(command);
    manifest_.config_text = format_config(config);
    manifest_.config_hash = config_hash(config);
    manifest_.seed = config.seed;
    manifest_.build_id = build_id();
  }
  void input(const std::string& key, const fs::path& p) { manifest_.inputs[key] = p.string(); }
  void output(const std::string& key, const fs::path& p) { manifest_.outputs[key] = p.string(); }
  void finish(const fs::path& dir) {
    manifest_.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const auto path = dir / kRunManifestFile;
    write_text_atomically(path, to_json(manifest_).dump(2) + "\n");
    if (run_manifest_from_json(json::parse(read_file(path))).config_hash != manifest_.config_hash)
      throw ValidationError("run manifest does not read back");
  }

 private:
  RunManifest manifest_;
  std::chrono::steady_clock::time_point start_;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw std::runtime_error("cannot create output directory " + dir.string());
}

// ---------------------------------------------------------------------------

int cmd_generate(const RunConfig& config, const fs::path& out_dir, std::ostream& out) {
  Run run("generate", config);
  ensure_dir(out_dir);
  const DatasetBundle bundle = generate_synthetic(config.data);
  save_dataset(bundle, out_dir);
  if (!(load_dataset(out_dir) == bundle)) throw ValidationError("dataset does not read back");
  run.output("dataset", out_dir);
  run.finish(out_dir);
  out << "wrote dataset to " << out_dir.string() << " (" << bundle.base_source.size() << " labeled, "
      << bundle.unlabeled_target.size() << " unlabeled)\n";
  return 0;
}

TrainConfig apply_variant(TrainConfig t, const std::string& variant) {
  if (variant == "stabpa") return t;
  if (variant == "source-only") return source_only_config(t);
  return find_variant(variant).apply(t);
}

std::string epochs_csv(const TrainLog& log) {
  std::string s =
      "epoch,refresh_count,evaluated,frozen_accuracy,online_accuracy,pseudo_accuracy,"
      "confident_accuracy,confident_count\n";
  for (const auto& m : log.epochs)
    s += std::to_string(m.epoch) + ',' + std::to_string(m.refresh_count) + ',' + std::to_string(m.evaluated) +
         ',' + format_double(m.frozen_accuracy) + ',' + format_double(m.online_accuracy) + ',' +
         format_double(m.pseudo_accuracy) + ',' + format_double(m.confident_accuracy) + ',' +
         std::to_string(m.confident_count) + '\n';
  return s;
}

struct TrainOptions {
  std::string data;
  std::string out;
  std::string variant = "stabpa";
  std::string resume;
  bool pseudo_labels = false;
};

int cmd_train(const RunConfig& config, const TrainOptions& o, std::ostream& out) {
  Run run("train", config);
  const fs::path out_dir = o.out;
  ensure_dir(out_dir);
  run.input("data", o.data);
  const DatasetBundle bundle = load_dataset(o.data);
  const auto hash = config_hash(config);
  const auto text = format_config(config);

  Checkpoint ckpt;
  ckpt.config_text = text;
  ckpt.config_hash = hash;
  ckpt.variant = o.variant;

  TrainState state;
  TrainLog log;
  if (!o.resume.empty()) {
    run.input("resume", o.resume);
    Checkpoint from = load_checkpoint(o.resume);
    if (from.config_hash != hash)
      throw std::runtime_error("cannot resume: checkpoint config hash " + from.config_hash +
                               " differs from the current config hash " + hash);
    if (from.variant != o.variant)
      throw std::runtime_error("cannot resume: checkpoint variant '" + from.variant + "' differs from '" +
                               o.variant + "'");
    state = std::move(from.state);
    log = std::move(from.log);
    ckpt.initial_encoder = std::move(from.initial_encoder);
  } else {
    const InitialModel initial = train_initial_model(bundle, config.train);
    state = make_initial_state(bundle, config.train, initial);
    ckpt.initial_encoder = initial.frozen.encoder;
  }

  std::vector<fs::path> written;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const TrainState& s, const TrainLog& l) {
    Checkpoint c = ckpt;
    c.state = s;
    c.log = l;
    const auto path = out_dir / ("checkpoint_epoch_" + std::to_string(s.epoch) + ".json");
    save_checkpoint(path, c);
    run.output("checkpoint_epoch_" + std::to_string(s.epoch), path);
    written.push_back(path);
  };
  auto result = continue_training(bundle, config.train, std::move(state), std::move(log), hooks);
  ckpt.state = std::move(result.state);
  ckpt.log = std::move(result.log);

  const auto ckpt_path = out_dir / kCheckpointFile;
  save_checkpoint(ckpt_path, ckpt);
  if (!(load_checkpoint(ckpt_path) == ckpt)) throw ValidationError("checkpoint does not read back");
  run.output("checkpoint", ckpt_path);

  const auto metrics = metrics_csv(ckpt.log);
  write_text_atomically(out_dir / kMetricsFile, metrics);
  expect_file_equals(out_dir / kMetricsFile, metrics);
  run.output("metrics", out_dir / kMetricsFile);

  const auto epochs = epochs_csv(ckpt.log);
  write_text_atomically(out_dir / "epochs.csv", epochs);
  expect_file_equals(out_dir / "epochs.csv", epochs);
  run.output("epochs", out_dir / "epochs.csv");

  if (o.pseudo_labels) {
    const auto csv = pseudo_label_csv(ckpt.state.store, bundle.unlabeled_target);
    write_text_atomically(out_dir / "pseudo_labels.csv", csv);
    expect_file_equals(out_dir / "pseudo_labels.csv", csv);
    run.output("pseudo_labels", out_dir / "pseudo_labels.csv");
  }
  run.finish(out_dir);

  out << "trained " << o.variant << " for " << ckpt.state.epoch << " epochs (" << ckpt.log.steps.size()
      << " steps); checkpoint " << ckpt_path.string() << "\n";
  if (!ckpt.log.epochs.empty()) {
    const auto& m = ckpt.log.epochs.back();
    out << "pseudo-label accuracy: frozen " << m.frozen_accuracy << ", online " << m.online_accuracy
        << ", interpolated " << m.pseudo_accuracy << ", confident " << m.confident_accuracy << "\n";
  }
  return 0;
}

struct EvalPaths {
  std::string checkpoint;
  std::string data;
  std::string out;
  bool shuffle = false;
};

int cmd_eval(RunConfig config, const EvalPaths& p, Situation situation, std::ostream& out) {
  config.eval.shuffle_query_labels = p.shuffle;
  Run run("eval", config);
  const fs::path out_dir = p.out;
  ensure_dir(out_dir);
  run.input("checkpoint", p.checkpoint);
  run.input("data", p.data);
  const Checkpoint ckpt = load_checkpoint(p.checkpoint);
  const DatasetBundle bundle = load_dataset(p.data);
  if (ckpt.state.encoder.input_dim() != bundle.dim)
    throw std::runtime_error("checkpoint encoder expects dimension " +
                             std::to_string(ckpt.state.encoder.input_dim()) + " but the data has " +
                             std::to_string(bundle.dim));
  const EvalReport report =
      evaluate(ckpt.state.encoder, bundle.novel_source, bundle.novel_target, situation, config.eval);
  const auto path = out_dir / "report.json";
  write_text_atomically(path, to_json(report).dump(2) + "\n");
  if (!(eval_report_from_json(json::parse(read_file(path))) == report))
    throw ValidationError("report does not read back");
  run.output("report", path);
  run.finish(out_dir);
  out << to_string(situation) << " " << report.way << "-way " << report.shot << "-shot: " << report.mean
      << " +- " << report.ci << " over " << report.episodes << " episodes\n";
  return 0;
}

struct ExperimentOptions {
  std::string data;
  std::string out;
  std::string seeds = "0,1,2";
  std::vector<std::string> variants;
  bool check = false;
};

int cmd_ablate(const RunConfig& config, const ExperimentOptions& o, std::ostream& out, std::ostream& err) {
  Run run("ablate", config);
  const fs::path out_dir = o.out;
  ensure_dir(out_dir);
  run.input("data", o.data);
  const DatasetBundle bundle = load_dataset(o.data);
  std::vector<Variant> variants;
  if (o.variants.empty())
    variants = ablation_variants();
  else
    for (const auto& v : o.variants) variants.push_back(find_variant(v));
  const auto seeds = parse_seed_list(o.seeds);
  const auto rows = run_ablation(
      config, variants, seeds, [&](std::uint64_t) -> const DatasetBundle& { return bundle; },
      [&](const AblationRow& r) {
        out << "seed " << r.seed << " " << r.variant << ": " << r.score.accuracy << "\n";
      });
  const auto csv = ablation_csv(rows);
  write_text_atomically(out_dir / "ablation.csv", csv);
  expect_file_equals(out_dir / "ablation.csv", csv);
  run.output("ablation", out_dir / "ablation.csv");
  const auto summary = summarize(rows);
  out << "variant,accuracy,ci,pd,adr_target\n";
  for (const auto& s : summary)
    out << s.variant << ',' << s.accuracy << ',' << s.ci << ',' << s.pd << ',' << s.adr_target << "\n";
  run.finish(out_dir);
  if (o.check) {
    const auto c = check_ablation_ordering(summary);
    for (const auto& f : c.failures) err << "ordering check: " << f << "\n";
    out << "ordering check: " << (c.passed ? "PASS" : "FAIL") << "\n";
    return c.passed ? 0 : 3;
  }
  return 0;
}

int cmd_sweep(const RunConfig& config, const ExperimentOptions& o, std::ostream& out, std::ostream& err) {
  Run run("sweep", config);
  const fs::path out_dir = o.out;
  ensure_dir(out_dir);
  run.input("data", o.data);
  const DatasetBundle bundle = load_dataset(o.data);
  const auto rows = run_sweep(
      config, robustness_grid(config.train), parse_seed_list(o.seeds),
      [&](std::uint64_t) -> const DatasetBundle& { return bundle; },
      [&](const SweepRow& r) {
        out << r.point.parameter << "=" << r.point.value << ": " << r.score.accuracy << " +- " << r.score.ci
            << "\n";
      });
  const auto csv = sweep_csv(rows);
  write_text_atomically(out_dir / "sweep.csv", csv);
  expect_file_equals(out_dir / "sweep.csv", csv);
  run.output("sweep", out_dir / "sweep.csv");
  run.finish(out_dir);
  if (o.check) {
    const auto c = check_sweep_defaults(rows);
    for (const auto& f : c.failures) err << "sweep check: " << f << "\n";
    out << "sweep check: " << (c.passed ? "PASS" : "FAIL") << "\n";
    return c.passed ? 0 : 3;
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"stabpa: cross-domain few-shot training with stabilized prototype alignment"};
  app.require_subcommand(1);

  CommonOptions common;
  EvalOptions eval_flags;
  TrainOptions train_opts;
  EvalPaths eval_paths;
  ExperimentOptions exp_opts;
  bool list_keys = false;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(gen, common);
  std::string gen_out;
  gen->add_option("--out", gen_out, "dataset directory")->required();

  auto* train = app.add_subcommand("train", "train an encoder and write a checkpoint");
  add_common(train, common);
  train->add_option("--data", train_opts.data, "dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  train->add_option("--out", train_opts.out, "output directory")->required();
  train->add_option("--variant", train_opts.variant,
                    "stabpa, source-only, or an ablation row (none, aug, s2t, t2s, both, both+aug)");
  train->add_option("--resume", train_opts.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_flag("--pseudo-labels", train_opts.pseudo_labels, "also write pseudo_labels.csv");

  auto* ev = app.add_subcommand("eval", "episodic evaluation of a checkpoint");
  add_common(ev, common);
  add_eval_flags(ev, eval_flags, true);
  ev->add_option("--checkpoint", eval_paths.checkpoint, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--data", eval_paths.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", eval_paths.out, "output directory")->required();
  ev->add_flag("--shuffle-query-labels", eval_paths.shuffle, "chance-level control");

  auto* ab = app.add_subcommand("ablate", "train and score every ablation variant");
  add_common(ab, common);
  add_eval_flags(ab, eval_flags, false);
  ab->add_option("--data", exp_opts.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--out", exp_opts.out, "output directory")->required();
  ab->add_option("--seeds", exp_opts.seeds, "comma-separated training seeds");
  ab->add_option("--variant", exp_opts.variants, "restrict to these variants");
  ab->add_flag("--check", exp_opts.check, "exit 3 unless the expected ordering holds");

  auto* sw = app.add_subcommand("sweep", "lambda / beta / momentum robustness sweep");
  add_common(sw, common);
  add_eval_flags(sw, eval_flags, false);
  sw->add_option("--data", exp_opts.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  sw->add_option("--out", exp_opts.out, "output directory")->required();
  sw->add_option("--seeds", exp_opts.seeds, "comma-separated training seeds");
  sw->add_flag("--check", exp_opts.check, "exit 3 unless the defaults are best or tied");

  auto* keys = app.add_subcommand("config-keys", "list every config key");
  keys->callback([&] { list_keys = true; });

  std::vector<std::string> argv_store{"stabpa"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, r;
    const int code = app.exit(e, o, r);
    out << o.str();
    err << r.str();
    return code;
  }

  try {
    if (list_keys) {
      for (const auto& k : config_keys())
        out << k.name << "  " << env_var_name(k.name) << "  " << k.help << "\n";
      return 0;
    }
    RunConfig config = resolve_config(common, eval_flags);
    if (train->parsed()) {
      config.train = apply_variant(config.train, train_opts.variant);
      config.validate();
    }
    if (common.print_config) {
      print_config(config, out);
      return 0;
    }
    if (gen->parsed()) return cmd_generate(config, gen_out, out);
    if (train->parsed()) return cmd_train(config, train_opts, out);
    if (ev->parsed())
      return cmd_eval(config, eval_paths, parse_situation(eval_flags.situation.value_or("s-t")), out);
    if (ab->parsed()) return cmd_ablate(config, exp_opts, out, err);
    if (sw->parsed()) return cmd_sweep(config, exp_opts, out, err);
  } catch (const ValidationError& e) {
    err << "error: output validation failed: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace stabpa
