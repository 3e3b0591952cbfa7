#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stabpa/align.hpp"
#include "stabpa/augment.hpp"
#include "stabpa/data.hpp"
#include "stabpa/encoder.hpp"
#include "stabpa/pseudo.hpp"

namespace stabpa {

struct TrainConfig {
  int epochs = 15;
  int batch_size = 256;  // split evenly between source and target
  double learning_rate = 1e-3;
  double tau_s2t = 0.25;
  double tau_t2s = 0.1;
  double beta = 0.5;
  double lambda = 0.2;
  double momentum = 0.1;
  AugmentPolicy augment;
  bool use_augmentation = true;
  bool use_s2t = true;
  bool use_t2s = true;
  bool aux_ce = true;
  double aux_ce_weight = 1.0;
  int initial_epochs = 10;
  /// Re-initialize the encoder after the initial classifier is trained.
  bool fresh_start = false;
  std::vector<int> hidden_widths{128};
  int embedding_dim = 64;
  double head_temperature = 0.1;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 disables intermediate checkpoints

  void validate() const;
  int half_batch() const { return batch_size / 2; }
  std::vector<int> widths(int input_dim) const;
  AlignmentSettings alignment() const;

  bool operator==(const TrainConfig&) const = default;
};

/// Pseudo-label quality at the start of an epoch, measured against the
/// held-back ground truth of U (base-class samples only).
struct EpochMetrics {
  int epoch = 0;
  int refresh_count = 0;
  int evaluated = 0;
  double frozen_accuracy = 0.0;
  double online_accuracy = 0.0;
  double pseudo_accuracy = 0.0;
  double confident_accuracy = 0.0;
  int confident_count = 0;

  bool operator==(const EpochMetrics&) const = default;
};

struct TrainLog {
  std::vector<LossReport> steps;
  std::vector<EpochMetrics> epochs;

  bool operator==(const TrainLog&) const = default;
};

/// Everything needed to continue a run bit-for-bit.
struct TrainState {
  int epoch = 0;  // completed epochs
  int steps_per_epoch = 0;
  EncoderParams encoder;
  ClassifierHead head;
  AdamState adam;
  PrototypeBank bank;
  PseudoLabelStore store;
  CurriculumClock clock;
  std::string batch_rng;
  std::string source_augment_rng;
  std::string target_augment_rng;

  bool operator==(const TrainState&) const = default;
};

struct InitialModel {
  FrozenClassifier frozen;
  double train_accuracy = 0.0;
};

struct TrainResult {
  TrainState state;
  TrainLog log;
  EncoderParams initial_encoder;  // encoder right after the initial classifier
};

struct TrainHooks {
  std::function<void(const TrainState&, const TrainLog&)> on_checkpoint;
};

/// Steps per epoch: one pass over max(|B|, |U|) in half batches.
int steps_per_epoch(const DatasetBundle& bundle, const TrainConfig& config);

/// Trains the frozen initial classifier on the labeled base set.
InitialModel train_initial_model(const DatasetBundle& bundle, const TrainConfig& config);

/// State at the start of the main loop: online model copied from the
/// initial classifier (or re-initialized with fresh_start), zero bank,
/// cached frozen predictions.
TrainState make_initial_state(const DatasetBundle& bundle, const TrainConfig& config,
                              const InitialModel& initial);

/// Runs the remaining epochs of `state`.
TrainResult continue_training(const DatasetBundle& bundle, const TrainConfig& config, TrainState state,
                              TrainLog log, const TrainHooks& hooks = {});

TrainResult train_stabpa(const DatasetBundle& bundle, const TrainConfig& config,
                         const TrainHooks& hooks = {});
TrainResult train_from_initial(const DatasetBundle& bundle, const TrainConfig& config,
                               const InitialModel& initial, const TrainHooks& hooks = {});

/// Both alignment terms off; cross-entropy on (augmented) source batches only.
TrainConfig source_only_config(TrainConfig config);
TrainResult train_source_only(const DatasetBundle& bundle, const TrainConfig& config,
                              const TrainHooks& hooks = {});

/// Pseudo-label diagnostics for the current store.
EpochMetrics pseudo_label_metrics(const PseudoLabelStore& store, std::span<const int> truth,
                                  int base_class_count, double beta);

}  // namespace stabpa
