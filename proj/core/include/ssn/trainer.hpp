#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "ssn/adam.hpp"
#include "ssn/model.hpp"
#include "ssn/synth.hpp"

namespace ssn {

/// Step decay of the backbone learning rate: lr is multiplied by `factor` at
/// iteration `after_iter` and again every `every` iterations after that.
/// every == 0 disables decay.
struct LrDecay {
  long after_iter = 0;
  double factor = 0.5;
  long every = 0;
};

struct TrainConfig {
  double base_lr = 5e-4;
  double offset_lr = 1e-3;
  double offset_decay_per_epoch = 0.10;
  int batch_size = 16;
  long iterations = 2000;
  long insertion_iteration = 150;  // desk scale; the full-scale schedule inserts at 6000
  bool fsm_enabled = true;  // false keeps FSMs in bypass for the whole run
  double offset_init_range = 1.0;
  LrDecay lr_decay;
  bool augment = true;
  AugmentRanges augmentation;
  double heatmap_sigma = 1.0;
  int epoch_length = 0;  // samples per epoch; 0 = dataset size
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Backbone lr at iteration `it`: base_lr * factor^n with
/// n = 0 before after_iter, else (it - after_iter) / every + 1.
double base_lr_schedule(long iteration, const TrainConfig& c);

/// offset_lr * (1 - offset_decay_per_epoch)^epoch
double offset_lr_schedule(long epoch, const TrainConfig& c);

struct StepRecord {
  long iteration = 0;  // iteration the step ran at (0-based)
  double loss_main = 0;
  std::vector<double> loss_esp;
  double base_lr = 0;
  double offset_lr = 0;
};

/// Stacks dataset samples into a batch.
void stack_batch(const std::vector<SynthSample>& samples, Tensor4<float>& images, Tensor4<float>& targets);

/// Owns the model, optimizer and schedule state of one run.
///
/// FSMs start in bypass and become active at `insertion_iteration` (w_beta
/// zeroed, offsets redrawn, FSM parameters added to the optimizer in groups
/// "fsm" and "offsets"). Batch composition and augmentation are pure functions
/// of (seed, iteration), so a run restored from a checkpoint continues exactly
/// as the uninterrupted one would.
class Trainer {
 public:
  Trainer(NetworkGraph graph, TrainConfig config, std::shared_ptr<const SynthDataset> data);

  StepRecord step();
  /// Inserts the FSMs now. Throws StateError when already inserted.
  void insert_fsms();

  /// Mean main-head MSE over `data` in evaluation mode.
  double evaluate(const SynthDataset& data, int batch_size = 32);
  /// Fraction of samples whose decoded main-head peak lies within `radius`
  /// heatmap cells of the keypoint.
  double localization_accuracy(const SynthDataset& data, double radius = 1.0);

  long iteration() const { return iteration_; }
  long epoch() const { return epoch_of(iteration_); }
  long epoch_of(long iteration) const;
  bool inserted() const { return inserted_; }

  Model<float>& model() { return model_; }
  Adam<float>& optimizer() { return optimizer_; }
  std::mt19937_64& rng() { return rng_; }
  const TrainConfig& config() const { return config_; }
  const SynthDataset& data() const { return *data_; }

  /// Sample indices used by iteration `it`.
  std::vector<int> batch_indices(long iteration) const;

  // Used by checkpoint restore.
  void set_iteration(long it) { iteration_ = it; }
  /// Marks FSMs active and rebuilds the FSM optimizer groups without
  /// touching parameter values.
  void restore_inserted();

 private:
  void add_fsm_groups();
  std::vector<int> epoch_permutation(long epoch) const;

  TrainConfig config_;
  std::shared_ptr<const SynthDataset> data_;
  Model<float> model_;
  Adam<float> optimizer_;
  std::mt19937_64 rng_;
  long iteration_ = 0;
  bool inserted_ = false;
  int backbone_group_ = -1;
  mutable long cached_epoch_ = -1;
  mutable std::vector<int> cached_perm_;
};

/// Runs until `until` iterations, writing one metrics row per step and an
/// offsets_epoch<e>.csv snapshot into `snapshot_dir` each time an epoch
/// completes (when non-empty).
void run_training(Trainer& t, long until, std::ostream* metrics, const std::filesystem::path& snapshot_dir = {});

void write_metrics_header(std::ostream& os, int esp_heads);
void write_metrics_row(std::ostream& os, const StepRecord& r);

/// Every FSM's offsets, module id = layer index.
std::vector<fsm::OffsetRow> model_offset_rows(Model<float>& m);

}  // namespace ssn
