#pragma once

#include <string>
#include <vector>

#include "ssn/network.hpp"
#include "ssn/synth.hpp"
#include "ssn/trainer.hpp"

namespace ssn {

/// Which builder produces the network.
struct NetworkConfig {
  std::string kind = "toy";  // toy | 3block3fsm | resnet50
  int height = 32;
  int width = 32;
  int input_channels = 3;
  int keypoints = 1;
  int shift_channels = 8;
  std::string ca_variant = "sigmoid";
  // toy only
  int width_channels = 16;
  int fsm_count = 2;
  int stem_kernel = 5;
  int stem_stride = 2;
  std::vector<int> esp_after;  // layer ids that get an early-stage predictor

  NetworkGraph build() const;
};

struct DataConfig {
  SynthSpec train;
  int eval_count = 128;
  std::uint64_t eval_seed = 1000003;

  SynthSpec eval_spec() const;
};

struct AnalysisConfig {
  int module_id = -1;  // -1: first FSM
  int channel = 0;
  int x = 0;
  int y = 0;
  double threshold = 0.5;
  bool signed_scores = false;
  bool sum_normalization = false;
  int samples = 8;  // batch drawn from the eval set
};

/// Full run description. Every key is optional; defaults are the member
/// initializers above and in TrainConfig / SynthSpec.
struct RunConfig {
  NetworkConfig network;
  DataConfig data;
  TrainConfig train;
  AnalysisConfig analysis;

  /// Parses JSON text. Unknown keys and type errors raise ConfigError with the
  /// key path (e.g. "train.lr_decay.every").
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string to_json() const;

  void validate() const;
};

}  // namespace ssn
