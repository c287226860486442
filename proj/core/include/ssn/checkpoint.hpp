#pragma once

// Single-file checkpoint:
//
//   "SSNC" | u32 version | u64 payload bytes | payload
//
// The payload holds the run metadata (config JSON), the graph JSON, the
// iteration counter, the FSM insertion flag, the trainer rng state, every
// parameter and buffer as f32 little-endian, and the Adam moments per group.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ssn/model.hpp"
#include "ssn/network.hpp"

namespace ssn {

class Trainer;

struct CheckpointState {
  static constexpr std::uint32_t kVersion = 1;

  struct Blob {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
  };
  struct Moments {
    std::string param;
    std::vector<float> m;
    std::vector<float> v;
  };
  struct Group {
    std::string name;
    double lr = 0;
    std::int64_t steps = 0;
    std::vector<Moments> moments;
  };

  std::string metadata;  // RunConfig JSON, may be empty
  NetworkGraph graph;
  std::int64_t iteration = 0;
  bool inserted = false;
  std::string rng_state;
  std::vector<Blob> params;
  std::vector<Group> groups;
};

std::string encode_checkpoint(const CheckpointState& s);
CheckpointState decode_checkpoint(std::string_view bytes);

/// Writes to `<path>.tmp` and renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const CheckpointState& s);
CheckpointState load_checkpoint(const std::filesystem::path& path);

CheckpointState capture_checkpoint(Trainer& t, const std::string& metadata);
/// `t` must be freshly constructed from the checkpoint's graph.
void restore_checkpoint(Trainer& t, const CheckpointState& s);

/// Copies parameter blobs into `m` (all names must match) and activates FSMs
/// when the checkpoint says they were inserted.
void load_model_params(Model<float>& m, const CheckpointState& s);

}  // namespace ssn
