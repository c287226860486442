#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "ssn/model.hpp"

namespace ssn::analysis {

/// M x K keypoint-vs-shifting-channel contribution scores of one FSM.
struct ScoreMatrix {
  int module_id = -1;
  int keypoints = 0;        // M
  int shift_channels = 0;   // K
  std::vector<double> values;  // row-major [M, K]
  bool degenerate = false;     // predictions were all zero

  double at(int m, int k) const { return values.at(static_cast<std::size_t>(m) * shift_channels + k); }
};

struct ScoreOptions {
  bool absolute = true;            // |grad| before spatial averaging
  bool sum_normalization = false;  // divide by channel sum instead of channel max
};

/// For each keypoint m: zero the prediction peak of channel m (per batch item),
/// back-propagate the MSE between modified and original predictions to the
/// FSM's post-shifting maps, and average the gradient spatially per shifting
/// channel. Rows are then normalized within each channel.
template <typename T>
ScoreMatrix keypoint_offset_scores(Model<T>& model, const Tensor4<T>& batch, int module_id,
                                   const ScoreOptions& options = {});

/// Per keypoint, the number of channels with score >= threshold.
std::vector<int> contribution_counts(const ScoreMatrix& scores, double threshold);

struct ErfSeed {
  int layer = -1;         // FSM layer id, or any layer when `non_local` is false
  int channel = 0;
  int x = 0;
  int y = 0;
  bool non_local = true;  // seed the FSM's non-local map; else the layer output
};

/// Input-space squared gradient footprint of one seeded position.
struct ErfMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // [H, W], summed over input channels
  ErfSeed source;

  double at(int y, int x) const { return values.at(static_cast<std::size_t>(y) * width + x); }
  /// Position of the largest value, lowest (y, x) on ties.
  std::pair<int, int> peak() const;
};

/// `input` must have batch 1.
template <typename T>
ErfMap erf_map(Model<T>& model, const Tensor4<T>& input, const ErfSeed& seed);

struct WindowEnergyRow {
  int module_id = 0;
  int k = 0;
  double dx = 0;
  double dy = 0;
  double energy = 0;
};

/// Per-k energy sum_c' (w_beta[c,k] w_alpha[k,c'] F_k(x,y))^2 of one FSM at
/// an output channel and position of `input` (batch item 0).
template <typename T>
std::vector<WindowEnergyRow> window_energy_table(Model<T>& model, const Tensor4<T>& input, int module_id, int channel,
                                                 int x, int y);

void write_scores_csv(std::ostream& os, const ScoreMatrix& s);
void write_erf_csv(std::ostream& os, const ErfMap& e);
void write_window_energy_csv(std::ostream& os, const std::vector<WindowEnergyRow>& rows);

}  // namespace ssn::analysis
