#include "ssn/analysis.hpp"

#include <cmath>
#include <cstdio>

#include "ssn/error.hpp"

namespace ssn::analysis {

namespace {

template <typename T>
void require_fsm(Model<T>& model, int module_id) {
  const auto ids = model.graph().fsm_layers();
  if (std::find(ids.begin(), ids.end(), module_id) == ids.end()) {
    throw ArgumentError("layer " + std::to_string(module_id) + " is not an FSM");
  }
  if (model.fsm_layer(module_id).state != FsmState::kActive) {
    throw StateError("FSM at layer " + std::to_string(module_id) + " is bypassed");
  }
}

}  // namespace

template <typename T>
ScoreMatrix keypoint_offset_scores(Model<T>& model, const Tensor4<T>& batch, int module_id,
                                   const ScoreOptions& options) {
  require_fsm(model, module_id);
  Tape<T> tape;
  auto r = model.forward(tape, batch, false, /*input_grad=*/true);
  const Tensor4<T>& pred = tape.value(r.main);
  const Var s_var = r.fsm_taps.at(module_id).post_shift;
  const Shape4 ss = tape.value(s_var).shape();

  ScoreMatrix out;
  out.module_id = module_id;
  out.keypoints = pred.channels();
  out.shift_channels = ss.channels;
  out.values.assign(static_cast<std::size_t>(out.keypoints) * out.shift_channels, 0.0);

  bool any = false;
  for (T v : pred.values()) any = any || v != T(0);
  if (!any) {
    out.degenerate = true;
    model.zero_grad();
    return out;
  }

  const double n = double(pred.size());
  for (int m = 0; m < out.keypoints; ++m) {
    // d/dpred of mean((pred - modified)^2), nonzero only at the zeroed peaks.
    Tensor4<T> seed(pred.shape());
    for (int b = 0; b < pred.batch(); ++b) {
      auto plane = pred.plane(b, m);
      std::size_t best = 0;
      for (std::size_t i = 1; i < plane.size(); ++i) {
        if (plane[i] > plane[best]) best = i;
      }
      const int y = static_cast<int>(best / static_cast<std::size_t>(pred.width()));
      const int x = static_cast<int>(best % static_cast<std::size_t>(pred.width()));
      seed(b, m, y, x) = T(2.0 * double(pred(b, m, y, x)) / n);
    }
    tape.zero_grad();
    tape.backward(r.main, seed);
    const Tensor4<T> g = tape.grad(s_var);
    for (int k = 0; k < ss.channels; ++k) {
      double acc = 0;
      for (int b = 0; b < ss.batch; ++b) {
        for (T v : g.plane(b, k)) acc += options.absolute ? std::abs(double(v)) : double(v);
      }
      out.values[static_cast<std::size_t>(m) * ss.channels + k] = acc / (double(ss.batch) * ss.plane());
    }
  }
  model.zero_grad();

  for (int k = 0; k < out.shift_channels; ++k) {
    double norm = 0;
    for (int m = 0; m < out.keypoints; ++m) {
      const double v = std::abs(out.at(m, k));
      norm = options.sum_normalization ? norm + v : std::max(norm, v);
    }
    if (norm == 0) continue;
    for (int m = 0; m < out.keypoints; ++m) out.values[static_cast<std::size_t>(m) * out.shift_channels + k] /= norm;
  }
  return out;
}

std::vector<int> contribution_counts(const ScoreMatrix& scores, double threshold) {
  std::vector<int> counts(static_cast<std::size_t>(scores.keypoints), 0);
  for (int m = 0; m < scores.keypoints; ++m) {
    for (int k = 0; k < scores.shift_channels; ++k) {
      if (scores.at(m, k) >= threshold) ++counts[static_cast<std::size_t>(m)];
    }
  }
  return counts;
}

std::pair<int, int> ErfMap::peak() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return {static_cast<int>(best / static_cast<std::size_t>(width)), static_cast<int>(best % static_cast<std::size_t>(width))};
}

template <typename T>
ErfMap erf_map(Model<T>& model, const Tensor4<T>& input, const ErfSeed& seed) {
  if (input.batch() != 1) throw ArgumentError("erf_map: input batch must be 1, got " + input.shape().str());
  const int n_layers = static_cast<int>(model.graph().layers.size());
  if (seed.layer < 0 || seed.layer >= n_layers) throw ArgumentError("erf_map: unknown layer " + std::to_string(seed.layer));
  if (seed.non_local) require_fsm(model, seed.layer);

  Tape<T> tape;
  auto r = model.forward(tape, input, false, /*input_grad=*/true);
  const Var target = seed.non_local ? r.fsm_taps.at(seed.layer).non_local
                                    : r.layer_outputs[static_cast<std::size_t>(seed.layer)];
  const Shape4 ts = tape.value(target).shape();
  if (seed.channel < 0 || seed.channel >= ts.channels || seed.x < 0 || seed.x >= ts.width || seed.y < 0 ||
      seed.y >= ts.height) {
    throw ArgumentError("erf_map: seed (channel " + std::to_string(seed.channel) + ", x " + std::to_string(seed.x) +
                        ", y " + std::to_string(seed.y) + ") outside map " + ts.str());
  }
  Tensor4<T> g(ts);
  g(0, seed.channel, seed.y, seed.x) = T(1);
  tape.backward(target, g);
  const Tensor4<T> gi = tape.grad(r.input);
  model.zero_grad();

  ErfMap out;
  out.height = input.height();
  out.width = input.width();
  out.source = seed;
  out.values.assign(static_cast<std::size_t>(out.height) * out.width, 0.0);
  for (int c = 0; c < gi.channels(); ++c) {
    auto plane = gi.plane(0, c);
    for (std::size_t i = 0; i < plane.size(); ++i) out.values[i] += double(plane[i]) * double(plane[i]);
  }
  return out;
}

template <typename T>
std::vector<WindowEnergyRow> window_energy_table(Model<T>& model, const Tensor4<T>& input, int module_id, int channel,
                                                 int x, int y) {
  require_fsm(model, module_id);
  Tape<T> tape;
  auto r = model.forward(tape, input, false);
  const Tensor4<T>& att = tape.value(r.fsm_taps.at(module_id).attention);
  auto& p = model.fsm_layer(module_id).params;
  if (channel < 0 || channel >= p.channels || x < 0 || x >= att.width() || y < 0 || y >= att.height()) {
    throw ArgumentError("window energy: (channel " + std::to_string(channel) + ", x " + std::to_string(x) + ", y " +
                        std::to_string(y) + ") outside FSM map " + att.shape().str());
  }
  const auto e = fsm::window_energy_factored(p, att, 0, channel, y, x);
  std::vector<WindowEnergyRow> rows;
  for (int k = 0; k < p.shift_channels; ++k) {
    rows.push_back({module_id, k, double(p.dx.value[k]), double(p.dy.value[k]), e[static_cast<std::size_t>(k)]});
  }
  return rows;
}

void write_scores_csv(std::ostream& os, const ScoreMatrix& s) {
  os << "module_id,keypoint,k,score\n";
  char buf[96];
  for (int m = 0; m < s.keypoints; ++m) {
    for (int k = 0; k < s.shift_channels; ++k) {
      std::snprintf(buf, sizeof buf, "%d,%d,%d,%.9g\n", s.module_id, m, k, s.at(m, k));
      os << buf;
    }
  }
}

void write_erf_csv(std::ostream& os, const ErfMap& e) {
  os << "y,x,value\n";
  char buf[96];
  for (int y = 0; y < e.height; ++y) {
    for (int x = 0; x < e.width; ++x) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.9g\n", y, x, e.at(y, x));
      os << buf;
    }
  }
}

void write_window_energy_csv(std::ostream& os, const std::vector<WindowEnergyRow>& rows) {
  os << "module_id,k,dx,dy,energy\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g\n", r.module_id, r.k, r.dx, r.dy, r.energy);
    os << buf;
  }
}

template ScoreMatrix keypoint_offset_scores(Model<float>&, const Tensor4<float>&, int, const ScoreOptions&);
template ScoreMatrix keypoint_offset_scores(Model<double>&, const Tensor4<double>&, int, const ScoreOptions&);
template ErfMap erf_map(Model<float>&, const Tensor4<float>&, const ErfSeed&);
template ErfMap erf_map(Model<double>&, const Tensor4<double>&, const ErfSeed&);
template std::vector<WindowEnergyRow> window_energy_table(Model<float>&, const Tensor4<float>&, int, int, int, int);
template std::vector<WindowEnergyRow> window_energy_table(Model<double>&, const Tensor4<double>&, int, int, int, int);

}  // namespace ssn::analysis
