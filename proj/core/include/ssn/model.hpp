#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "ssn/fsm.hpp"
#include "ssn/layers.hpp"
#include "ssn/network.hpp"

namespace ssn {

template <typename T>
struct ConvLayer {
  ConvGeometry geom;
  Param<T> weight;
  std::optional<Param<T>> bias;
  std::optional<NormParams<T>> norm;
  bool relu = false;
};

/// 1x1 reduce -> 3x3 (stride, pad 1) -> 1x1 expand, each normalized, with an
/// identity or projected shortcut and a final ReLU.
template <typename T>
struct BottleneckParams {
  int stride = 1;
  ConvLayer<T> reduce;
  ConvLayer<T> spatial;
  ConvLayer<T> expand;
  std::optional<ConvLayer<T>> projection;
};

struct PoolLayer {
  ConvGeometry geom;
};

enum class FsmState { kBypass, kActive };

template <typename T>
struct FsmLayer {
  fsm::FsmParams<T> params;
  FsmState state = FsmState::kActive;
  int map_height = 0;
  int map_width = 0;
};

template <typename T>
using LayerParams = std::variant<ConvLayer<T>, PoolLayer, FsmLayer<T>, BottleneckParams<T>>;

template <typename T>
Var conv_layer_forward(Tape<T>& tape, Var x, ConvLayer<T>& l, bool train, const std::string& prefix) {
  Param<T>* bias = l.bias ? &*l.bias : nullptr;
  Var y = ag::conv2d(tape, x, l.weight, bias, l.geom, prefix + ".conv");
  if (l.norm) y = ag::normalize(tape, y, *l.norm, train, prefix + ".norm");
  if (l.relu) y = ag::activation(tape, y, ops::Activation::kRelu, prefix + ".relu");
  return y;
}

template <typename T>
Var bottleneck_forward(Tape<T>& tape, Var x, BottleneckParams<T>& b, bool train, const std::string& prefix) {
  const int in_channels = tape.value(x).channels();
  if (b.reduce.weight.dim(1) != in_channels) {
    throw DimensionError(prefix + " channel axis: block expects " + std::to_string(b.reduce.weight.dim(1)) +
                         " input channels, got " + std::to_string(in_channels));
  }
  Var h = conv_layer_forward(tape, x, b.reduce, train, prefix + ".conv1");
  h = conv_layer_forward(tape, h, b.spatial, train, prefix + ".conv2");
  h = conv_layer_forward(tape, h, b.expand, train, prefix + ".conv3");
  Var shortcut = b.projection ? conv_layer_forward(tape, x, *b.projection, train, prefix + ".proj") : x;
  Var sum = ag::add(tape, h, shortcut, prefix + ".residual");
  return ag::activation(tape, sum, ops::Activation::kRelu, prefix + ".relu");
}

template <typename T>
struct ForwardResult {
  Var input;
  Var main;
  std::vector<Var> esp;
  std::vector<Var> layer_outputs;
  std::map<int, fsm::FsmTaps> fsm_taps;  // active FSMs only, keyed by layer index
};

/// Parameters and state of a NetworkGraph.
template <typename T>
class Model {
 public:
  Model() = default;

  /// Builds and initializes all parameters. FSMs start active unless
  /// `fsm_bypass` is set (delayed insertion).
  Model(NetworkGraph graph, std::uint64_t seed, bool fsm_bypass = false) : graph_(std::move(graph)) {
    graph_.validate();
    const auto shapes = graph_.infer_shapes();
    std::mt19937_64 rng(seed);
    MapShape cur = graph_.input;
    for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
      const LayerSpec& l = graph_.layers[i];
      const std::string p = layer_prefix(static_cast<int>(i));
      switch (l.kind) {
        case LayerKind::kConv:
          layers_.emplace_back(make_conv(p, l.in_channels, l.out_channels, l.geom, l.bias,
                                         l.has_norm ? std::optional<ops::NormKind>(l.norm) : std::nullopt, l.groups,
                                         l.relu, rng));
          break;
        case LayerKind::kMaxPool:
          layers_.emplace_back(PoolLayer{l.geom});
          break;
        case LayerKind::kFsm: {
          FsmLayer<T> f;
          f.params = fsm::FsmParams<T>(p + ".fsm", l.in_channels, l.shift_channels, l.ca_variant);
          f.params.initialize(rng);
          f.map_height = cur.height;
          f.map_width = cur.width;
          layers_.emplace_back(std::move(f));
          break;
        }
        case LayerKind::kBottleneck: {
          BottleneckParams<T> b;
          b.stride = l.geom.stride;
          const int mid = l.mid_channels;
          b.reduce = make_conv(p + ".conv1", l.in_channels, mid, {1, 1, 0}, false, l.norm, l.groups, true, rng);
          rename_norm(*b.reduce.norm, p + ".norm1");
          b.spatial = make_conv(p + ".conv2", mid, mid, {3, l.geom.stride, 1}, false, l.norm, l.groups, true, rng);
          rename_norm(*b.spatial.norm, p + ".norm2");
          b.expand = make_conv(p + ".conv3", mid, l.out_channels, {1, 1, 0}, false, l.norm, l.groups, false, rng);
          rename_norm(*b.expand.norm, p + ".norm3");
          if (l.in_channels != l.out_channels || l.geom.stride != 1) {
            b.projection = make_conv(p + ".proj", l.in_channels, l.out_channels, {1, l.geom.stride, 0}, false, l.norm,
                                     l.groups, false, rng);
            rename_norm(*b.projection->norm, p + ".proj_norm");
          }
          layers_.emplace_back(std::move(b));
          break;
        }
      }
      cur = shapes[i];
    }
    for (std::size_t j = 0; j < graph_.esp_heads.size(); ++j) {
      const HeadSpec& h = graph_.esp_heads[j];
      const int c = shapes[static_cast<std::size_t>(h.after_layer)].channels;
      heads_.push_back(make_conv(head_prefix(static_cast<int>(j)), c, h.keypoints, {1, 1, 0}, true, std::nullopt, 0,
                                 false, rng));
    }
    for (int id : graph_.fsm_layers()) set_fsm_state(id, fsm_bypass ? FsmState::kBypass : FsmState::kActive);
  }

  // Layers hold Params referenced by tape closures; keep addresses stable.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const NetworkGraph& graph() const { return graph_; }
  std::vector<LayerParams<T>>& layers() { return layers_; }
  std::vector<ConvLayer<T>>& heads() { return heads_; }

  FsmLayer<T>& fsm_layer(int layer) {
    auto* f = std::get_if<FsmLayer<T>>(&layers_.at(static_cast<std::size_t>(layer)));
    if (!f) throw ArgumentError("layer " + std::to_string(layer) + " is not an FSM");
    return *f;
  }

  /// Bypassed FSMs pass their input through and their parameters are frozen.
  void set_fsm_state(int layer, FsmState s) {
    FsmLayer<T>& f = fsm_layer(layer);
    f.state = s;
    for (Param<T>* p : f.params.parameters()) p->requires_grad = (s == FsmState::kActive);
  }

  /// Every parameter and buffer in slot order.
  std::vector<Param<T>*> all_params() {
    std::vector<Param<T>*> out;
    auto add_conv = [&](ConvLayer<T>& c) {
      out.push_back(&c.weight);
      if (c.bias) out.push_back(&*c.bias);
      if (c.norm) push_norm(out, *c.norm);
    };
    for (auto& layer : layers_) {
      if (auto* c = std::get_if<ConvLayer<T>>(&layer)) add_conv(*c);
      if (auto* f = std::get_if<FsmLayer<T>>(&layer)) {
        auto& fp = f->params;
        for (Param<T>* p : {&fp.w_alpha, &fp.w_beta, &fp.w_f, &fp.dx, &fp.dy}) out.push_back(p);
        push_norm(out, fp.branch_norm);
      }
      if (auto* b = std::get_if<BottleneckParams<T>>(&layer)) {
        add_conv(b->reduce);
        add_conv(b->spatial);
        add_conv(b->expand);
        if (b->projection) add_conv(*b->projection);
      }
    }
    for (auto& h : heads_) add_conv(h);
    return out;
  }

  Param<T>* find_param(const std::string& name) {
    for (Param<T>* p : all_params()) {
      if (p->name == name) return p;
    }
    return nullptr;
  }

  /// Trainable parameters outside FSMs.
  std::vector<Param<T>*> backbone_params() {
    std::vector<Param<T>*> out;
    for (Param<T>* p : all_params()) {
      if (p->name.find(".fsm.") == std::string::npos && is_trainable_slot(*p)) out.push_back(p);
    }
    return out;
  }

  void zero_grad() {
    for (Param<T>* p : all_params()) p->zero_grad();
  }

  ForwardResult<T> forward(Tape<T>& tape, const Tensor4<T>& input, bool train, bool input_grad = false) {
    const Shape4& s = input.shape();
    if (s.channels != graph_.input.channels || s.height != graph_.input.height || s.width != graph_.input.width) {
      throw DimensionError("model input: expected [B," + std::to_string(graph_.input.channels) + "," +
                           std::to_string(graph_.input.height) + "," + std::to_string(graph_.input.width) +
                           "], got " + s.str());
    }
    ForwardResult<T> r;
    r.input = input_grad ? tape.leaf(input, "input") : tape.constant(input, "input");
    Var x = r.input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = layer_prefix(static_cast<int>(i));
      auto& layer = layers_[i];
      if (auto* c = std::get_if<ConvLayer<T>>(&layer)) {
        x = conv_layer_forward(tape, x, *c, train, p);
      } else if (auto* pool = std::get_if<PoolLayer>(&layer)) {
        x = ag::max_pool(tape, x, pool->geom, p + ".pool");
      } else if (auto* f = std::get_if<FsmLayer<T>>(&layer)) {
        if (f->state == FsmState::kActive) {
          fsm::FsmTaps taps = fsm::fsm(tape, x, f->params, train, p + ".fsm");
          r.fsm_taps[static_cast<int>(i)] = taps;
          x = taps.output;
        }
      } else if (auto* b = std::get_if<BottleneckParams<T>>(&layer)) {
        x = bottleneck_forward(tape, x, *b, train, p);
      }
      r.layer_outputs.push_back(x);
    }
    r.main = x;
    for (std::size_t j = 0; j < heads_.size(); ++j) {
      const int after = graph_.esp_heads[j].after_layer;
      r.esp.push_back(conv_layer_forward(tape, r.layer_outputs[static_cast<std::size_t>(after)], heads_[j], train,
                                         head_prefix(static_cast<int>(j))));
    }
    return r;
  }

  /// Inference helper: main head output in eval mode.
  Tensor4<T> predict(const Tensor4<T>& input) {
    Tape<T> tape;
    auto r = forward(tape, input, false);
    return tape.value(r.main);
  }

 private:
  static bool is_trainable_slot(const Param<T>& p) {
    return p.name.find("running_") == std::string::npos;
  }

  static void push_norm(std::vector<Param<T>*>& out, NormParams<T>& n) {
    out.push_back(&n.scale);
    out.push_back(&n.offset);
    if (n.uses_running_stats()) {
      out.push_back(&n.running_mean);
      out.push_back(&n.running_var);
    }
  }

  static void rename_norm(NormParams<T>& n, const std::string& prefix) {
    n.scale.name = prefix + ".scale";
    n.offset.name = prefix + ".offset";
    n.running_mean.name = prefix + ".running_mean";
    n.running_var.name = prefix + ".running_var";
  }

  template <typename Rng>
  static ConvLayer<T> make_conv(const std::string& prefix, int in, int out, ConvGeometry g, bool bias,
                                std::optional<ops::NormKind> norm, int groups, bool relu, Rng& rng) {
    ConvLayer<T> c;
    c.geom = g;
    c.weight = Param<T>(prefix + ".weight", {out, in, g.kernel, g.kernel});
    std::normal_distribution<double> he(0.0, std::sqrt(2.0 / (double(in) * g.kernel * g.kernel)));
    for (T& v : c.weight.value) v = T(he(rng));
    if (bias) c.bias = Param<T>(prefix + ".bias", {out});
    if (norm) c.norm = NormParams<T>(prefix + ".norm", *norm, out, groups);
    c.relu = relu;
    return c;
  }

  NetworkGraph graph_;
  std::vector<LayerParams<T>> layers_;
  std::vector<ConvLayer<T>> heads_;
};

}  // namespace ssn
