#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssn/fsm.hpp"
#include "ssn/ops.hpp"

namespace ssn {

enum class LayerKind { kConv, kMaxPool, kFsm, kBottleneck };

std::string to_string(LayerKind k);

/// One entry of a sequential network description. Only the fields relevant to
/// `kind` are meaningful.
struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  // conv / bottleneck / fsm channels (fsm: in == out == in_channels)
  int in_channels = 0;
  int out_channels = 0;
  int mid_channels = 0;  // bottleneck
  ConvGeometry geom;     // conv, max-pool; bottleneck uses geom.stride
  bool bias = false;     // conv
  bool has_norm = false; // conv
  ops::NormKind norm = ops::NormKind::kGroup;
  int groups = ops::kDefaultGroups;
  bool relu = false;     // conv
  int shift_channels = 0;  // fsm K
  fsm::CaVariant ca_variant = fsm::CaVariant::kSoftplusNormalized;

  static LayerSpec conv(int in, int out, int kernel, int stride, int pad, bool has_norm, ops::NormKind norm,
                        bool relu, bool bias = false);
  static LayerSpec max_pool(int kernel, int stride, int pad);
  static LayerSpec fsm(int channels, int shift_channels, fsm::CaVariant variant);
  static LayerSpec bottleneck(int in, int out, int stride, ops::NormKind norm);

  bool operator==(const LayerSpec&) const = default;
};

/// Early-stage predictor: 1x1 conv (with bias) from a layer's output to M maps.
struct HeadSpec {
  int after_layer = 0;
  int keypoints = 0;
  bool operator==(const HeadSpec&) const = default;
};

struct MapShape {
  int channels = 0;
  int height = 0;
  int width = 0;
  bool operator==(const MapShape&) const = default;
};

/// A named parameter slot with its owning layer.
struct ParamSlot {
  std::string name;
  std::vector<int> shape;
  bool trainable = true;
  int owner = -1;  // layer index, or -(head index + 2) for ESP heads
  std::int64_t size() const;
};

/// Ordered layer list with shape inference, validation and cost accounting.
struct NetworkGraph {
  static constexpr int kFormatVersion = 1;

  MapShape input;
  int keypoints = 0;  // channels of the final layer (main head)
  bool paper_placement = false;
  std::vector<LayerSpec> layers;
  std::vector<HeadSpec> esp_heads;

  /// Output shape of every layer; throws DimensionError/ConfigError when
  /// consecutive layers disagree.
  std::vector<MapShape> infer_shapes() const;
  MapShape output_shape() const;
  void validate() const;

  std::vector<ParamSlot> parameter_slots() const;
  std::int64_t count_params() const;  // trainable slots only
  std::vector<int> fsm_layers() const;

  std::string to_json() const;
  static NetworkGraph from_json(const std::string& text);

  bool operator==(const NetworkGraph&) const = default;
};

/// Canonical parameter prefix of layer `i` ("L<i>") and ESP head `j` ("E<j>").
std::string layer_prefix(int i);
std::string head_prefix(int j);

/// Bottleneck mid width (out / 4).
int bottleneck_mid(int out_channels);

NetworkGraph build_3block3fsm(int height, int width, int shift_channels, int keypoints,
                              fsm::CaVariant variant = fsm::CaVariant::kSigmoid);

/// ResNet-50 encoder with FSMs before every Bottleneck except right after a
/// downsampling block (3, 3, 5, 2 FSMs per stage), first FSM at K/2.
NetworkGraph build_resnet50_fsm(int height, int width, int shift_channels, int keypoints);

struct ToyNetOptions {
  int input_channels = 3;
  int height = 32;
  int width = 32;
  int width_channels = 16;
  int shift_channels = 8;
  int fsm_count = 2;
  int stem_kernel = 5;
  int stem_stride = 2;
  int keypoints = 1;
  fsm::CaVariant variant = fsm::CaVariant::kSigmoid;
};

/// Small local network: stem conv, then `fsm_count` x (FSM, 1x1 conv-GN-ReLU),
/// then a 1x1 head. Without FSMs its receptive field is the stem kernel.
NetworkGraph build_toy_net(const ToyNetOptions& o);

/// Adds an early-stage predictor branching from `after_layer`.
NetworkGraph attach_esp(const NetworkGraph& graph, int after_layer, int keypoints);

// ---------------------------------------------------------------------------
// FLOPs.

enum class FlopConvention {
  kTwoPerMac,  // multiply and add counted separately
  kOnePerMac,  // one op per multiply-accumulate
};

struct FlopReport {
  std::int64_t total = 0;
  std::int64_t mac_ops = 0;   // conv/projection contribution
  std::int64_t elementwise = 0;
  std::vector<std::int64_t> per_layer;
};

FlopReport count_flops(const NetworkGraph& graph, FlopConvention convention = FlopConvention::kTwoPerMac);

}  // namespace ssn
