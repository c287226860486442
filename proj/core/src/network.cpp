#include "ssn/network.hpp"

#include "json.hpp"

namespace ssn {

using json = nlohmann::json;

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kMaxPool: return "max_pool";
    case LayerKind::kFsm: return "fsm";
    case LayerKind::kBottleneck: return "bottleneck";
  }
  return "?";
}

namespace {

LayerKind parse_kind(const std::string& s) {
  if (s == "conv") return LayerKind::kConv;
  if (s == "max_pool") return LayerKind::kMaxPool;
  if (s == "fsm") return LayerKind::kFsm;
  if (s == "bottleneck") return LayerKind::kBottleneck;
  throw FormatError("graph: unknown layer kind '" + s + "'");
}

std::string norm_name(ops::NormKind k) { return k == ops::NormKind::kBatch ? "batch" : "group"; }

ops::NormKind parse_norm(const std::string& s) {
  if (s == "batch") return ops::NormKind::kBatch;
  if (s == "group") return ops::NormKind::kGroup;
  throw FormatError("graph: unknown norm kind '" + s + "'");
}

void norm_slots(std::vector<ParamSlot>& out, const std::string& prefix, ops::NormKind kind, int channels, int owner) {
  out.push_back({prefix + ".scale", {channels}, true, owner});
  out.push_back({prefix + ".offset", {channels}, true, owner});
  if (kind == ops::NormKind::kBatch) {
    out.push_back({prefix + ".running_mean", {channels}, false, owner});
    out.push_back({prefix + ".running_var", {channels}, false, owner});
  }
}

bool projection_needed(const LayerSpec& l) { return l.in_channels != l.out_channels || l.geom.stride != 1; }

}  // namespace

std::int64_t ParamSlot::size() const {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

LayerSpec LayerSpec::conv(int in, int out, int kernel, int stride, int pad, bool has_norm, ops::NormKind norm,
                          bool relu, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::kConv;
  l.in_channels = in;
  l.out_channels = out;
  l.geom = {kernel, stride, pad};
  l.has_norm = has_norm;
  l.norm = norm;
  l.relu = relu;
  l.bias = bias;
  return l;
}

LayerSpec LayerSpec::max_pool(int kernel, int stride, int pad) {
  LayerSpec l;
  l.kind = LayerKind::kMaxPool;
  l.geom = {kernel, stride, pad};
  return l;
}

LayerSpec LayerSpec::fsm(int channels, int shift_channels, fsm::CaVariant variant) {
  LayerSpec l;
  l.kind = LayerKind::kFsm;
  l.in_channels = channels;
  l.out_channels = channels;
  l.shift_channels = shift_channels;
  l.ca_variant = variant;
  l.norm = ops::NormKind::kBatch;
  return l;
}

LayerSpec LayerSpec::bottleneck(int in, int out, int stride, ops::NormKind norm) {
  LayerSpec l;
  l.kind = LayerKind::kBottleneck;
  l.in_channels = in;
  l.out_channels = out;
  l.mid_channels = bottleneck_mid(out);
  l.geom = {3, stride, 1};
  l.norm = norm;
  l.has_norm = true;
  return l;
}

std::string layer_prefix(int i) { return "L" + std::to_string(i); }
std::string head_prefix(int j) { return "E" + std::to_string(j); }

int bottleneck_mid(int out_channels) { return std::max(1, out_channels / 4); }

std::vector<MapShape> NetworkGraph::infer_shapes() const {
  if (input.channels < 1 || input.height < 1 || input.width < 1) {
    throw ConfigError("graph input: channels/height/width must be >= 1");
  }
  std::vector<MapShape> shapes;
  MapShape cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = layer_prefix(static_cast<int>(i)) + " (" + to_string(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::kConv:
      case LayerKind::kBottleneck:
      case LayerKind::kFsm:
        if (l.in_channels != cur.channels) {
          throw DimensionError(where + " channel axis: expects " + std::to_string(l.in_channels) +
                               " input channels, previous layer yields " + std::to_string(cur.channels));
        }
        break;
      case LayerKind::kMaxPool:
        break;
    }
    if (l.kind == LayerKind::kConv || l.kind == LayerKind::kMaxPool || l.kind == LayerKind::kBottleneck) {
      if (l.geom.kernel < 1 || l.geom.stride < 1 || l.geom.pad < 0) throw ConfigError(where + ": invalid geometry");
      const int h = l.geom.out_extent(cur.height);
      const int w = l.geom.out_extent(cur.width);
      if (h < 1 || w < 1) throw DimensionError(where + " spatial axis: input too small");
      cur.height = h;
      cur.width = w;
    }
    if (l.kind == LayerKind::kConv || l.kind == LayerKind::kBottleneck) {
      if (l.out_channels < 1) throw ConfigError(where + ": out_channels must be >= 1");
      cur.channels = l.out_channels;
    }
    if (l.kind == LayerKind::kFsm && l.shift_channels < 1) throw ConfigError(where + ": K must be >= 1");
    const bool grouped = (l.kind == LayerKind::kConv && l.has_norm && l.norm == ops::NormKind::kGroup) ||
                         (l.kind == LayerKind::kBottleneck && l.norm == ops::NormKind::kGroup);
    if (grouped) {
      for (int ch : {l.out_channels, l.mid_channels}) {
        if (ch < 1) continue;
        const int g = ops::effective_groups(l.groups, ch);
        if (ch % g != 0) {
          throw ConfigError(where + ": " + std::to_string(g) + " groups do not divide " + std::to_string(ch) +
                            " channels");
        }
      }
    }
    shapes.push_back(cur);
  }
  return shapes;
}

MapShape NetworkGraph::output_shape() const {
  auto s = infer_shapes();
  return s.empty() ? input : s.back();
}

void NetworkGraph::validate() const {
  if (layers.empty()) throw ConfigError("graph: no layers");
  const auto shapes = infer_shapes();
  if (shapes.back().channels != keypoints) {
    throw DimensionError("graph head channel axis: final layer yields " + std::to_string(shapes.back().channels) +
                         " maps but keypoints = " + std::to_string(keypoints));
  }
  for (std::size_t j = 0; j < esp_heads.size(); ++j) {
    const HeadSpec& h = esp_heads[j];
    if (h.after_layer < 0 || h.after_layer >= static_cast<int>(layers.size())) {
      throw ConfigError("graph: ESP head " + std::to_string(j) + " references unknown layer " +
                        std::to_string(h.after_layer));
    }
    if (h.keypoints < 1) throw ConfigError("graph: ESP head " + std::to_string(j) + " needs keypoints >= 1");
  }
  if (paper_placement) {
    for (std::size_t i = 1; i < layers.size(); ++i) {
      const LayerSpec& prev = layers[i - 1];
      const bool pooling_block = prev.kind == LayerKind::kBottleneck && prev.geom.stride > 1;
      if (layers[i].kind == LayerKind::kFsm && pooling_block) {
        throw ConfigError("graph: " + layer_prefix(static_cast<int>(i)) +
                          " places an FSM directly after a downsampling block");
      }
    }
  }
}

std::vector<ParamSlot> NetworkGraph::parameter_slots() const {
  std::vector<ParamSlot> slots;
  const auto shapes = infer_shapes();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const int owner = static_cast<int>(i);
    const std::string p = layer_prefix(owner);
    switch (l.kind) {
      case LayerKind::kConv:
        slots.push_back({p + ".weight", {l.out_channels, l.in_channels, l.geom.kernel, l.geom.kernel}, true, owner});
        if (l.bias) slots.push_back({p + ".bias", {l.out_channels}, true, owner});
        if (l.has_norm) norm_slots(slots, p + ".norm", l.norm, l.out_channels, owner);
        break;
      case LayerKind::kMaxPool:
        break;
      case LayerKind::kFsm: {
        const int c = l.in_channels, k = l.shift_channels;
        const std::string f = p + ".fsm";
        slots.push_back({f + ".w_alpha", {k, c}, true, owner});
        slots.push_back({f + ".w_beta", {c, k}, true, owner});
        slots.push_back({f + ".w_f", {k, c}, true, owner});
        slots.push_back({f + ".dx", {k}, true, owner});
        slots.push_back({f + ".dy", {k}, true, owner});
        norm_slots(slots, f + ".bn", ops::NormKind::kBatch, c, owner);
        break;
      }
      case LayerKind::kBottleneck: {
        const int mid = l.mid_channels;
        slots.push_back({p + ".conv1.weight", {mid, l.in_channels, 1, 1}, true, owner});
        norm_slots(slots, p + ".norm1", l.norm, mid, owner);
        slots.push_back({p + ".conv2.weight", {mid, mid, 3, 3}, true, owner});
        norm_slots(slots, p + ".norm2", l.norm, mid, owner);
        slots.push_back({p + ".conv3.weight", {l.out_channels, mid, 1, 1}, true, owner});
        norm_slots(slots, p + ".norm3", l.norm, l.out_channels, owner);
        if (projection_needed(l)) {
          slots.push_back({p + ".proj.weight", {l.out_channels, l.in_channels, 1, 1}, true, owner});
          norm_slots(slots, p + ".proj_norm", l.norm, l.out_channels, owner);
        }
        break;
      }
    }
  }
  for (std::size_t j = 0; j < esp_heads.size(); ++j) {
    const HeadSpec& h = esp_heads[j];
    const int owner = -(static_cast<int>(j) + 2);
    const int c = shapes.at(static_cast<std::size_t>(h.after_layer)).channels;
    slots.push_back({head_prefix(static_cast<int>(j)) + ".weight", {h.keypoints, c, 1, 1}, true, owner});
    slots.push_back({head_prefix(static_cast<int>(j)) + ".bias", {h.keypoints}, true, owner});
  }
  return slots;
}

std::int64_t NetworkGraph::count_params() const {
  std::int64_t n = 0;
  for (const ParamSlot& s : parameter_slots()) {
    if (s.trainable) n += s.size();
  }
  return n;
}

std::vector<int> NetworkGraph::fsm_layers() const {
  std::vector<int> ids;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::kFsm) ids.push_back(static_cast<int>(i));
  }
  return ids;
}

std::string NetworkGraph::to_json() const {
  json doc;
  doc["format"] = "ssn-graph";
  doc["version"] = kFormatVersion;
  doc["input"] = {{"channels", input.channels}, {"height", input.height}, {"width", input.width}};
  doc["keypoints"] = keypoints;
  doc["paper_placement"] = paper_placement;
  json layer_list = json::array();
  for (const LayerSpec& l : layers) {
    json j;
    j["kind"] = to_string(l.kind);
    switch (l.kind) {
      case LayerKind::kConv:
        j["in"] = l.in_channels;
        j["out"] = l.out_channels;
        j["kernel"] = l.geom.kernel;
        j["stride"] = l.geom.stride;
        j["pad"] = l.geom.pad;
        j["bias"] = l.bias;
        j["norm"] = l.has_norm ? norm_name(l.norm) : "none";
        j["groups"] = l.groups;
        j["relu"] = l.relu;
        break;
      case LayerKind::kMaxPool:
        j["kernel"] = l.geom.kernel;
        j["stride"] = l.geom.stride;
        j["pad"] = l.geom.pad;
        break;
      case LayerKind::kFsm:
        j["channels"] = l.in_channels;
        j["shift_channels"] = l.shift_channels;
        j["attention"] = fsm::to_string(l.ca_variant);
        break;
      case LayerKind::kBottleneck:
        j["in"] = l.in_channels;
        j["mid"] = l.mid_channels;
        j["out"] = l.out_channels;
        j["stride"] = l.geom.stride;
        j["norm"] = norm_name(l.norm);
        j["groups"] = l.groups;
        break;
    }
    layer_list.push_back(j);
  }
  doc["layers"] = layer_list;
  json heads = json::array();
  for (const HeadSpec& h : esp_heads) heads.push_back({{"after_layer", h.after_layer}, {"keypoints", h.keypoints}});
  doc["esp_heads"] = heads;
  return doc.dump(2);
}

NetworkGraph NetworkGraph::from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("graph document: ") + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != "ssn-graph") throw FormatError("graph document: wrong format tag");
    const int version = doc.at("version").get<int>();
    if (version != kFormatVersion) {
      throw FormatError("graph document: unsupported version " + std::to_string(version));
    }
    NetworkGraph g;
    g.input.channels = doc.at("input").at("channels").get<int>();
    g.input.height = doc.at("input").at("height").get<int>();
    g.input.width = doc.at("input").at("width").get<int>();
    g.keypoints = doc.at("keypoints").get<int>();
    g.paper_placement = doc.at("paper_placement").get<bool>();
    for (const json& j : doc.at("layers")) {
      LayerSpec l;
      l.kind = parse_kind(j.at("kind").get<std::string>());
      switch (l.kind) {
        case LayerKind::kConv: {
          const std::string norm = j.at("norm").get<std::string>();
          l = LayerSpec::conv(j.at("in").get<int>(), j.at("out").get<int>(), j.at("kernel").get<int>(),
                              j.at("stride").get<int>(), j.at("pad").get<int>(), norm != "none",
                              norm == "none" ? ops::NormKind::kGroup : parse_norm(norm), j.at("relu").get<bool>(),
                              j.at("bias").get<bool>());
          l.groups = j.at("groups").get<int>();
          break;
        }
        case LayerKind::kMaxPool:
          l = LayerSpec::max_pool(j.at("kernel").get<int>(), j.at("stride").get<int>(), j.at("pad").get<int>());
          break;
        case LayerKind::kFsm:
          l = LayerSpec::fsm(j.at("channels").get<int>(), j.at("shift_channels").get<int>(),
                             fsm::parse_ca_variant(j.at("attention").get<std::string>()));
          break;
        case LayerKind::kBottleneck:
          l = LayerSpec::bottleneck(j.at("in").get<int>(), j.at("out").get<int>(), j.at("stride").get<int>(),
                                    parse_norm(j.at("norm").get<std::string>()));
          l.mid_channels = j.at("mid").get<int>();
          l.groups = j.at("groups").get<int>();
          break;
      }
      g.layers.push_back(l);
    }
    for (const json& h : doc.at("esp_heads")) {
      g.esp_heads.push_back({h.at("after_layer").get<int>(), h.at("keypoints").get<int>()});
    }
    return g;
  } catch (const json::exception& e) {
    throw FormatError(std::string("graph document: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("graph document: ") + e.what());
  }
}

NetworkGraph build_3block3fsm(int height, int width, int shift_channels, int keypoints, fsm::CaVariant variant) {
  if (height % 4 != 0 || width % 4 != 0) {
    throw ConfigError("3Block+3FSM: input " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by 4");
  }
  NetworkGraph g;
  g.input = {3, height, width};
  g.keypoints = keypoints;
  const auto gn = ops::NormKind::kGroup;
  g.layers.push_back(LayerSpec::conv(3, 64, 7, 2, 3, true, gn, true));
  g.layers.push_back(LayerSpec::max_pool(3, 2, 1));
  g.layers.push_back(LayerSpec::fsm(64, shift_channels, variant));
  g.layers.push_back(LayerSpec::bottleneck(64, 256, 1, gn));
  g.layers.push_back(LayerSpec::fsm(256, shift_channels, variant));
  g.layers.push_back(LayerSpec::bottleneck(256, 256, 1, gn));
  g.layers.push_back(LayerSpec::fsm(256, shift_channels, variant));
  g.layers.push_back(LayerSpec::bottleneck(256, 256, 1, gn));
  g.layers.push_back(LayerSpec::conv(256, 256, 1, 1, 0, true, gn, true));
  g.layers.push_back(LayerSpec::conv(256, keypoints, 3, 1, 1, true, ops::NormKind::kBatch, false));
  g.validate();
  return g;
}

NetworkGraph build_resnet50_fsm(int height, int width, int shift_channels, int keypoints) {
  NetworkGraph g;
  g.input = {3, height, width};
  g.keypoints = keypoints;
  g.paper_placement = true;
  const auto gn = ops::NormKind::kGroup;
  g.layers.push_back(LayerSpec::conv(3, 64, 7, 2, 3, true, gn, true));
  g.layers.push_back(LayerSpec::max_pool(3, 2, 1));
  const int blocks[4] = {3, 4, 6, 3};
  const int widths[4] = {256, 512, 1024, 2048};
  int channels = 64;
  bool first_fsm = true;
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < blocks[s]; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      const bool after_downsample = s > 0 && b == 1;
      if (!after_downsample) {
        g.layers.push_back(LayerSpec::fsm(channels, first_fsm ? shift_channels / 2 : shift_channels,
                                          fsm::CaVariant::kSoftplusNormalized));
        first_fsm = false;
      }
      g.layers.push_back(LayerSpec::bottleneck(channels, widths[s], stride, gn));
      channels = widths[s];
    }
  }
  g.layers.push_back(LayerSpec::conv(channels, keypoints, 1, 1, 0, false, gn, false, true));
  g.validate();
  return g;
}

NetworkGraph build_toy_net(const ToyNetOptions& o) {
  NetworkGraph g;
  g.input = {o.input_channels, o.height, o.width};
  g.keypoints = o.keypoints;
  const auto gn = ops::NormKind::kGroup;
  const int c = o.width_channels;
  g.layers.push_back(LayerSpec::conv(o.input_channels, c, o.stem_kernel, o.stem_stride, o.stem_kernel / 2, true, gn,
                                     true));
  for (int i = 0; i < o.fsm_count; ++i) {
    g.layers.push_back(LayerSpec::fsm(c, o.shift_channels, o.variant));
    g.layers.push_back(LayerSpec::conv(c, c, 1, 1, 0, true, gn, true));
  }
  g.layers.push_back(LayerSpec::conv(c, o.keypoints, 1, 1, 0, false, gn, false, true));
  g.validate();
  return g;
}

NetworkGraph attach_esp(const NetworkGraph& graph, int after_layer, int keypoints) {
  if (after_layer < 0 || after_layer >= static_cast<int>(graph.layers.size())) {
    throw ConfigError("attach_esp: unknown layer id " + std::to_string(after_layer));
  }
  NetworkGraph g = graph;
  g.esp_heads.push_back({after_layer, keypoints});
  g.validate();
  return g;
}

FlopReport count_flops(const NetworkGraph& graph, FlopConvention convention) {
  graph.validate();
  const std::int64_t per_mac = convention == FlopConvention::kTwoPerMac ? 2 : 1;
  const auto shapes = graph.infer_shapes();
  FlopReport r;
  auto mac = [&](std::int64_t n) {
    r.mac_ops += per_mac * n;
    return per_mac * n;
  };
  auto elem = [&](std::int64_t n) {
    r.elementwise += n;
    return n;
  };
  MapShape cur = graph.input;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    const MapShape out = shapes[i];
    const std::int64_t hw = std::int64_t(out.height) * out.width;
    std::int64_t f = 0;
    switch (l.kind) {
      case LayerKind::kConv:
        f += mac(std::int64_t(l.out_channels) * l.in_channels * l.geom.kernel * l.geom.kernel * hw);
        if (l.bias) f += elem(l.out_channels * hw);
        if (l.has_norm) f += elem(2 * l.out_channels * hw);
        if (l.relu) f += elem(2 * l.out_channels * hw);
        break;
      case LayerKind::kMaxPool:
        f += elem(std::int64_t(l.geom.kernel) * l.geom.kernel * out.channels * hw);
        break;
      case LayerKind::kFsm: {
        const std::int64_t c = l.in_channels, k = l.shift_channels;
        f += mac(3 * k * c * hw);    // w_alpha, w_f, w_beta
        f += elem(7 * k * hw);       // bilinear shift: 4 mul + 3 add
        f += elem(2 * k * hw);       // attention activation
        if (l.ca_variant == fsm::CaVariant::kSoftplusNormalized) f += elem(2 * k * hw);  // sum + divide
        f += elem(k * hw);           // gating multiply
        f += elem(c * hw);           // residual add
        f += elem(2 * c * hw);       // batch-norm
        f += elem(2 * c * hw);       // relu
        break;
      }
      case LayerKind::kBottleneck: {
        const std::int64_t in_hw = hw;  // 1x1 reduce runs before the stride in the 3x3
        const std::int64_t pre_hw = std::int64_t(cur.height) * cur.width;
        const std::int64_t mid = l.mid_channels;
        f += mac(mid * l.in_channels * pre_hw);
        f += elem(4 * mid * pre_hw);
        f += mac(mid * mid * 9 * in_hw);
        f += elem(4 * mid * in_hw);
        f += mac(std::int64_t(l.out_channels) * mid * in_hw);
        f += elem(2 * l.out_channels * in_hw);
        if (projection_needed(l)) {
          f += mac(std::int64_t(l.out_channels) * l.in_channels * in_hw);
          f += elem(2 * l.out_channels * in_hw);
        }
        f += elem(l.out_channels * in_hw);      // residual add
        f += elem(2 * l.out_channels * in_hw);  // relu
        break;
      }
    }
    r.per_layer.push_back(f);
    r.total += f;
    cur = out;
  }
  for (const HeadSpec& h : graph.esp_heads) {
    const MapShape s = shapes[static_cast<std::size_t>(h.after_layer)];
    const std::int64_t hw = std::int64_t(s.height) * s.width;
    std::int64_t f = mac(std::int64_t(h.keypoints) * s.channels * hw) + elem(h.keypoints * hw);
    r.per_layer.push_back(f);
    r.total += f;
  }
  return r;
}

}  // namespace ssn
