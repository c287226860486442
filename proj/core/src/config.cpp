#include "ssn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ssn/error.hpp"

namespace ssn {

using nlohmann::json;

namespace {

// Walks one JSON object, reading known keys and rejecting the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError(path(key) + ": expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError(path(key) + ": expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_integer() && it->get<long long>() < 0 && !it->is_number_unsigned()) {
            throw ConfigError(path(key) + ": expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError(path(key) + ": expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError(path(key) + ": expected a string");
      }
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  Section child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    static const json empty = json::object();
    return Section(it == j_.end() ? empty : *it, path(key));
  }

  bool has(const char* key) const { return j_.contains(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path(it.key().c_str()) + ": unknown key");
    }
  }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "<root>" : path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_synth(Section& s, SynthSpec& d) {
  s.get("image_size", d.image_size);
  s.get("channels", d.channels);
  s.get("displacement_x", d.displacement_x);
  s.get("displacement_y", d.displacement_y);
  s.get("blob_sigma", d.blob_sigma);
  s.get("cue_sigma", d.cue_sigma);
  s.get("distractors", d.distractors);
  s.get("noise_std", d.noise_std);
  s.get("count", d.count);
  s.get("seed", d.seed);
  s.get("heatmap_stride", d.heatmap_stride);
  s.get("heatmap_sigma", d.heatmap_sigma);
  s.get("min_separation", d.min_separation);
  s.get("margin", d.margin);
}

}  // namespace

RunConfig RunConfig::from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("<root>: invalid JSON: ") + e.what());
  }
  RunConfig c;
  Section top(root, "");

  Section n = top.child("network");
  n.get("kind", c.network.kind);
  n.get("height", c.network.height);
  n.get("width", c.network.width);
  n.get("input_channels", c.network.input_channels);
  n.get("keypoints", c.network.keypoints);
  n.get("shift_channels", c.network.shift_channels);
  n.get("ca_variant", c.network.ca_variant);
  n.get("width_channels", c.network.width_channels);
  n.get("fsm_count", c.network.fsm_count);
  n.get("stem_kernel", c.network.stem_kernel);
  n.get("stem_stride", c.network.stem_stride);
  n.get("esp_after", c.network.esp_after);
  n.finish();

  Section d = top.child("data");
  Section dt = d.child("train");
  read_synth(dt, c.data.train);
  dt.finish();
  d.get("eval_count", c.data.eval_count);
  d.get("eval_seed", c.data.eval_seed);
  d.finish();

  Section t = top.child("train");
  TrainConfig& tc = c.train;
  t.get("base_lr", tc.base_lr);
  t.get("offset_lr", tc.offset_lr);
  t.get("offset_decay_per_epoch", tc.offset_decay_per_epoch);
  t.get("batch_size", tc.batch_size);
  t.get("iterations", tc.iterations);
  t.get("insertion_iteration", tc.insertion_iteration);
  t.get("fsm_enabled", tc.fsm_enabled);
  t.get("offset_init_range", tc.offset_init_range);
  Section lr = t.child("lr_decay");
  lr.get("after_iter", tc.lr_decay.after_iter);
  lr.get("factor", tc.lr_decay.factor);
  lr.get("every", tc.lr_decay.every);
  lr.finish();
  t.get("augment", tc.augment);
  Section aug = t.child("augmentation");
  aug.get("rotation_deg", tc.augmentation.rotation_deg);
  aug.get("scale_min", tc.augmentation.scale_min);
  aug.get("scale_max", tc.augmentation.scale_max);
  aug.get("shift_frac", tc.augmentation.shift_frac);
  aug.finish();
  t.get("heatmap_sigma", tc.heatmap_sigma);
  t.get("epoch_length", tc.epoch_length);
  t.get("seed", tc.seed);
  t.finish();

  Section a = top.child("analysis");
  a.get("module_id", c.analysis.module_id);
  a.get("channel", c.analysis.channel);
  a.get("x", c.analysis.x);
  a.get("y", c.analysis.y);
  a.get("threshold", c.analysis.threshold);
  a.get("signed_scores", c.analysis.signed_scores);
  a.get("sum_normalization", c.analysis.sum_normalization);
  a.get("samples", c.analysis.samples);
  a.finish();

  top.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("<root>: cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

std::string RunConfig::to_json() const {
  const SynthSpec& s = data.train;
  const TrainConfig& t = train;
  json j = {
      {"network",
       {{"kind", network.kind},
        {"height", network.height},
        {"width", network.width},
        {"input_channels", network.input_channels},
        {"keypoints", network.keypoints},
        {"shift_channels", network.shift_channels},
        {"ca_variant", network.ca_variant},
        {"width_channels", network.width_channels},
        {"fsm_count", network.fsm_count},
        {"stem_kernel", network.stem_kernel},
        {"stem_stride", network.stem_stride},
        {"esp_after", network.esp_after}}},
      {"data",
       {{"train",
         {{"image_size", s.image_size},
          {"channels", s.channels},
          {"displacement_x", s.displacement_x},
          {"displacement_y", s.displacement_y},
          {"blob_sigma", s.blob_sigma},
          {"cue_sigma", s.cue_sigma},
          {"distractors", s.distractors},
          {"noise_std", s.noise_std},
          {"count", s.count},
          {"seed", s.seed},
          {"heatmap_stride", s.heatmap_stride},
          {"heatmap_sigma", s.heatmap_sigma},
          {"min_separation", s.min_separation},
          {"margin", s.margin}}},
        {"eval_count", data.eval_count},
        {"eval_seed", data.eval_seed}}},
      {"train",
       {{"base_lr", t.base_lr},
        {"offset_lr", t.offset_lr},
        {"offset_decay_per_epoch", t.offset_decay_per_epoch},
        {"batch_size", t.batch_size},
        {"iterations", t.iterations},
        {"insertion_iteration", t.insertion_iteration},
        {"fsm_enabled", t.fsm_enabled},
        {"offset_init_range", t.offset_init_range},
        {"lr_decay", {{"after_iter", t.lr_decay.after_iter}, {"factor", t.lr_decay.factor}, {"every", t.lr_decay.every}}},
        {"augment", t.augment},
        {"augmentation",
         {{"rotation_deg", t.augmentation.rotation_deg},
          {"scale_min", t.augmentation.scale_min},
          {"scale_max", t.augmentation.scale_max},
          {"shift_frac", t.augmentation.shift_frac}}},
        {"heatmap_sigma", t.heatmap_sigma},
        {"epoch_length", t.epoch_length},
        {"seed", t.seed}}},
      {"analysis",
       {{"module_id", analysis.module_id},
        {"channel", analysis.channel},
        {"x", analysis.x},
        {"y", analysis.y},
        {"threshold", analysis.threshold},
        {"signed_scores", analysis.signed_scores},
        {"sum_normalization", analysis.sum_normalization},
        {"samples", analysis.samples}}},
  };
  return j.dump(2);
}

void RunConfig::validate() const {
  if (network.kind != "toy" && network.kind != "3block3fsm" && network.kind != "resnet50") {
    throw ConfigError("network.kind: expected toy, 3block3fsm or resnet50, got '" + network.kind + "'");
  }
  try {
    fsm::parse_ca_variant(network.ca_variant);
  } catch (const Error& e) {
    throw ConfigError(std::string("network.ca_variant: ") + e.what());
  }
  if (data.train.count < 1) throw ConfigError("data.train.count: must be >= 1");
  if (data.train.image_size < 4) throw ConfigError("data.train.image_size: must be >= 4");
  if (data.train.distractors < 0) throw ConfigError("data.train.distractors: must be >= 0");
  if (data.train.noise_std < 0) throw ConfigError("data.train.noise_std: must be >= 0");
  if (!(data.train.blob_sigma > 0)) throw ConfigError("data.train.blob_sigma: must be > 0");
  if (!(data.train.cue_sigma > 0)) throw ConfigError("data.train.cue_sigma: must be > 0");
  if (data.eval_count < 1) throw ConfigError("data.eval_count: must be >= 1");
  if (analysis.samples < 1) throw ConfigError("analysis.samples: must be >= 1");
  train.validate();
}

SynthSpec DataConfig::eval_spec() const {
  SynthSpec s = train;
  s.count = eval_count;
  s.seed = eval_seed;
  return s;
}

NetworkGraph NetworkConfig::build() const {
  const auto variant = fsm::parse_ca_variant(ca_variant);
  NetworkGraph g;
  if (kind == "toy") {
    ToyNetOptions o;
    o.input_channels = input_channels;
    o.height = height;
    o.width = width;
    o.width_channels = width_channels;
    o.shift_channels = shift_channels;
    o.fsm_count = fsm_count;
    o.stem_kernel = stem_kernel;
    o.stem_stride = stem_stride;
    o.keypoints = keypoints;
    o.variant = variant;
    g = build_toy_net(o);
  } else if (kind == "3block3fsm") {
    if (input_channels != 3) throw ConfigError("network.input_channels: 3block3fsm takes 3 input channels");
    g = build_3block3fsm(height, width, shift_channels, keypoints, variant);
  } else if (kind == "resnet50") {
    if (input_channels != 3) throw ConfigError("network.input_channels: resnet50 takes 3 input channels");
    g = build_resnet50_fsm(height, width, shift_channels, keypoints);
  } else {
    throw ConfigError("network.kind: unknown builder '" + kind + "'");
  }
  for (int after : esp_after) g = attach_esp(g, after, keypoints);
  return g;
}

}  // namespace ssn
