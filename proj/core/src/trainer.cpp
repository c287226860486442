#include "ssn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ssn/error.hpp"

namespace ssn {

void TrainConfig::validate() const {
  auto positive = [](double v, const char* key) {
    if (!(v > 0) || !std::isfinite(v)) throw ConfigError(std::string("train.") + key + ": must be > 0");
  };
  positive(base_lr, "base_lr");
  positive(offset_lr, "offset_lr");
  if (!(offset_decay_per_epoch > 0 && offset_decay_per_epoch < 1)) {
    throw ConfigError("train.offset_decay_per_epoch: must be in (0, 1)");
  }
  if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (iterations < 0) throw ConfigError("train.iterations: must be >= 0");
  if (insertion_iteration < 0) throw ConfigError("train.insertion_iteration: must be >= 0");
  positive(offset_init_range, "offset_init_range");
  if (lr_decay.every < 0) throw ConfigError("train.lr_decay.every: must be >= 0");
  if (lr_decay.after_iter < 0) throw ConfigError("train.lr_decay.after_iter: must be >= 0");
  positive(lr_decay.factor, "lr_decay.factor");
  if (augmentation.rotation_deg < 0) throw ConfigError("train.augmentation.rotation_deg: must be >= 0");
  if (!(augmentation.scale_min > 0) || augmentation.scale_max < augmentation.scale_min) {
    throw ConfigError("train.augmentation.scale: need 0 < min <= max");
  }
  if (augmentation.shift_frac < 0) throw ConfigError("train.augmentation.shift_frac: must be >= 0");
  positive(heatmap_sigma, "heatmap_sigma");
  if (epoch_length < 0) throw ConfigError("train.epoch_length: must be >= 0");
}

double base_lr_schedule(long iteration, const TrainConfig& c) {
  if (c.lr_decay.every <= 0 || iteration < c.lr_decay.after_iter) return c.base_lr;
  const long n = (iteration - c.lr_decay.after_iter) / c.lr_decay.every + 1;
  return c.base_lr * std::pow(c.lr_decay.factor, double(n));
}

double offset_lr_schedule(long epoch, const TrainConfig& c) {
  if (epoch < 0) throw ArgumentError("offset_lr_schedule: epoch must be >= 0");
  return c.offset_lr * std::pow(1.0 - c.offset_decay_per_epoch, double(epoch));
}

void stack_batch(const std::vector<SynthSample>& samples, Tensor4<float>& images, Tensor4<float>& targets) {
  if (samples.empty()) throw ArgumentError("stack_batch: empty batch");
  const Shape4 is = samples[0].image.shape(), ts = samples[0].target_heatmaps.shape();
  const int b = static_cast<int>(samples.size());
  images = Tensor4<float>(Shape4{b, is.channels, is.height, is.width});
  targets = Tensor4<float>(Shape4{b, ts.channels, ts.height, ts.width});
  for (int i = 0; i < b; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    std::copy(s.image.values().begin(), s.image.values().end(),
              images.values().begin() + static_cast<std::ptrdiff_t>(i * is.count()));
    std::copy(s.target_heatmaps.values().begin(), s.target_heatmaps.values().end(),
              targets.values().begin() + static_cast<std::ptrdiff_t>(i * ts.count()));
  }
}

namespace {

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

}  // namespace

Trainer::Trainer(NetworkGraph graph, TrainConfig config, std::shared_ptr<const SynthDataset> data)
    : config_(config), data_(std::move(data)), rng_(config.seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
  if (!data_ || data_->size() < 1) throw ConfigError("train: dataset is empty");
  const auto out = graph.output_shape();
  const SynthSample& s0 = (*data_)[0];
  if (out.channels != s0.target_heatmaps.channels() || out.height != s0.target_heatmaps.height() ||
      out.width != s0.target_heatmaps.width()) {
    throw ConfigError("train: network output " + std::to_string(out.channels) + "x" + std::to_string(out.height) +
                      "x" + std::to_string(out.width) + " does not match heatmap target " +
                      s0.target_heatmaps.shape().str());
  }
  model_ = Model<float>(std::move(graph), config_.seed, /*fsm_bypass=*/true);
  backbone_group_ = optimizer_.add_group("backbone", model_.backbone_params(), config_.base_lr);
}

long Trainer::epoch_of(long iteration) const {
  const long len = config_.epoch_length > 0 ? config_.epoch_length : data_->size();
  return iteration * config_.batch_size / len;
}

std::vector<int> Trainer::epoch_permutation(long epoch) const {
  if (epoch != cached_epoch_) {
    cached_perm_.resize(static_cast<std::size_t>(data_->size()));
    std::iota(cached_perm_.begin(), cached_perm_.end(), 0);
    auto rng = seeded(config_.seed, static_cast<std::uint64_t>(epoch), 0x5eed);
    std::shuffle(cached_perm_.begin(), cached_perm_.end(), rng);
    cached_epoch_ = epoch;
  }
  return cached_perm_;
}

std::vector<int> Trainer::batch_indices(long iteration) const {
  const long n = data_->size();
  std::vector<int> idx;
  for (int b = 0; b < config_.batch_size; ++b) {
    const long global = iteration * config_.batch_size + b;
    const auto perm = epoch_permutation(global / n);
    idx.push_back(perm[static_cast<std::size_t>(global % n)]);
  }
  return idx;
}

void Trainer::add_fsm_groups() {
  std::vector<Param<float>*> weights, offsets;
  for (int id : model_.graph().fsm_layers()) {
    auto& p = model_.fsm_layer(id).params;
    for (Param<float>* q : p.parameters()) (q == &p.dx || q == &p.dy ? offsets : weights).push_back(q);
  }
  if (weights.empty()) return;
  optimizer_.add_group("fsm", weights, base_lr_schedule(iteration_, config_));
  optimizer_.add_group("offsets", offsets, offset_lr_schedule(epoch(), config_));
}

void Trainer::insert_fsms() {
  if (inserted_) throw StateError("FSMs already inserted (iteration " + std::to_string(iteration_) + ")");
  for (int id : model_.graph().fsm_layers()) {
    auto& f = model_.fsm_layer(id);
    model_.set_fsm_state(id, FsmState::kActive);
    std::fill(f.params.w_beta.value.begin(), f.params.w_beta.value.end(), 0.0f);
    f.params.reset_offsets(rng_, config_.offset_init_range);
  }
  add_fsm_groups();
  inserted_ = true;
}

void Trainer::restore_inserted() {
  if (inserted_) throw StateError("FSMs already inserted");
  for (int id : model_.graph().fsm_layers()) model_.set_fsm_state(id, FsmState::kActive);
  add_fsm_groups();
  inserted_ = true;
}

StepRecord Trainer::step() {
  if (config_.fsm_enabled && !inserted_ && iteration_ >= config_.insertion_iteration) insert_fsms();

  const auto idx = batch_indices(iteration_);
  std::vector<SynthSample> samples;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const SynthSample& s = (*data_)[idx[b]];
    if (config_.augment) {
      auto rng = seeded(config_.seed, static_cast<std::uint64_t>(iteration_), b + 1);
      samples.push_back(augment_sample(s, config_.augmentation, config_.heatmap_sigma, rng));
    } else {
      samples.push_back(s);
    }
  }
  Tensor4<float> images, targets;
  stack_batch(samples, images, targets);

  model_.zero_grad();
  Tape<float> tape;
  auto r = model_.forward(tape, images, true);
  StepRecord rec;
  rec.iteration = iteration_;
  Var loss = ag::mse(tape, r.main, targets, "loss_main");
  rec.loss_main = tape.value(loss)[0];
  for (std::size_t j = 0; j < r.esp.size(); ++j) {
    Var l = ag::mse(tape, r.esp[j], targets, "loss_esp" + std::to_string(j));
    rec.loss_esp.push_back(tape.value(l)[0]);
    loss = ag::add(tape, loss, l, "loss_total");
  }
  if (!std::isfinite(tape.value(loss)[0])) {
    std::string where = "loss";
    if (!tape.value(r.input).all_finite()) where = "input";
    for (std::size_t i = 0; i < r.layer_outputs.size() && where == "loss"; ++i) {
      if (!tape.value(r.layer_outputs[i]).all_finite()) {
        where = layer_prefix(static_cast<int>(i)) + " (" + to_string(model_.graph().layers[i].kind) + ")";
      }
    }
    throw DivergenceError("non-finite loss at iteration " + std::to_string(iteration_) +
                          "; first non-finite layer output: " + where);
  }
  tape.backward(loss);

  rec.base_lr = base_lr_schedule(iteration_, config_);
  rec.offset_lr = offset_lr_schedule(epoch(), config_);
  optimizer_.set_lr(backbone_group_, rec.base_lr);
  if (int g = optimizer_.find_group("fsm"); g >= 0) optimizer_.set_lr(g, rec.base_lr);
  if (int g = optimizer_.find_group("offsets"); g >= 0) optimizer_.set_lr(g, rec.offset_lr);
  optimizer_.step();
  if (inserted_) {
    for (int id : model_.graph().fsm_layers()) {
      auto& f = model_.fsm_layer(id);
      f.params.clamp_offsets(float(std::max(f.map_height, f.map_width)));
    }
  }
  ++iteration_;
  return rec;
}

double Trainer::evaluate(const SynthDataset& data, int batch_size) {
  if (batch_size < 1) throw ArgumentError("evaluate: batch_size must be >= 1");
  double total = 0;
  long count = 0;
  for (int start = 0; start < data.size(); start += batch_size) {
    std::vector<SynthSample> samples;
    for (int i = start; i < std::min(data.size(), start + batch_size); ++i) samples.push_back(data[i]);
    Tensor4<float> images, targets;
    stack_batch(samples, images, targets);
    Tensor4<float> pred = model_.predict(images);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = double(pred[i]) - double(targets[i]);
      total += d * d;
    }
    count += static_cast<long>(pred.size());
  }
  return total / double(count);
}

double Trainer::localization_accuracy(const SynthDataset& data, double radius) {
  const double stride = data.spec().heatmap_stride;
  int hits = 0;
  for (int i = 0; i < data.size(); ++i) {
    std::vector<SynthSample> one{data[i]};
    Tensor4<float> images, targets;
    stack_batch(one, images, targets);
    const auto found = decode_heatmap(model_.predict(images));
    const Point k = data[i].keypoints[0];
    if (std::hypot(found[0].x - k.x / stride, found[0].y - k.y / stride) <= radius) ++hits;
  }
  return double(hits) / data.size();
}

std::vector<fsm::OffsetRow> model_offset_rows(Model<float>& m) {
  std::vector<fsm::OffsetRow> rows;
  for (int id : m.graph().fsm_layers()) {
    auto r = fsm::offset_rows(id, m.fsm_layer(id).params);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

void write_metrics_header(std::ostream& os, int esp_heads) {
  os << "iteration,loss_main";
  for (int j = 0; j < esp_heads; ++j) os << ",loss_esp" << j;
  os << ",base_lr,offset_lr\n";
}

void write_metrics_row(std::ostream& os, const StepRecord& r) {
  char buf[64];
  os << r.iteration;
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    os << buf;
  };
  put(r.loss_main);
  for (double v : r.loss_esp) put(v);
  put(r.base_lr);
  put(r.offset_lr);
  os << '\n';
}

void run_training(Trainer& t, long until, std::ostream* metrics, const std::filesystem::path& snapshot_dir) {
  while (t.iteration() < until) {
    const long before = t.epoch();
    StepRecord r = t.step();
    if (metrics) write_metrics_row(*metrics, r);
    if (!snapshot_dir.empty() && t.epoch() > before && !t.model().graph().fsm_layers().empty()) {
      std::filesystem::create_directories(snapshot_dir);
      const auto path = snapshot_dir / ("offsets_epoch" + std::to_string(before) + ".csv");
      std::ofstream os(path);
      if (!os) throw Error("cannot write " + path.string());
      fsm::write_offsets_csv(os, model_offset_rows(t.model()));
    }
  }
}

}  // namespace ssn
