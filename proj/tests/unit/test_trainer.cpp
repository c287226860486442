#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "ssn/trainer.hpp"

using namespace ssn;

namespace {

SynthSpec small_spec(std::uint64_t seed, int count = 64) {
  SynthSpec s;
  s.image_size = 16;
  s.displacement_x = 6;
  s.displacement_y = 0;
  s.distractors = 1;
  s.min_separation = 4;
  s.margin = 2;
  s.count = count;
  s.seed = seed;
  return s;
}

NetworkGraph small_net(int fsm_count = 1) {
  ToyNetOptions o;
  o.height = o.width = 16;
  o.width_channels = 8;
  o.shift_channels = 4;
  o.fsm_count = fsm_count;
  return build_toy_net(o);
}

TrainConfig small_train(std::uint64_t seed) {
  TrainConfig c;
  c.batch_size = 8;
  c.base_lr = 2e-3;
  c.offset_lr = 0.02;
  c.insertion_iteration = 5;
  c.seed = seed;
  return c;
}

std::vector<std::vector<float>> fsm_values(Model<float>& m) {
  std::vector<std::vector<float>> out;
  for (int id : m.graph().fsm_layers()) {
    for (auto* p : m.fsm_layer(id).params.parameters()) out.push_back(p->value);
    for (auto* p : m.fsm_layer(id).params.buffers()) out.push_back(p->value);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic data.

TEST(Synth, LocalDetectorIsPerfectWithoutDistractors) {
  SynthSpec s;
  s.distractors = 0;
  s.count = 64;
  EXPECT_EQ(matched_filter_accuracy(SynthDataset(s)), 1.0);
}

TEST(Synth, LocalDetectorIsNearChanceWithDistractors) {
  for (int d : {2, 3}) {
    SynthSpec s;
    s.distractors = d;
    s.count = 400;
    s.seed = 17;
    EXPECT_LE(matched_filter_accuracy(SynthDataset(s)), 1.0 / (1 + d) + 0.1) << d;
  }
}

TEST(Synth, SameSeedIsBitIdentical) {
  SynthSpec s;
  s.noise_std = 0.1;
  s.count = 8;
  SynthDataset a(s), b(s);
  for (int i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.storage(), b[i].image.storage());
    EXPECT_EQ(a[i].keypoints, b[i].keypoints);
  }
  s.seed = 1;
  EXPECT_NE(SynthDataset(s)[0].image.storage(), a[0].image.storage());
}

TEST(Synth, TargetSitsAtDisplacementFromCue) {
  SynthSpec s;
  s.displacement_x = 7;
  s.displacement_y = -4;
  s.count = 20;
  SynthDataset d(s);
  for (int i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d[i].keypoints[0].x - d[i].cue.x, 7);
    EXPECT_EQ(d[i].keypoints[0].y - d[i].cue.y, -4);
    EXPECT_EQ(int(d[i].distractor_positions.size()), s.distractors);
  }
}

TEST(Synth, InfeasiblePlacementThrows) {
  SynthSpec s;
  s.image_size = 8;
  s.displacement_x = 3;
  s.distractors = 6;
  s.min_separation = 4;
  s.margin = 1;
  s.count = 1;
  EXPECT_THROW(SynthDataset{s}, Error);
}

TEST(Heatmap, PeakAtKeypointCell) {
  auto h = heatmap_target({{3, 4}}, 8, 8, 1.0);
  EXPECT_EQ(h(0, 0, 4, 3), 1.0);
  EXPECT_LT(h(0, 0, 4, 4), 1.0);
}

TEST(Heatmap, DecodeRoundTripsToNearestCell) {
  auto h = heatmap_target({{3.4, 4.6}, {0.2, 6.9}}, 8, 8, 1.5);
  auto k = decode_heatmap(h);
  EXPECT_EQ(k[0], (Point{3, 5}));
  EXPECT_EQ(k[1], (Point{0, 7}));
}

TEST(Heatmap, TieBreakPrefersLowestRowThenColumn) {
  Tensor4<double> m({1, 1, 4, 6});
  m(0, 0, 2, 0) = 1;
  m(0, 0, 1, 5) = 1;
  m(0, 0, 1, 4) = 1;
  EXPECT_EQ(decode_heatmap(m)[0], (Point{4, 1}));
}

TEST(Augment, IdentityDrawLeavesSample) {
  SynthSpec s;
  s.count = 1;
  auto smp = SynthDataset::generate(s, 0);
  auto out = apply_affine(smp, AffineDraw{}, s.heatmap_sigma);
  for (std::size_t i = 0; i < smp.image.size(); ++i) EXPECT_NEAR(out.image[i], smp.image[i], 1e-6);
  EXPECT_EQ(out.keypoints, smp.keypoints);
  for (std::size_t i = 0; i < smp.target_heatmaps.size(); ++i) {
    EXPECT_NEAR(out.target_heatmaps[i], smp.target_heatmaps[i], 1e-12);
  }
}

TEST(Augment, TranslationMovesKeypointsExactly) {
  SynthSpec s;
  auto smp = SynthDataset::generate(s, 3);
  AffineDraw a;
  a.shift_x = 0.05 * s.image_size;
  auto out = apply_affine(smp, a, s.heatmap_sigma);
  EXPECT_EQ(out.keypoints[0].x, smp.keypoints[0].x + 0.05 * s.image_size);
  EXPECT_EQ(out.keypoints[0].y, smp.keypoints[0].y);
}

TEST(Augment, RotationInverseOnPoints) {
  AffineDraw fwd{30, 1, 0, 0}, back{-30, 1, 0, 0};
  const Point p{3.25, -7.5};
  const Point q = back.apply(fwd.apply(p, 16, 16), 16, 16);
  EXPECT_NEAR(q.x, p.x, 1e-9);
  EXPECT_NEAR(q.y, p.y, 1e-9);
  AffineDraw any{17, 1.2, 0.7, -1.1};
  const Point r = any.invert(any.apply(p, 10, 12), 10, 12);
  EXPECT_NEAR(r.x, p.x, 1e-9);
  EXPECT_NEAR(r.y, p.y, 1e-9);
}

TEST(Augment, DrawsStayInRange) {
  std::mt19937_64 rng(4);
  AugmentRanges r;
  for (int i = 0; i < 500; ++i) {
    auto a = draw_affine(r, 32, 32, rng);
    EXPECT_LE(std::abs(a.rotation_deg), 30);
    EXPECT_GE(a.scale, 0.75);
    EXPECT_LE(a.scale, 1.25);
    EXPECT_LE(std::abs(a.shift_x), 0.05 * 32);
    EXPECT_LE(std::abs(a.shift_y), 0.05 * 32);
  }
}

// ---------------------------------------------------------------------------
// Schedules.

TEST(Schedule, OffsetLrPerEpoch) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(offset_lr_schedule(0, c), 1e-3);
  EXPECT_DOUBLE_EQ(offset_lr_schedule(1, c), 1e-3 * 0.9);
  EXPECT_NEAR(offset_lr_schedule(10, c), 3.487e-4, 1e-7);
  EXPECT_EQ(offset_lr_schedule(10, c), c.offset_lr * std::pow(0.9, 10.0));
  EXPECT_THROW(offset_lr_schedule(-1, c), ArgumentError);
}

TEST(Schedule, BaseLrHalvesAtDecayPoints) {
  TrainConfig c;
  c.lr_decay = {100, 0.5, 50};
  EXPECT_EQ(base_lr_schedule(0, c), 5e-4);
  EXPECT_EQ(base_lr_schedule(99, c), 5e-4);
  EXPECT_EQ(base_lr_schedule(100, c), 2.5e-4);
  EXPECT_EQ(base_lr_schedule(149, c), 2.5e-4);
  EXPECT_EQ(base_lr_schedule(150, c), 1.25e-4);
  c.lr_decay.every = 0;
  EXPECT_EQ(base_lr_schedule(100000, c), 5e-4);
}

TEST(Schedule, ConfigValidationNamesField) {
  TrainConfig c;
  c.offset_decay_per_epoch = 1.5;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.offset_decay_per_epoch"), std::string::npos);
  }
  TrainConfig d;
  d.base_lr = 0;
  EXPECT_THROW(d.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Trainer.

TEST(TrainerTest, OutputShapeMustMatchTargets) {
  auto data = std::make_shared<const SynthDataset>(small_spec(1, 8));
  EXPECT_THROW(Trainer(build_toy_net({}), small_train(1), data), ConfigError);
}

TEST(TrainerTest, BypassMatchesFsmFreeGraph) {
  auto g = small_net(2);
  Model<float> with(g, 5, /*fsm_bypass=*/true);
  NetworkGraph stripped = g;
  std::map<int, int> remap;
  stripped.layers.clear();
  for (int i = 0; i < int(g.layers.size()); ++i) {
    if (g.layers[i].kind == LayerKind::kFsm) continue;
    remap[int(stripped.layers.size())] = i;
    stripped.layers.push_back(g.layers[i]);
  }
  Model<float> without(stripped, 99);
  for (auto* p : without.all_params()) {
    const auto dot = p->name.find('.');
    const int idx = std::stoi(p->name.substr(1, dot - 1));
    auto* src = with.find_param(layer_prefix(remap.at(idx)) + p->name.substr(dot));
    ASSERT_NE(src, nullptr) << p->name;
    p->value = src->value;
  }
  SynthDataset d(small_spec(3, 4));
  Tensor4<float> x, t;
  stack_batch({d[0], d[1], d[2], d[3]}, x, t);
  EXPECT_EQ(with.predict(x).storage(), without.predict(x).storage());
}

TEST(TrainerTest, FsmParamsFrozenBeforeInsertionThenDeadBranch) {
  auto data = std::make_shared<const SynthDataset>(small_spec(2));
  Trainer t(small_net(), small_train(2), data);
  const auto before = fsm_values(t.model());
  for (int i = 0; i < 5; ++i) t.step();
  EXPECT_FALSE(t.inserted());
  EXPECT_EQ(fsm_values(t.model()), before);

  t.insert_fsms();
  EXPECT_THROW(t.insert_fsms(), StateError);
  const int id = t.model().graph().fsm_layers()[0];
  auto& fp = t.model().fsm_layer(id).params;
  for (float v : fp.w_beta.value) EXPECT_EQ(v, 0.0f);
  for (float v : fp.dx.value) EXPECT_LE(std::abs(v), t.config().offset_init_range);
  EXPECT_GE(t.optimizer().find_group("fsm"), 0);
  EXPECT_GE(t.optimizer().find_group("offsets"), 0);

  // Dead branch: Q = relu(bn(P)).
  Tensor4<float> x, tg;
  stack_batch({(*data)[0]}, x, tg);
  Tape<float> tape;
  auto r = t.model().forward(tape, x, false);
  const auto& taps = r.fsm_taps.at(id);
  for (float v : tape.value(taps.non_local).values()) EXPECT_EQ(v, 0.0f);
  auto p = tape.value(taps.input);
  std::vector<float> rm = fp.branch_norm.running_mean.value, rv = fp.branch_norm.running_var.value;
  auto want = ops::activation_forward(
      ops::batch_norm_forward<float>(p, fp.branch_norm.scale.value, fp.branch_norm.offset.value, rm, rv, false, nullptr),
      ops::Activation::kRelu);
  EXPECT_EQ(tape.value(taps.output).storage(), want.storage());
}

TEST(TrainerTest, OffsetsGetGradientSoonAfterInsertion) {
  auto data = std::make_shared<const SynthDataset>(small_spec(4));
  Trainer t(small_net(), small_train(4), data);
  const int id = t.model().graph().fsm_layers()[0];
  bool nonzero = false;
  for (int i = 0; i < 15 && !nonzero; ++i) {
    t.step();
    if (!t.inserted()) continue;
    for (float g : t.model().fsm_layer(id).params.dx.grad) nonzero = nonzero || g != 0.0f;
  }
  EXPECT_TRUE(nonzero);
  EXPECT_LE(t.iteration(), 15);
}

TEST(TrainerTest, OffsetsStayClamped) {
  auto data = std::make_shared<const SynthDataset>(small_spec(5));
  auto cfg = small_train(5);
  cfg.insertion_iteration = 0;
  cfg.offset_lr = 50;
  Trainer t(small_net(), cfg, data);
  for (int i = 0; i < 5; ++i) t.step();
  auto& f = t.model().fsm_layer(t.model().graph().fsm_layers()[0]);
  const float limit = float(std::max(f.map_height, f.map_width));
  for (float v : f.params.dx.value) EXPECT_LE(std::abs(v), limit);
  for (float v : f.params.dy.value) EXPECT_LE(std::abs(v), limit);
}

TEST(TrainerTest, DeterministicRuns) {
  auto data = std::make_shared<const SynthDataset>(small_spec(6));
  Trainer a(small_net(), small_train(6), data), b(small_net(), small_train(6), data);
  for (int i = 0; i < 12; ++i) EXPECT_EQ(a.step().loss_main, b.step().loss_main);
  for (auto* p : a.model().all_params()) EXPECT_EQ(p->value, b.model().find_param(p->name)->value);
}

TEST(TrainerTest, EpochsAndBatchesCoverDataset) {
  auto data = std::make_shared<const SynthDataset>(small_spec(7, 32));
  Trainer t(small_net(), small_train(7), data);
  EXPECT_EQ(t.epoch_of(3), 0);
  EXPECT_EQ(t.epoch_of(4), 1);
  std::vector<int> seen;
  for (long it = 0; it < 4; ++it) {
    auto idx = t.batch_indices(it);
    seen.insert(seen.end(), idx.begin(), idx.end());
  }
  std::sort(seen.begin(), seen.end());
  for (int i = 0; i < 32; ++i) EXPECT_EQ(seen[i], i);
}

TEST(TrainerTest, NonFiniteLossNamesLayer) {
  auto data = std::make_shared<const SynthDataset>(small_spec(8));
  Trainer t(small_net(), small_train(8), data);
  t.model().find_param(layer_prefix(2) + ".weight")->value[0] = std::nanf("");
  try {
    t.step();
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("L2 (conv)"), std::string::npos) << e.what();
  }
}

TEST(TrainerTest, MetricsAndSnapshots) {
  auto data = std::make_shared<const SynthDataset>(small_spec(9, 16));
  Trainer t(attach_esp(small_net(), 0, 1), small_train(9), data);
  const auto dir = std::filesystem::temp_directory_path() / "ssn_trainer_snapshots";
  std::filesystem::remove_all(dir);
  std::ostringstream os;
  write_metrics_header(os, 1);
  run_training(t, 6, &os, dir);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "iteration,loss_main,loss_esp0,base_lr,offset_lr");
  int rows = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4);
    ++rows;
  }
  EXPECT_EQ(rows, 6);
  for (int e = 0; e < 3; ++e) EXPECT_TRUE(std::filesystem::exists(dir / ("offsets_epoch" + std::to_string(e) + ".csv")));
  std::filesystem::remove_all(dir);
}

TEST(TrainerTest, EspRaisesEarlyGradientAtFirstStep) {
  auto data = std::make_shared<const SynthDataset>(small_spec(10));
  auto cfg = small_train(10);
  cfg.augment = false;
  auto norm_after_step = [&](NetworkGraph g) {
    Trainer t(g, cfg, data);
    t.step();
    double s = 0;
    for (float v : t.model().find_param(layer_prefix(0) + ".weight")->grad) s += double(v) * v;
    return std::sqrt(s);
  };
  EXPECT_GT(norm_after_step(attach_esp(small_net(), 0, 1)), norm_after_step(small_net()));
}

TEST(TrainerTest, DescentSmokeTest) {
  // Full-length descent check on a reduced network: 2000 iterations, 10 seeds.
  const auto start = std::chrono::steady_clock::now();
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto data = std::make_shared<const SynthDataset>(small_spec(seed, 64));
    auto cfg = small_train(seed);
    cfg.batch_size = 4;
    cfg.insertion_iteration = 100;
    Trainer t(small_net(), cfg, data);
    const double initial = t.evaluate(*data);
    run_training(t, 2000, nullptr);
    const double final_loss = t.evaluate(*data);
    if (final_loss < initial) ++wins;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  RecordProperty("seconds", std::to_string(secs));
  EXPECT_EQ(wins, 10);
}
