// ssn: train, evaluate and inspect feature-shifting networks.
//
// Exit status: 0 success, 1 runtime/check failure, 2 bad configuration or
// arguments, 3 numeric divergence during training. Errors are reported as one
// line on stderr: "error: <kind>: <message>".

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssn/analysis.hpp"
#include "ssn/checkpoint.hpp"
#include "ssn/config.hpp"
#include "ssn/error.hpp"
#include "ssn/network.hpp"
#include "ssn/synth.hpp"
#include "ssn/trainer.hpp"
#include "ssn/verify.hpp"

namespace fs = std::filesystem;
using namespace ssn;

namespace {

constexpr const char* kOutputEnv = "SSN_OUTPUT_DIR";

struct CheckFailed : Error {
  using Error::Error;
};

fs::path output_dir(const std::string& flag) {
  fs::path dir = flag;
  if (dir.empty()) {
    const char* env = std::getenv(kOutputEnv);
    dir = env && *env ? fs::path(env) : fs::path(".");
  }
  fs::create_directories(dir);
  return dir;
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void atomic_write(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os << text;
    if (!os) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : RunConfig::load(path); }

RunConfig config_from_checkpoint(const CheckpointState& s, const std::string& override_path) {
  if (!override_path.empty()) return RunConfig::load(override_path);
  if (s.metadata.empty()) throw ConfigError("<root>: checkpoint carries no run config; pass --config");
  return RunConfig::from_json(s.metadata);
}

std::unique_ptr<Model<float>> model_from_checkpoint(const CheckpointState& s) {
  auto m = std::make_unique<Model<float>>(s.graph, 0, /*fsm_bypass=*/true);
  load_model_params(*m, s);
  return m;
}

// Batch of the first `n` evaluation samples.
Tensor4<float> eval_batch(const RunConfig& c, int n) {
  SynthSpec spec = c.data.eval_spec();
  spec.count = std::min(spec.count, n);
  SynthDataset data(spec);
  std::vector<SynthSample> samples;
  for (int i = 0; i < data.size(); ++i) samples.push_back(data[i]);
  Tensor4<float> images, targets;
  stack_batch(samples, images, targets);
  return images;
}

int resolve_module(Model<float>& m, int requested) {
  const auto ids = m.graph().fsm_layers();
  if (ids.empty()) throw ArgumentError("network has no FSM");
  return requested < 0 ? ids.front() : requested;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, out, resume;
  long iterations = -1;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  std::optional<CheckpointState> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    cfg = config_from_checkpoint(*resume, a.config);
  } else {
    cfg = config_or_default(a.config);
  }
  if (a.iterations >= 0) cfg.train.iterations = a.iterations;
  cfg.validate();
  const fs::path dir = output_dir(a.out);

  auto data = std::make_shared<SynthDataset>(cfg.data.train);
  NetworkGraph graph = resume ? resume->graph : cfg.network.build();
  Trainer trainer(graph, cfg.train, data);
  if (resume) restore_checkpoint(trainer, *resume);

  const fs::path metrics_path = dir / "metrics.csv";
  std::ofstream metrics(metrics_path, resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw Error("cannot write " + metrics_path.string());
  if (!resume) write_metrics_header(metrics, static_cast<int>(graph.esp_heads.size()));

  int status = 0;
  std::string diverged;
  try {
    run_training(trainer, cfg.train.iterations, &metrics, dir / "offsets");
  } catch (const DivergenceError& e) {
    diverged = e.what();
    status = 3;
  }
  metrics.flush();
  save_checkpoint(dir / "checkpoint.ssnc", capture_checkpoint(trainer, cfg.to_json()));
  if (status) throw DivergenceError(diverged);

  SynthDataset eval(cfg.data.eval_spec());
  const double loss = trainer.evaluate(eval);
  nlohmann::json summary = {{"iterations", trainer.iteration()},
                            {"final_eval_loss", fmt(loss)},
                            {"localization_accuracy", trainer.localization_accuracy(eval)}};
  atomic_write(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << "iterations " << trainer.iteration() << "\n";
  std::cout << "final_eval_loss " << fmt(loss) << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config) {
  const CheckpointState s = load_checkpoint(checkpoint);
  const RunConfig cfg = config_from_checkpoint(s, config);
  auto data = std::make_shared<SynthDataset>(cfg.data.train);
  Trainer t(s.graph, cfg.train, data);
  restore_checkpoint(t, s);
  SynthDataset eval(cfg.data.eval_spec());
  std::cout << "eval_loss " << fmt(t.evaluate(eval)) << "\n";
  std::cout << "localization_accuracy " << fmt(t.localization_accuracy(eval)) << "\n";
  return 0;
}

int cmd_synth(const std::string& config, const std::string& out) {
  const RunConfig cfg = config_or_default(config);
  const fs::path dir = output_dir(out);
  SynthDataset data(cfg.data.train);
  std::ostringstream csv;
  csv << "index,keypoint_x,keypoint_y,cue_x,cue_y,distractors\n";
  std::ofstream images(dir / "images.f32", std::ios::binary | std::ios::trunc);
  for (int i = 0; i < data.size(); ++i) {
    const SynthSample& s = data[i];
    csv << i << ',' << fmt(s.keypoints[0].x) << ',' << fmt(s.keypoints[0].y) << ',' << fmt(s.cue.x) << ','
        << fmt(s.cue.y) << ',';
    for (std::size_t d = 0; d < s.distractor_positions.size(); ++d) {
      csv << (d ? ";" : "") << fmt(s.distractor_positions[d].x) << ' ' << fmt(s.distractor_positions[d].y);
    }
    csv << '\n';
    for (double v : s.image.values()) {
      const float f = static_cast<float>(v);
      images.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
  }
  if (!images) throw Error("cannot write " + (dir / "images.f32").string());
  atomic_write(dir / "samples.csv", csv.str());
  const auto& spec = data.spec();
  std::cout << "samples " << data.size() << " shape [" << spec.channels << "," << spec.image_size << ","
            << spec.image_size << "] float32 row-major\n";
  std::cout << "matched_filter_accuracy " << fmt(matched_filter_accuracy(data)) << "\n";
  return 0;
}

int cmd_gradcheck(int cases, std::uint64_t seed) {
  const auto r = run_gradcheck_suite(cases, seed);
  for (GradOp op : kAllGradOps) {
    double worst = 0;
    int n = 0;
    for (const auto& c : r.cases) {
      if (c.op != op) continue;
      worst = std::max(worst, c.report.max_rel_error);
      ++n;
    }
    if (n) std::cout << to_string(op) << " cases " << n << " max_rel_error " << fmt(worst) << "\n";
  }
  for (const auto& c : r.cases) {
    if (!c.report.pass) {
      std::cout << "failed " << to_string(c.op) << " seed " << c.seed << ": " << c.report.diagnostic << "\n";
    }
  }
  std::cout << "gradcheck " << (r.pass ? "pass" : "fail") << " cases " << r.cases.size() << " max_rel_error "
            << fmt(r.max_rel_error) << "\n";
  if (!r.pass) throw CheckFailed("gradcheck: max relative error " + fmt(r.max_rel_error) + " >= 1e-4");
  return 0;
}

int cmd_oracle(int cases, std::uint64_t seed) {
  const auto r = run_oracle_suite(cases, seed);
  std::cout << "oracle-check " << (r.pass ? "pass" : "fail") << " cases " << r.cases.size() << " max_rel_error "
            << fmt(r.max_rel_error) << "\n";
  if (!r.pass) throw CheckFailed("oracle-check: max relative error " + fmt(r.max_rel_error) + " >= 1e-6");
  return 0;
}

struct CountArgs {
  std::string config, network = "3block3fsm", ca = "sigmoid";
  int height = 256, width = 192, shift_channels = 256, keypoints = 17;
};

int cmd_count(const CountArgs& a) {
  NetworkGraph g;
  if (!a.config.empty()) {
    g = RunConfig::load(a.config).network.build();
  } else {
    NetworkConfig n;
    n.kind = a.network;
    n.height = a.height;
    n.width = a.width;
    n.shift_channels = a.shift_channels;
    n.keypoints = a.keypoints;
    n.ca_variant = a.ca;
    g = n.build();
  }
  const auto two = count_flops(g, FlopConvention::kTwoPerMac);
  const auto one = count_flops(g, FlopConvention::kOnePerMac);
  std::cout << "params " << g.count_params() << "\n";
  std::cout << "flops_two_per_mac " << two.total << "\n";
  std::cout << "flops_one_per_mac " << one.total << "\n";
  return 0;
}

struct AnalyzeArgs {
  std::string checkpoint, config, out;
  std::optional<int> module, channel, x, y;
  std::optional<double> threshold;
  bool layer_output = false;
  bool signed_scores = false;
};

AnalysisConfig merged(const RunConfig& cfg, const AnalyzeArgs& a) {
  AnalysisConfig o = cfg.analysis;
  if (a.module) o.module_id = *a.module;
  if (a.channel) o.channel = *a.channel;
  if (a.x) o.x = *a.x;
  if (a.y) o.y = *a.y;
  if (a.threshold) o.threshold = *a.threshold;
  if (a.signed_scores) o.signed_scores = true;
  return o;
}

int cmd_analyze_offsets(const AnalyzeArgs& a) {
  const CheckpointState s = load_checkpoint(a.checkpoint);
  const RunConfig cfg = config_from_checkpoint(s, a.config);
  const AnalysisConfig o = merged(cfg, a);
  auto m = model_from_checkpoint(s);
  const fs::path dir = output_dir(a.out);
  std::ostringstream offsets;
  fsm::write_offsets_csv(offsets, model_offset_rows(*m));
  atomic_write(dir / "offsets.csv", offsets.str());
  const int module = resolve_module(*m, o.module_id);
  if (m->fsm_layer(module).state == FsmState::kActive) {
    std::ostringstream energy;
    analysis::write_window_energy_csv(energy,
                                      analysis::window_energy_table(*m, eval_batch(cfg, 1), module, o.channel, o.x, o.y));
    atomic_write(dir / "window_energy.csv", energy.str());
  }
  std::cout << "wrote " << (dir / "offsets.csv").string() << "\n";
  return 0;
}

int cmd_analyze_erf(const AnalyzeArgs& a) {
  const CheckpointState s = load_checkpoint(a.checkpoint);
  const RunConfig cfg = config_from_checkpoint(s, a.config);
  const AnalysisConfig o = merged(cfg, a);
  auto m = model_from_checkpoint(s);
  analysis::ErfSeed seed;
  seed.layer = a.layer_output && o.module_id >= 0 ? o.module_id : resolve_module(*m, o.module_id);
  seed.channel = o.channel;
  seed.x = o.x;
  seed.y = o.y;
  seed.non_local = !a.layer_output;
  const auto e = analysis::erf_map(*m, eval_batch(cfg, 1), seed);
  const fs::path dir = output_dir(a.out);
  std::ostringstream csv;
  analysis::write_erf_csv(csv, e);
  atomic_write(dir / "erf.csv", csv.str());
  const auto [py, px] = e.peak();
  std::cout << "erf_peak x " << px << " y " << py << "\n";
  return 0;
}

int cmd_analyze_scores(const AnalyzeArgs& a) {
  const CheckpointState s = load_checkpoint(a.checkpoint);
  const RunConfig cfg = config_from_checkpoint(s, a.config);
  const AnalysisConfig o = merged(cfg, a);
  auto m = model_from_checkpoint(s);
  analysis::ScoreOptions so;
  so.absolute = !o.signed_scores;
  so.sum_normalization = o.sum_normalization;
  const auto scores = analysis::keypoint_offset_scores(*m, eval_batch(cfg, o.samples), resolve_module(*m, o.module_id), so);
  if (scores.degenerate) std::cerr << "warning: predictions are all zero; scores set to 0\n";
  const fs::path dir = output_dir(a.out);
  std::ostringstream csv;
  analysis::write_scores_csv(csv, scores);
  atomic_write(dir / "kp_scores.csv", csv.str());
  const auto counts = analysis::contribution_counts(scores, o.threshold);
  for (std::size_t mi = 0; mi < counts.size(); ++mi) {
    std::cout << "keypoint " << mi << " channels_above_threshold " << counts[mi] << "\n";
  }
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

int fail(const char* kind, const std::string& msg, int code) {
  std::cerr << "error: " << kind << ": " << one_line(msg) << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-shifting network toolkit"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train on the synthetic task; writes metrics, checkpoint and snapshots");
  c_train->add_option("--config", train.config, "Run config (JSON)");
  c_train->add_option("--out", train.out, std::string("Output directory (default $") + kOutputEnv + " or .)");
  c_train->add_option("--resume", train.resume, "Continue from a checkpoint");
  c_train->add_option("--iterations", train.iterations, "Override train.iterations");

  std::string eval_ckpt, eval_cfg;
  auto* c_eval = app.add_subcommand("eval", "Evaluation loss of a checkpoint");
  c_eval->add_option("--checkpoint", eval_ckpt)->required();
  c_eval->add_option("--config", eval_cfg, "Override the config stored in the checkpoint");

  std::string synth_cfg, synth_out;
  auto* c_synth = app.add_subcommand("synth", "Emit the synthetic dataset");
  c_synth->add_option("--config", synth_cfg);
  c_synth->add_option("--out", synth_out);

  int gc_cases = 100;
  std::uint64_t gc_seed = 1;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  c_grad->add_option("--cases", gc_cases)->check(CLI::PositiveNumber);
  c_grad->add_option("--seed", gc_seed);

  int oc_cases = 20;
  std::uint64_t oc_seed = 1;
  auto* c_oracle = app.add_subcommand("oracle-check", "FSM forward vs the induced-convolution oracle");
  c_oracle->add_option("--cases", oc_cases)->check(CLI::PositiveNumber);
  c_oracle->add_option("--seed", oc_seed);

  CountArgs count;
  auto* c_count = app.add_subcommand("count", "Parameter and FLOP totals");
  c_count->add_option("--config", count.config, "Take the network from a run config");
  c_count->add_option("--network", count.network)->check(CLI::IsMember({"toy", "3block3fsm", "resnet50"}));
  c_count->add_option("--height", count.height);
  c_count->add_option("--width", count.width);
  c_count->add_option("--shift-channels", count.shift_channels);
  c_count->add_option("--keypoints", count.keypoints);
  c_count->add_option("--ca-variant", count.ca);

  AnalyzeArgs an;
  auto* c_an = app.add_subcommand("analyze", "Offset export, effective receptive fields, keypoint-offset scores");
  c_an->require_subcommand(1);
  auto add_common = [&](CLI::App* c) {
    c->add_option("--checkpoint", an.checkpoint)->required();
    c->add_option("--config", an.config);
    c->add_option("--out", an.out);
    c->add_option("--module", an.module, "FSM layer id (default: first FSM)");
  };
  auto* c_off = c_an->add_subcommand("offsets", "Offsets and window energies as CSV");
  add_common(c_off);
  c_off->add_option("--channel", an.channel);
  c_off->add_option("--x", an.x);
  c_off->add_option("--y", an.y);
  auto* c_erf = c_an->add_subcommand("erf", "Effective receptive field of one non-local map position");
  add_common(c_erf);
  c_erf->add_option("--channel", an.channel);
  c_erf->add_option("--x", an.x);
  c_erf->add_option("--y", an.y);
  c_erf->add_flag("--layer-output", an.layer_output, "Seed the layer output instead of the non-local map");
  auto* c_kp = c_an->add_subcommand("kp-scores", "Keypoint-offset contribution scores");
  add_common(c_kp);
  c_kp->add_option("--threshold", an.threshold);
  c_kp->add_flag("--signed", an.signed_scores, "Average signed gradients instead of magnitudes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (*c_train) return cmd_train(train);
    if (*c_eval) return cmd_eval(eval_ckpt, eval_cfg);
    if (*c_synth) return cmd_synth(synth_cfg, synth_out);
    if (*c_grad) return cmd_gradcheck(gc_cases, gc_seed);
    if (*c_oracle) return cmd_oracle(oc_cases, oc_seed);
    if (*c_count) return cmd_count(count);
    if (*c_off) return cmd_analyze_offsets(an);
    if (*c_erf) return cmd_analyze_erf(an);
    if (*c_kp) return cmd_analyze_scores(an);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const DivergenceError& e) {
    return fail("divergence", e.what(), 3);
  } catch (const CheckFailed& e) {
    return fail("check", e.what(), 1);
  } catch (const FormatError& e) {
    return fail("format", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}
