#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssn/checkpoint.hpp"
#include "ssn/config.hpp"
#include "ssn/trainer.hpp"

using namespace ssn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("ssn_cli_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << s;
}

RunConfig small_config(std::uint64_t seed) {
  RunConfig c;
  c.network.height = c.network.width = 16;
  c.network.width_channels = 8;
  c.network.shift_channels = 4;
  c.network.fsm_count = 1;
  c.data.train.image_size = 16;
  c.data.train.displacement_x = 6;
  c.data.train.distractors = 1;
  c.data.train.min_separation = 4;
  c.data.train.margin = 2;
  c.data.train.count = 32;
  c.data.train.seed = seed;
  c.data.eval_count = 16;
  c.train.batch_size = 8;
  c.train.iterations = 12;
  c.train.insertion_iteration = 5;
  c.train.base_lr = 2e-3;
  c.train.offset_lr = 0.02;
  c.train.seed = seed;
  return c;
}

std::unique_ptr<Trainer> make_trainer(const RunConfig& c) {
  auto data = std::make_shared<const SynthDataset>(c.data.train);
  return std::make_unique<Trainer>(c.network.build(), c.train, data);
}

#ifdef SSN_CLI_PATH
struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

Run run_cli(const std::string& args, const std::string& env = "") {
  const fs::path dir = fs::temp_directory_path();
  const fs::path out = dir / "ssn_cli_stdout.txt", err = dir / "ssn_cli_stderr.txt";
  const std::string cmd = env + " \"" SSN_CLI_PATH "\" " + args + " >" + out.string() + " 2>" + err.string();
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

double value_after(const std::string& text, const std::string& key) {
  const auto pos = text.find(key + " ");
  if (pos == std::string::npos) return std::nan("");
  return std::stod(text.substr(pos + key.size() + 1));
}

#endif

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoint format.

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto c = small_config(1);
  auto t = make_trainer(c);
  run_training(*t, 7, nullptr);
  const auto dir = scratch("roundtrip");
  save_checkpoint(dir / "a.ssnc", capture_checkpoint(*t, c.to_json()));
  save_checkpoint(dir / "b.ssnc", load_checkpoint(dir / "a.ssnc"));
  EXPECT_EQ(read_file(dir / "a.ssnc"), read_file(dir / "b.ssnc"));
  EXPECT_FALSE(fs::exists(dir / "a.ssnc.tmp"));
  fs::remove_all(dir);
}

TEST(Checkpoint, ParametersRoundTripBitExactly) {
  auto c = small_config(2);
  auto t = make_trainer(c);
  run_training(*t, 6, nullptr);
  auto s = decode_checkpoint(encode_checkpoint(capture_checkpoint(*t, "")));
  Model<float> m(s.graph, 123, true);
  load_model_params(m, s);
  for (auto* p : t->model().all_params()) EXPECT_EQ(m.find_param(p->name)->value, p->value) << p->name;
  EXPECT_EQ(m.fsm_layer(1).state, FsmState::kActive);
}

TEST(Checkpoint, ZeroIterationsEqualsInitialization) {
  auto c = small_config(3);
  auto t = make_trainer(c);
  auto s = capture_checkpoint(*t, "");
  EXPECT_EQ(s.iteration, 0);
  EXPECT_FALSE(s.inserted);
  for (const auto& b : s.params) EXPECT_EQ(b.values, t->model().find_param(b.name)->value) << b.name;
}

TEST(Checkpoint, TruncatedFileNamesByteCounts) {
  auto c = small_config(4);
  auto t = make_trainer(c);
  const std::string bytes = encode_checkpoint(capture_checkpoint(*t, ""));
  const auto dir = scratch("truncated");
  write_file(dir / "t.ssnc", bytes.substr(0, bytes.size() - 10));
  try {
    load_checkpoint(dir / "t.ssnc");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected " + std::to_string(bytes.size()) + " bytes"), std::string::npos) << msg;
    EXPECT_NE(msg.find("got " + std::to_string(bytes.size() - 10)), std::string::npos) << msg;
  }
  try {
    decode_checkpoint(std::string_view(bytes).substr(0, 7));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected at least 16 bytes, got 7"), std::string::npos) << e.what();
  }
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsBadMagicAndVersion) {
  auto c = small_config(5);
  auto t = make_trainer(c);
  std::string bytes = encode_checkpoint(capture_checkpoint(*t, ""));
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), FormatError);
  std::string version = bytes;
  version[4] = 2;
  try {
    decode_checkpoint(version);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, ModelMismatchIsRejected) {
  auto c = small_config(6);
  auto t = make_trainer(c);
  auto s = capture_checkpoint(*t, "");
  auto other = small_config(6);
  other.network.width_channels = 16;
  Model<float> m(other.network.build(), 0, true);
  EXPECT_THROW(load_model_params(m, s), FormatError);
  auto t2 = make_trainer(other);
  EXPECT_THROW(restore_checkpoint(*t2, s), FormatError);
}

TEST(Checkpoint, RestoreNeedsFreshTrainer) {
  auto c = small_config(7);
  auto t = make_trainer(c);
  auto s = capture_checkpoint(*t, "");
  t->step();
  EXPECT_THROW(restore_checkpoint(*t, s), StateError);
}

TEST(Checkpoint, SplitRunResumeIsBitExact) {
  auto c = small_config(8);
  c.train.augment = true;
  auto full = make_trainer(c);
  std::vector<double> full_losses;
  while (full->iteration() < 12) full_losses.push_back(full->step().loss_main);

  auto first = make_trainer(c);
  for (int i = 0; i < 4; ++i) first->step();  // stops before insertion
  const std::string bytes = encode_checkpoint(capture_checkpoint(*first, c.to_json()));
  auto second = make_trainer(c);
  restore_checkpoint(*second, decode_checkpoint(bytes));
  EXPECT_EQ(second->iteration(), 4);
  std::vector<double> tail;
  while (second->iteration() < 8) tail.push_back(second->step().loss_main);

  // Second split after insertion.
  const std::string bytes2 = encode_checkpoint(capture_checkpoint(*second, c.to_json()));
  auto third = make_trainer(c);
  restore_checkpoint(*third, decode_checkpoint(bytes2));
  EXPECT_TRUE(third->inserted());
  while (third->iteration() < 12) tail.push_back(third->step().loss_main);

  EXPECT_EQ(tail, std::vector<double>(full_losses.begin() + 4, full_losses.end()));
  for (auto* p : full->model().all_params()) EXPECT_EQ(third->model().find_param(p->name)->value, p->value) << p->name;
}

// ---------------------------------------------------------------------------
// Config.

TEST(Config, UnknownKeyNamesPath) {
  try {
    RunConfig::from_json(R"({"train": {"lr_decay": {"bogus": 1}}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()), "train.lr_decay.bogus: unknown key");
  }
  EXPECT_THROW(RunConfig::from_json(R"({"extra": 1})"), ConfigError);
}

TEST(Config, TypeAndRangeErrorsNamePath) {
  auto msg = [](const std::string& text) {
    try {
      RunConfig::from_json(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_EQ(msg(R"({"network": {"height": "tall"}})").rfind("network.height:", 0), 0u);
  EXPECT_EQ(msg(R"({"train": {"base_lr": -1}})").rfind("train.base_lr:", 0), 0u);
  EXPECT_EQ(msg(R"({"data": {"train": {"count": 0}}})").rfind("data.train.count:", 0), 0u);
  EXPECT_EQ(msg(R"({"network": {"kind": "vgg"}})").rfind("network.kind:", 0), 0u);
  EXPECT_EQ(msg("[1, 2").rfind("<root>:", 0), 0u);
}

TEST(Config, JsonRoundTrip) {
  auto c = small_config(9);
  c.network.esp_after = {0};
  c.train.lr_decay = {50, 0.5, 25};
  const std::string text = c.to_json();
  EXPECT_EQ(RunConfig::from_json(text).to_json(), text);
  EXPECT_EQ(RunConfig::from_json("{}").to_json(), RunConfig{}.to_json());
}

// ---------------------------------------------------------------------------
// Command-line tool.

#ifdef SSN_CLI_PATH

TEST(Cli, CountPrintsTotals) {
  auto r = run_cli("count");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NEAR(value_after(r.out, "params"), 0.8e6, 0.04e6);
  EXPECT_NEAR(value_after(r.out, "flops_one_per_mac"), 2.5e9, 0.5e9);
  EXPECT_GT(value_after(r.out, "flops_two_per_mac"), 1.9 * value_after(r.out, "flops_one_per_mac"));
}

TEST(Cli, BadConfigExitsTwoWithKeyPath) {
  const auto dir = scratch("badcfg");
  write_file(dir / "cfg.json", R"({"train": {"batchsize": 4}})");
  auto r = run_cli("train --config " + (dir / "cfg.json").string() + " --out " + dir.string());
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(r.err, "error: config: train.batchsize: unknown key\n");
  fs::remove_all(dir);
}

TEST(Cli, UsageErrorExitsTwo) {
  auto r = run_cli("gradcheck --cases -3");
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(r.err.rfind("error: usage:", 0), 0u);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST(Cli, GradcheckAndOracleCheckPass) {
  auto g = run_cli("gradcheck --cases 12 --seed 3");
  EXPECT_EQ(g.status, 0) << g.out;
  EXPECT_NE(g.out.find("gradcheck pass"), std::string::npos) << g.out;
  EXPECT_LT(value_after(g.out.substr(g.out.find("gradcheck pass")), "max_rel_error"), 1e-4);
  auto o = run_cli("oracle-check --cases 5");
  EXPECT_EQ(o.status, 0);
  EXPECT_NE(o.out.find("oracle-check pass"), std::string::npos) << o.out;
}

TEST(Cli, TrainThenEvalReproducesLoss) {
  const auto dir = scratch("train_eval");
  write_file(dir / "cfg.json", small_config(10).to_json());
  auto t = run_cli("train --config " + (dir / "cfg.json").string(), "SSN_OUTPUT_DIR=" + dir.string());
  ASSERT_EQ(t.status, 0) << t.err;
  EXPECT_TRUE(fs::exists(dir / "checkpoint.ssnc"));
  EXPECT_TRUE(fs::exists(dir / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "offsets" / "offsets_epoch0.csv"));
  auto e = run_cli("eval --checkpoint " + (dir / "checkpoint.ssnc").string());
  ASSERT_EQ(e.status, 0) << e.err;
  EXPECT_NEAR(value_after(e.out, "eval_loss"), value_after(t.out, "final_eval_loss"), 1e-6);

  // Resume to a later iteration and compare with an uninterrupted run.
  const auto dir2 = scratch("train_full");
  auto full = run_cli("train --iterations 16 --config " + (dir / "cfg.json").string() + " --out " + dir2.string());
  ASSERT_EQ(full.status, 0) << full.err;
  auto resumed = run_cli("train --iterations 16 --resume " + (dir / "checkpoint.ssnc").string() + " --out " +
                         dir.string());
  ASSERT_EQ(resumed.status, 0) << resumed.err;
  EXPECT_EQ(value_after(resumed.out, "final_eval_loss"), value_after(full.out, "final_eval_loss"));
  EXPECT_EQ(read_file(dir / "metrics.csv"), read_file(dir2 / "metrics.csv"));

  auto kp = run_cli("analyze kp-scores --checkpoint " + (dir / "checkpoint.ssnc").string() + " --out " + dir.string());
  EXPECT_EQ(kp.status, 0) << kp.err;
  auto off = run_cli("analyze offsets --checkpoint " + (dir / "checkpoint.ssnc").string() + " --out " + dir.string());
  EXPECT_EQ(off.status, 0) << off.err;
  EXPECT_EQ(read_file(dir / "offsets.csv").rfind("module_id,k,dx,dy\n", 0), 0u);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Cli, DivergenceExitsThree) {
  const auto dir = scratch("diverge");
  auto c = small_config(11);
  c.train.base_lr = 1e38;
  c.train.insertion_iteration = 100;
  write_file(dir / "cfg.json", c.to_json());
  auto r = run_cli("train --config " + (dir / "cfg.json").string() + " --out " + dir.string());
  EXPECT_EQ(r.status, 3) << r.out << r.err;
  EXPECT_EQ(r.err.rfind("error: divergence: non-finite loss", 0), 0u) << r.err;
  EXPECT_TRUE(fs::exists(dir / "checkpoint.ssnc"));
  fs::remove_all(dir);
}

TEST(Cli, CorruptCheckpointIsFormatError) {
  const auto dir = scratch("corrupt");
  write_file(dir / "bad.ssnc", "SSNC");
  auto r = run_cli("eval --checkpoint " + (dir / "bad.ssnc").string());
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.err.rfind("error: format: checkpoint: truncated header", 0), 0u) << r.err;
  fs::remove_all(dir);
}

#endif  // SSN_CLI_PATH
