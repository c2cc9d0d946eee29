#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ewsgcn/experiment.hpp"

namespace fs = std::filesystem;
using namespace ewsgcn;

namespace {

const fs::path& root() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("ewsgcn_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct RemoveRootAtExit {
  ~RemoveRootAtExit() {
    std::error_code ec;
    fs::remove_all(fs::temp_directory_path() / ("ewsgcn_cli_" + std::to_string(::getpid())), ec);
  }
} remove_root_at_exit;

int run(const std::string& args) {
  const std::string cmd = std::string(EWSGCN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const std::string& name, const nlohmann::json& j) {
  const fs::path p = root() / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

// Tiny end-to-end configuration.
nlohmann::json tiny_config() {
  return {{"schema_version", 1},
          {"gen", {{"n_clients", 60}, {"seed", 4}, {"tx_per_client", {3, 6}}, {"base_rate", 0.3}}},
          {"train", {{"stage_epochs", {1, 1, 1}}, {"pretrain_epochs", 1}, {"seed", 2}}},
          {"split", {{"n_train", 40}, {"n_val", 0}, {"n_test", 20}}},
          {"eval", {{"n_boot", 100}}}};
}

fs::path tiny_data() {
  static const fs::path dir = [] {
    const fs::path d = root() / "tiny_data";
    const fs::path cfg = write_config("tiny.json", tiny_config());
    EXPECT_EQ(run("synth-gen --config " + cfg.string() + " --out " + d.string()), 0);
    return d;
  }();
  return dir;
}

std::vector<std::vector<double>> values(const std::vector<Param*>& ps) {
  std::vector<std::vector<double>> out;
  for (const Param* p : ps) out.emplace_back(p->value.data(), p->value.data() + p->value.size());
  return out;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("synth-gen --out " + (root() / "x").string()), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, SynthGenWritesThreeFilesDeterministically) {
  const fs::path cfg = write_config("n10.json", {{"schema_version", 1}, {"gen", {{"n_clients", 10}, {"seed", 1}}}});
  const fs::path a = root() / "gen_a", b = root() / "gen_b";
  ASSERT_EQ(run("synth-gen --config " + cfg.string() + " --out " + a.string()), 0);
  ASSERT_EQ(run("synth-gen --config " + cfg.string() + " --out " + b.string()), 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) files += e.is_regular_file();
  EXPECT_EQ(files, 3u);
  EXPECT_TRUE(fs::exists(a / "graph.jsonl"));
  EXPECT_TRUE(fs::exists(a / "truth.jsonl"));
  const auto ma = nlohmann::json::parse(slurp(a / "manifest.json"));
  const auto mb = nlohmann::json::parse(slurp(b / "manifest.json"));
  EXPECT_EQ(ma["dataset_hash"], mb["dataset_hash"]);
  EXPECT_EQ(slurp(a / "graph.jsonl"), slurp(b / "graph.jsonl"));
  const fs::path c = root() / "gen_c";
  ASSERT_EQ(run("synth-gen --config " + cfg.string() + " --out " + c.string() + " --seed 2"), 0);
  EXPECT_NE(nlohmann::json::parse(slurp(c / "manifest.json"))["dataset_hash"], ma["dataset_hash"]);
}

TEST(Cli, ConfigErrorsExitWithTwo) {
  const fs::path out = (root() / "cfg_err").string();
  auto bad = [&](const std::string& name, const nlohmann::json& j) {
    return run("synth-gen --config " + write_config(name, j).string() + " --out " + out.string());
  };
  EXPECT_EQ(bad("unknown.json", {{"schema_version", 1}, {"gen", {{"n_client", 10}}}}), 2);
  EXPECT_EQ(bad("version.json", {{"schema_version", 7}}), 2);
  EXPECT_EQ(bad("noversion.json", nlohmann::json::object()), 2);
  EXPECT_EQ(bad("degree.json", {{"schema_version", 1}, {"gen", {{"n_clients", 3}, {"mean_degree", 3.0}}}}), 2);
  const fs::path broken = root() / "broken.json";
  std::ofstream(broken) << "{ not json";
  EXPECT_EQ(run("synth-gen --config " + broken.string() + " --out " + out.string()), 2);
}

TEST(Cli, IoErrorsExitWithThree) {
  const fs::path cfg = write_config("io.json", tiny_config());
  EXPECT_EQ(run("synth-gen --config " + (root() / "missing.json").string() + " --out " + (root() / "o").string()), 3);
  EXPECT_EQ(run("pretrain --config " + cfg.string() + " --data " + (root() / "nothing.jsonl").string() + " --out " +
                (root() / "o").string()),
            3);
  const fs::path bad = root() / "bad.jsonl";
  std::ofstream(bad) << "{\"type\":\"client\"}\n";
  EXPECT_EQ(run("pretrain --config " + cfg.string() + " --data " + bad.string() + " --out " + (root() / "o").string()),
            3);
  EXPECT_EQ(run("train --config " + cfg.string() + " --data " + tiny_data().string() + " --checkpoint " +
                (root() / "nope.bin").string() + " --out " + (root() / "o").string()),
            3);
}

TEST(Cli, NumericalFailureExitsWithFour) {
  nlohmann::json j = tiny_config();
  j["train"]["pretrain_lr"] = 1e308;
  j["train"]["batch_size"] = 4;
  const fs::path cfg = write_config("explode.json", j);
  EXPECT_EQ(run("pretrain --config " + cfg.string() + " --data " + tiny_data().string() + " --out " +
                (root() / "explode").string()),
            4);
}

TEST(Cli, PipelineProducesReportsReproducibly) {
  const fs::path cfg = write_config("pipe.json", tiny_config());
  const std::string data = " --data " + tiny_data().string() + " --config " + cfg.string();
  const fs::path pre = root() / "pre", t1 = root() / "t1", t2 = root() / "t2", ev1 = root() / "ev1",
                 ev2 = root() / "ev2";
  ASSERT_EQ(run("pretrain" + data + " --out " + pre.string()), 0);
  ASSERT_TRUE(fs::exists(pre / "encoder.bin"));
  ASSERT_TRUE(fs::exists(pre / "config.json"));
  const std::string enc = " --checkpoint " + (pre / "encoder.bin").string();
  ASSERT_EQ(run("train" + data + enc + " --out " + t1.string() + " --seed 3"), 0);
  ASSERT_EQ(run("train" + data + enc + " --out " + t2.string() + " --seed 3"), 0);
  EXPECT_EQ(slurp(t1 / "model.bin"), slurp(t2 / "model.bin"));
  EXPECT_EQ(slurp(t1 / "train_log.jsonl"), slurp(t2 / "train_log.jsonl"));
  EXPECT_EQ(nlohmann::json::parse(slurp(t1 / "config.json"))["train"]["seed"], 3);

  ASSERT_EQ(run("eval" + data + " --checkpoint " + (t1 / "model.bin").string() + " --out " + ev1.string()), 0);
  ASSERT_EQ(run("eval" + data + " --checkpoint " + (t2 / "model.bin").string() + " --out " + ev2.string()), 0);
  const auto report = nlohmann::json::parse(slurp(ev1 / "report.json"));
  EXPECT_TRUE(report["auc"].is_number());
  EXPECT_TRUE(report["auc_se"].is_number());
  EXPECT_EQ(report["n"], 20);
  EXPECT_EQ(slurp(ev1 / "report.json"), slurp(ev2 / "report.json"));
  EXPECT_EQ(slurp(ev1 / "roc.csv").substr(0, 17), "fpr,tpr,threshold");
  EXPECT_TRUE(fs::exists(ev1 / "report.txt"));
}

TEST(Cli, ZeroEpochTrainingKeepsPretrainedEncoder) {
  nlohmann::json j = tiny_config();
  j["train"]["stage_epochs"] = {0, 0, 0};
  const fs::path cfg = write_config("zero.json", j);
  const std::string data = " --data " + tiny_data().string() + " --config " + cfg.string();
  const fs::path pre = root() / "zpre", out = root() / "zt";
  ASSERT_EQ(run("pretrain" + data + " --out " + pre.string()), 0);
  ASSERT_EQ(run("train" + data + " --checkpoint " + (pre / "encoder.bin").string() + " --out " + out.string()), 0);
  EncoderParams enc = load_encoder((pre / "encoder.bin").string());
  Model m = load_model((out / "model.bin").string());
  EXPECT_EQ(values(m.node_encoder.encoder_params()), values(enc.encoder_params()));
  EXPECT_EQ(values(m.edge_encoder.encoder_params()), values(enc.encoder_params()));
  EXPECT_EQ(m.node_encoder.amount_stats, enc.amount_stats);
  Model fresh = Model::init(m.config, enc, derive_seed(2, 0x80));
  EXPECT_EQ(values(m.params()), values(fresh.params()));
}

TEST(Cli, SweepDepthWritesOneRowPerDepth) {
  nlohmann::json j = tiny_config();
  j["train"]["stage_epochs"] = {1, 0, 0};
  const fs::path cfg = write_config("sweep.json", j);
  const fs::path out = root() / "sweep";
  ASSERT_EQ(run("sweep-depth --data " + tiny_data().string() + " --config " + cfg.string() + " --out " +
                out.string() + " --layers 0,2"),
            0);
  const auto s = nlohmann::json::parse(slurp(out / "sweep.json"));
  ASSERT_EQ(s["rows"].size(), 2u);
  EXPECT_EQ(s["rows"][0]["layers"], 0);
  EXPECT_EQ(s["rows"][1]["layers"], 2);
  std::istringstream csv(slurp(out / "sweep.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 3);
}
