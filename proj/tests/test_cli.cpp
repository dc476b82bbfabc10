/* Copyright 2026 The hyperproto Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License. */

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "hyperproto/explain.hpp"
#include "hyperproto/train.hpp"
#include "test_util.hpp"

using namespace hyperproto;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;

  json first_line() const { return json::parse(out.substr(0, out.find('\n'))); }
  json last_line() const {
    const std::string t = out.substr(0, out.size() - 1);
    return json::parse(t.substr(t.rfind('\n') + 1));
  }
};

CliRun cli(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" + std::string(HP_CLI) + "' " + args + " > stdout.txt 2> stderr.txt";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text_file(cwd / "stdout.txt");
  r.err = read_text_file(cwd / "stderr.txt");
  return r;
}

// A tiny end-to-end setup: 2/2/2 tree, small grids, short schedules.
fs::path small_pipeline(const std::string& name) {
  const fs::path dir = hptest::temp_dir(name);
  write_text_file(dir / "tree.json", balanced_tree(2, 2, 2).serialize());
  EXPECT_EQ(cli(dir, "synth --hierarchy tree.json --out data --clips-per-class 4 --dims 3,3,2,6 --seed 3").code, 0);
  EXPECT_EQ(cli(dir, "embed --hierarchy data/hierarchy.json --out emb --dim 4 --epochs 40 --negatives 3").code, 0);
  return dir;
}

const char* kTrain =
    "train --manifest data/train.json --templates emb/templates.hptm --out tr --prototypes-per-class 2 "
    "--ancestor-prototypes 1 --epochs 3 --warmup 1 --projection-period 2 --finetune-epochs 1 --batch 4";
const char* kModel = "--templates emb/templates.hptm --checkpoint tr/model.hpms";

std::map<std::string, Bytes> snapshot(const fs::path& root) {
  std::map<std::string, Bytes> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != "stdout.txt" && e.path().filename() != "stderr.txt")
      files[fs::relative(e.path(), root).string()] = read_file(e.path());
  return files;
}

}  // namespace

TEST(Cli, PipelineRunsAndStampsTheConfigHash) {
  const fs::path dir = small_pipeline("cli_pipeline");
  const CliRun train = cli(dir, kTrain);
  ASSERT_EQ(train.code, 0) << train.err;
  const json header = train.first_line();
  EXPECT_EQ(header["command"], "train");
  EXPECT_EQ(header["config"]["epochs"], "3");
  EXPECT_EQ(header["config"]["variant"], "cpg");
  const std::string hash = header["config_hash"];
  EXPECT_EQ(hash.size(), 16u);
  EXPECT_EQ(train.last_line()["status"], "ok");

  std::istringstream lines(read_text_file(dir / "tr" / "train_report.jsonl"));
  std::string line;
  int epochs = 0;
  while (std::getline(lines, line)) {
    const json j = json::parse(line);
    EXPECT_EQ(j["config_hash"], hash);
    epochs += j["type"] == "epoch";
  }
  EXPECT_EQ(epochs, 4);  // 3 scheduled + 1 finetune pass after the projection at epoch 1
  const Bytes ck = read_file(dir / "tr" / "model.hpms");
  const Bytes tb = read_file(dir / "emb" / "templates.hptm");
  EXPECT_EQ(load_checkpoint(ck, load_templates(tb)).config_hash, fnv1a64(hash));

  const CliRun eval = cli(dir, std::string("eval --manifest data/test.json ") + kModel + " --out ev");
  ASSERT_EQ(eval.code, 0) << eval.err;
  const json metrics = json::parse(read_text_file(dir / "ev" / "metrics.json"));
  EXPECT_EQ(metrics["config_hash"], eval.first_line()["config_hash"]);
  EXPECT_LE(metrics["clip"]["accuracy"].get<double>(), metrics["clip"]["sibling_accuracy"].get<double>());
  EXPECT_LE(metrics["clip"]["sibling_accuracy"].get<double>(), metrics["clip"]["cousin_accuracy"].get<double>());
  EXPECT_NE(read_text_file(dir / "ev" / "metrics.csv").find("clip,"), std::string::npos);

  const CliRun proj = cli(dir, std::string("project --manifest data/train.json ") + kModel + " --out pj");
  ASSERT_EQ(proj.code, 0) << proj.err;
  EXPECT_EQ(proj.last_line()["result"]["moved"], 22);  // 8 children x 2 + 6 ancestors x 1
  EXPECT_TRUE(fs::exists(dir / "pj" / "projected.hpms"));

  const CliRun ex = cli(dir, std::string("explain --manifest data/test.json ") + kModel +
                              " --out ex --clip test_c003_001 --size 6,6");
  ASSERT_EQ(ex.code, 0) << ex.err;
  const json index = json::parse(read_text_file(dir / "ex" / "test_c003_001" / "explanation.json"));
  EXPECT_EQ(index["levels"].size(), 3u);
  EXPECT_EQ(index["config_hash"], ex.first_line()["config_hash"]);
  EXPECT_EQ(index["levels"][2]["top"][0]["map"]["up_dims"], json({6, 6, 2}));
}

TEST(Cli, RerunIsByteIdenticalAndInputsAreUntouched) {
  const fs::path dir = small_pipeline("cli_rerun");
  const auto inputs = snapshot(dir / "data");
  auto run_all = [&] {
    ASSERT_EQ(cli(dir, kTrain).code, 0);
    ASSERT_EQ(cli(dir, std::string("eval --manifest data/test.json ") + kModel + " --out ev").code, 0);
    ASSERT_EQ(cli(dir, std::string("explain --manifest data/test.json ") + kModel + " --out ex --max-clips 3").code, 0);
  };
  run_all();
  const auto first = snapshot(dir);
  for (const char* sub : {"tr", "ev", "ex"}) fs::remove_all(dir / sub);
  run_all();
  const auto second = snapshot(dir);
  ASSERT_EQ(first.size(), second.size());
  for (const auto& [path, bytes] : first) EXPECT_EQ(second.at(path), bytes) << path;
  EXPECT_EQ(snapshot(dir / "data"), inputs);
}

TEST(Cli, ConfigFileWithFlagOverrides) {
  const fs::path dir = small_pipeline("cli_config");
  write_text_file(dir / "run.json", R"({"epochs": 4, "warmup": 2, "projection-period": 2, "finetune-epochs": 0,
                                        "prototypes-per-class": 1, "ancestor-prototypes": 1, "batch": 8})");
  const CliRun r = cli(dir, "train --config run.json --manifest data/train.json --templates emb/templates.hptm --out tr "
                         "--epochs 2");
  ASSERT_EQ(r.code, 0) << r.err;
  const json cfg = r.first_line()["config"];
  EXPECT_EQ(cfg["epochs"], "2");
  EXPECT_EQ(cfg["warmup"], "2");
  EXPECT_EQ(cfg["batch"], "8");

  write_text_file(dir / "bad.json", R"({"no-such-flag": 1})");
  const CliRun bad = cli(dir, "train --config bad.json --manifest data/train.json --templates emb/templates.hptm --out x");
  EXPECT_EQ(bad.code, 2);
  write_text_file(dir / "broken.json", "{");
  EXPECT_EQ(cli(dir, "train --config broken.json --manifest data/train.json --templates emb/templates.hptm --out x").code,
            2);
}

TEST(Cli, UsageAndRuntimeErrorsAreSingleJsonLines) {
  const fs::path dir = small_pipeline("cli_errors");
  auto expect_error = [&](const std::string& args, int code, const std::string& kind) {
    const CliRun r = cli(dir, args);
    EXPECT_EQ(r.code, code) << args;
    ASSERT_FALSE(r.err.empty()) << args;
    EXPECT_EQ(r.err.find('\n'), r.err.size() - 1) << r.err;
    const json j = json::parse(r.err);
    EXPECT_EQ(j["error"], kind);
    EXPECT_TRUE(j.contains("message"));
  };
  expect_error("", 2, "usage");
  expect_error("train --manifest data/train.json --templates emb/templates.hptm --out x --bogus 1", 2, "usage");
  expect_error("train --manifest missing.json --templates emb/templates.hptm --out x", 2, "usage");
  expect_error("train --manifest data/train.json --templates emb/templates.hptm --out x --variant base "
               "--ancestor-prototypes 2",
               2, "usage");
  expect_error("train --manifest data/train.json --templates emb/templates.hptm --out x --variant other", 2, "usage");
  expect_error("synth --hierarchy tree.json --out s --dims 3,3,2", 2, "usage");
  expect_error("embed --hierarchy tree.json --out e --dim 1", 2, "usage");
  // well-formed invocation whose input is corrupt
  expect_error("eval --manifest data/test.json --templates emb/templates.hptm --checkpoint data/train.json --out x", 1,
               "runtime");
  write_text_file(dir / "short.json", R"([{"id":1,"name":"c","level":"child","parent":2}])");
  expect_error("embed --hierarchy short.json --out e", 1, "runtime");
}

TEST(Cli, EvalOnUntrainedCheckpointIsChance) {
  const fs::path dir = small_pipeline("cli_untrained");
  auto [data, tree] = load_dataset(dir / "data" / "test.json");
  const Bytes tb = read_file(dir / "emb" / "templates.hptm");
  ModelConfig cfg;
  cfg.in_channels = 6;
  cfg.channels = 6;
  cfg.child_prototypes = 2;
  cfg.ancestor_prototypes = 1;
  cfg.head_init_gain = 0.0;  // every clip lands on the same class
  const ModelState m = init_model(tree, load_templates(tb), cfg, 1);
  fs::create_directories(dir / "tr");
  write_file(dir / "tr" / "model.hpms", save_checkpoint(m, fnv1a64(tb)));
  const CliRun r = cli(dir, std::string("eval --manifest data/test.json ") + kModel + " --out ev");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_DOUBLE_EQ(r.last_line()["result"]["clip"]["accuracy"].get<double>(), 1.0 / tree.num_children());

  // a checkpoint saved against other templates is refused
  write_file(dir / "tr" / "model.hpms", save_checkpoint(m, 12345));
  EXPECT_EQ(cli(dir, std::string("eval --manifest data/test.json ") + kModel + " --out ev").code, 1);
}
