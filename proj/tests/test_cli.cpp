#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include <dispick/datagen.hpp>
#include <dispick/io.hpp>

namespace fs = std::filesystem;
using dispick::io::read_text;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dispick_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Run dispick_cli(const std::string& args, const fs::path& dir) {
  const auto err = dir / "stderr.txt";
  const std::string cmd = std::string(DISPICK_CLI) + " " + args + " 2>" + err.string();
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = fs::exists(err) ? read_text(err) : "";
  return r;
}

std::string tiny_settings() {
  return "--set seed=3 --set sim.train=8 --set sim.val=2 --set real.train=4 --set real.val=2 "
         "--set real.heldout=3 --set unet.depth=2 --set unet.base_channels=4 --set pretrain.max_epochs=2 "
         "--set pretrain.batch_size=4 --set finetune.max_epochs=2 --set finetune.batch_size=2";
}

}  // namespace

TEST(Cli, GenerateCountAndIdenticalRerun) {
  const auto d = scratch("gen");
  auto r = dispick_cli("generate --domain sim --n 25 --seed 7 --out " + (d / "a").string(), d);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["count"], 25);
  EXPECT_EQ(dispick::load_dataset(d / "a").curvesets.size(), 25u);
  ASSERT_EQ(dispick_cli("generate --domain sim --n 25 --seed 7 --out " + (d / "b").string(), d).code, 0);
  for (const char* f : {"manifest.json", "curvesets_00000.ndjson"})
    EXPECT_EQ(read_text(d / "a" / f), read_text(d / "b" / f)) << f;
  fs::remove_all(d);
}

TEST(Cli, GenerateRejectsZeroCount) {
  const auto d = scratch("zero");
  const auto r = dispick_cli("generate --n 0 --out " + (d / "x").string(), d);
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
  EXPECT_FALSE(fs::exists(d / "x"));
  fs::remove_all(d);
}

TEST(Cli, GenerateRefusesNonEmptyDirectory) {
  const auto d = scratch("refuse");
  ASSERT_EQ(dispick_cli("generate --n 2 --out " + (d / "a").string(), d).code, 0);
  EXPECT_EQ(dispick_cli("generate --n 2 --out " + (d / "a").string(), d).code, 2);
  EXPECT_EQ(dispick_cli("generate --n 3 --overwrite --out " + (d / "a").string(), d).code, 0);
  fs::remove_all(d);
}

TEST(Cli, UsageErrors) {
  const auto d = scratch("usage");
  EXPECT_EQ(dispick_cli("", d).code, 1);
  EXPECT_EQ(dispick_cli("frobnicate", d).code, 1);
  EXPECT_EQ(dispick_cli("generate --domain moon --n 2 --out " + d.string(), d).code, 1);
  EXPECT_EQ(dispick_cli("experiment --out " + d.string() + " --set bogus=1", d).code, 1);
  EXPECT_EQ(dispick_cli("experiment --out " + d.string() + " --set sim.tarin=1", d).code, 1);
  EXPECT_EQ(dispick_cli("experiment --out " + d.string() + " --set K=0", d).code, 1);
  fs::remove_all(d);
}

TEST(Cli, RasterizeCountsAndIdempotence) {
  const auto d = scratch("ras");
  ASSERT_EQ(dispick_cli("generate --n 7 --seed 2 --out " + (d / "ds").string(), d).code, 0);
  auto r = dispick_cli("rasterize --dataset " + (d / "ds").string() + " --out " + (d / "r1").string() + " --pgm 2", d);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["records"], 7);
  const auto idx = dispick::io::read_json(d / "r1" / "records.idx.json");
  EXPECT_EQ(idx["count"], dispick::io::read_json(d / "ds" / "manifest.json")["count"]);
  EXPECT_EQ(fs::file_size(d / "r1" / "records.bin") >= 7u * 8192u, true);
  EXPECT_TRUE(fs::exists(d / "r1" / "pgm" / "sim-000001_mask.pgm"));
  ASSERT_EQ(dispick_cli("rasterize --dataset " + (d / "ds").string() + " --out " + (d / "r1").string(), d).code, 0);
  ASSERT_EQ(dispick_cli("rasterize --dataset " + (d / "ds").string() + " --out " + (d / "r2").string(), d).code, 0);
  EXPECT_EQ(read_text(d / "r1" / "records.bin"), read_text(d / "r2" / "records.bin"));
  EXPECT_EQ(read_text(d / "r1" / "records.idx.json"), read_text(d / "r2" / "records.idx.json"));
  fs::remove_all(d);
}

TEST(Cli, CorruptLineIsNamed) {
  const auto d = scratch("corrupt");
  ASSERT_EQ(dispick_cli("generate --n 4 --out " + (d / "ds").string(), d).code, 0);
  const auto chunk = d / "ds" / "curvesets_00000.ndjson";
  auto text = read_text(chunk);
  const auto second = text.find('\n') + 1;
  const auto third = text.find('\n', second) + 1;
  text.replace(second, third - second, "{\"pair_id\": \"x\", \"points\": [1, 2\n");
  dispick::io::write_text(chunk, text);
  const auto r = dispick_cli("rasterize --dataset " + (d / "ds").string() + " --out " + (d / "r").string(), d);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("curvesets_00000.ndjson:2"), std::string::npos) << r.err;
  EXPECT_EQ(dispick_cli("rasterize --dataset " + (d / "nowhere").string() + " --out " + (d / "r").string(), d).code,
            2);
  fs::remove_all(d);
}

TEST(Cli, MissingCheckpointIsExplicit) {
  const auto d = scratch("ckpt");
  ASSERT_EQ(dispick_cli("generate --n 2 --out " + (d / "ds").string(), d).code, 0);
  const auto missing = (d / "none.ckpt").string();
  auto r = dispick_cli("predict --checkpoint " + missing + " --dataset " + (d / "ds").string() + " --image sim-000000", d);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("none.ckpt"), std::string::npos) << r.err;
  r = dispick_cli("finetune --out " + (d / "run").string() + " " + tiny_settings(), d);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("pretrain.ckpt"), std::string::npos) << r.err;
  fs::remove_all(d);
}

TEST(Cli, StagedRunReproducesExperiment) {
  const auto d = scratch("staged");
  const auto set = tiny_settings();
  auto r = dispick_cli("experiment --out " + (d / "exp").string() + " " + set, d);
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(dispick_cli("train --out " + (d / "st").string() + " " + set, d).code, 0);
  ASSERT_EQ(dispick_cli("finetune --out " + (d / "st").string() + " " + set, d).code, 0);
  r = dispick_cli("evaluate --out " + (d / "st").string() + " " + set, d);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"heldout_report.json", "metrics.csv", "picks.ndjson", "config.json", "pretrain_history.csv",
                        "finetune_history.csv", "checkpoints/pretrain.ckpt", "checkpoints/finetune.ckpt"})
    EXPECT_EQ(read_text(d / "exp" / f), read_text(d / "st" / f)) << f;
  fs::remove_all(d);
}

TEST(Cli, ConfigFileWithOverrides) {
  const auto d = scratch("cfgfile");
  dispick::io::write_json(d / "c.json", {{"sim", {{"train", 8}, {"val", 2}}}, {"skip_finetune", true}});
  const auto r = dispick_cli("train --config " + (d / "c.json").string() + " --out " + (d / "run").string() +
                                 " --set unet.depth=2 --set unet.base_channels=4 --set pretrain.max_epochs=1 "
                                 "--set real.heldout=2",
                             d);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto echo = dispick::io::read_json(d / "run" / "config.json");
  EXPECT_EQ(echo["sim"]["train"], 8);
  EXPECT_EQ(echo["unet"]["depth"], 2);
  EXPECT_EQ(echo["skip_finetune"], true);
  EXPECT_TRUE(fs::exists(d / "run" / "checkpoints" / "pretrain.ckpt"));
  fs::remove_all(d);
}

TEST(Cli, PredictPrintsGridAndPicks) {
  const auto d = scratch("predict");
  ASSERT_EQ(dispick_cli("train --out " + (d / "run").string() + " " + tiny_settings(), d).code, 0);
  const auto r = dispick_cli("predict --checkpoint " + (d / "run" / "checkpoints" / "pretrain.ckpt").string() +
                                 " --dataset " + (d / "run" / "data" / "sim").string() + " --image sim-000003",
                             d);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string line;
  for (int i = 0; i < 64; ++i) {
    ASSERT_TRUE(std::getline(in, line));
    ASSERT_EQ(line.size(), 64u);
    EXPECT_EQ(line.find_first_not_of("012"), std::string::npos);
  }
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    EXPECT_EQ(j["pair_id"], "sim-000003");
    EXPECT_NE(j["label"], 0);
  }
  EXPECT_EQ(dispick_cli("predict --checkpoint " + (d / "run" / "checkpoints" / "pretrain.ckpt").string() +
                            " --dataset " + (d / "run" / "data" / "sim").string() + " --image nope",
                        d)
                .code,
            2);
  fs::remove_all(d);
}

TEST(Cli, SweepWritesTable) {
  const auto d = scratch("sweep");
  const auto r = dispick_cli("sweep --out " + (d / "sw").string() + " " + tiny_settings() +
                                 " --set pretrain.max_epochs=1 --set finetune.max_epochs=1 --K 1,2 --repeats 1",
                             d);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto table = read_text(d / "sw" / "sweep.csv");
  EXPECT_EQ(table, r.out);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
  fs::remove_all(d);
}
