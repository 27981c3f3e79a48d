#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "pap/cli.hpp"

namespace fs = std::filesystem;
using namespace pap;
using namespace pap::cli;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "pap_test_cli";

int run_pap(const std::string& args) {
  const std::string cmd = std::string(PAP_BIN) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

json read_json(const fs::path& p) { return json::parse(io::read_file(p)); }

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
  static void TearDownTestSuite() { fs::remove_all(kRoot); }
};

}  // namespace

TEST_F(CliTest, GenDataWritesManifestAndRerunsIdentically) {
  GenDataOpts o;
  o.seed = 7;
  o.n_train = 3;
  o.n_test = 2;
  o.out = (kRoot / "data").string();
  cmd_gen_data(o);
  EXPECT_TRUE(fs::exists(kRoot / "data" / "manifest.json"));
  rerun(kRoot / "data" / "run.json", (kRoot / "data2").string());
  EXPECT_EQ(artifact_checksums(kRoot / "data"), artifact_checksums(kRoot / "data2"));
  EXPECT_EQ(load_split((kRoot / "data").string(), "train").size(), 3u);
}

TEST_F(CliTest, ClutterPresetHasNegatives) {
  GenDataOpts o;
  o.preset = "clutter";
  o.n_train = 12;
  o.n_test = 4;
  o.out = (kRoot / "clutter").string();
  cmd_gen_data(o);
  std::size_t neg = 0;
  for (const auto& s : load_split(o.out, "train")) neg += s.negative;
  EXPECT_GT(neg, 0u);
}

TEST_F(CliTest, PipelineStagesRerunBitIdentical) {
  const std::string data = (kRoot / "data").string();
  if (!fs::exists(fs::path(data) / "manifest.json")) {
    GenDataOpts g;
    g.seed = 7;
    g.n_train = 3;
    g.n_test = 2;
    g.out = data;
    cmd_gen_data(g);
  }
  TrainOpts t;
  t.data = data;
  t.epochs = 1;
  t.out = (kRoot / "models").string();
  cmd_train(t);
  const std::string ckpt = (kRoot / "models" / "multi_column.papw").string();
  ASSERT_TRUE(fs::exists(ckpt));

  GenPatchOpts p;
  p.data = data;
  p.sources = {ckpt};
  p.T = 2;
  p.epochs = 1;
  p.out = (kRoot / "patches").string();
  const auto side = cmd_gen_patch(p);
  EXPECT_EQ(side["loss"], "Ls+lambda*Lp");
  EXPECT_TRUE(side.contains("footprint_attention"));
  const std::string patch = (kRoot / "patches" / "pap-multi_column.papp").string();
  ASSERT_TRUE(fs::exists(patch));

  AttackEvalOpts a;
  a.data = data;
  a.patches = {patch};
  a.models = {ckpt};
  a.visualize = 1;
  a.out = (kRoot / "eval").string();
  cmd_attack_eval(a);
  EXPECT_TRUE(fs::exists(kRoot / "eval" / "transfer.csv"));

  ReportOpts r;
  r.transfer = (kRoot / "eval" / "transfer.json").string();
  r.out = (kRoot / "report").string();
  cmd_report(r);
  EXPECT_TRUE(fs::exists(kRoot / "report" / "overestimation.csv"));

  for (const char* stage : {"models", "patches", "eval", "report"}) {
    const auto again = kRoot / (std::string(stage) + "_again");
    rerun(kRoot / stage / "run.json", again.string());
    EXPECT_EQ(artifact_checksums(kRoot / stage), artifact_checksums(again)) << stage;
  }
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run_pap("--version"), 0);
  EXPECT_EQ(run_pap("train --data " + (kRoot / "missing").string() + " --out " + (kRoot / "x").string()), 2);
  EXPECT_EQ(run_pap("attack-eval --data " + (kRoot / "missing").string() + " --models m.papw --out " +
                    (kRoot / "x").string()),
            2);
  EXPECT_NE(run_pap("train --bogus"), 0);
  EXPECT_NE(run_pap(""), 0);
}

TEST_F(CliTest, ConfigFileFillsDefaultsAndFlagsWin) {
  const auto cfg = kRoot / "gd.cfg";
  std::ofstream(cfg) << "# dataset\npreset = scale-shift\nn-train = 2\nn-test = 5\n";
  const auto out = kRoot / "cfgdata";
  ASSERT_EQ(run_pap("gen-data --config " + cfg.string() + " --n-test 1 --out " + out.string()), 0);
  const auto run = read_json(out / "run.json");
  EXPECT_EQ(run["config"]["preset"], "scale-shift");
  EXPECT_EQ(run["config"]["n_train"], 2);
  EXPECT_EQ(run["config"]["n_test"], 1);
  EXPECT_EQ(run["command"], "gen-data");
}

TEST(CliHelpers, EqualAreaSizes) {
  EXPECT_EQ(equal_area_size(PatchShape::square, 10), 10u);
  EXPECT_EQ(equal_area_size(PatchShape::circle, 10), 11u);
  EXPECT_EQ(equal_area_size(PatchShape::trapezoid, 10), 12u);
}
