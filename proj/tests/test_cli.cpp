#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include "davdd/io.hpp"

using davdd::Json;
namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path r = [] {
    const fs::path p = fs::temp_directory_path() / ("davdd_cli_test_" + std::to_string(getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    davdd::write_json((p / "cfg.json").string(),
                      Json::parse(R"({
      "benchmark": {"num_classes": 3, "samples_per_class": 12, "audio_shape": [1, 8, 8], "visual_shape": [2, 8, 8]},
      "encoder": {"audio": {"blocks": 1, "channels": 3, "feature_dim": 6},
                  "visual": {"blocks": 1, "channels": 3, "feature_dim": 6}},
      "pretrain": {"pairs": 2, "epochs": 2},
      "decouple": {"slots": 2, "epochs": 2, "decoupler": {"common_dim": 5}},
      "distill": {"steps": 4, "ipc": 1, "lr": 0.01},
      "eval": {"runs": 2, "epochs": 2}
    })"));
    return p;
  }();
  return r;
}

struct Result {
  int code;
  std::string err;
};

Result run(const std::string& args) {
  const fs::path err = root() / "stderr.txt";
  const std::string cmd = "cd '" + root().string() + "' && '" + DAVDD_CLI + "' " + args + " 2> '" +
                          err.string() + "' > /dev/null";
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), davdd::read_text(err.string())};
}

std::string bytes(const std::string& rel) { return davdd::read_text((root() / rel).string()); }

std::size_t lines(const std::string& rel) {
  std::istringstream in(bytes(rel));
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

// Builds the whole pipeline under `tag` once per test binary.
void pipeline(const std::string& tag) {
  const std::string c = "--config cfg.json ";
  ASSERT_EQ(run("gen " + c + "--out " + tag + "/data").code, 0);
  ASSERT_EQ(run("pretrain " + c + "--data " + tag + "/data --out " + tag + "/bank0").code, 0);
  ASSERT_EQ(run("decouple " + c + "--data " + tag + "/data --bank " + tag + "/bank0 --out " + tag + "/bank").code, 0);
  ASSERT_EQ(run("distill " + c + "--data " + tag + "/data --bank " + tag + "/bank --out " + tag + "/syn").code, 0);
  ASSERT_EQ(run("eval " + c + "--data " + tag + "/data --distilled " + tag + "/syn --out " + tag + "/eval").code, 0);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    pipeline("a");
    pipeline("b");
  }
};

}  // namespace

TEST_F(CliPipeline, StagesWriteArtifactsAndManifests) {
  for (const char* f : {"a/data/train/manifest.json", "a/data/test/audio.dvt", "a/bank0/pair_1/visual.ckpt",
                        "a/bank/pair_0/dec_1.ckpt", "a/bank/metrics.csv", "a/syn/trajectory.csv",
                        "a/syn/distill_meta.json", "a/eval/report.json", "a/eval/runs.csv"}) {
    EXPECT_TRUE(fs::exists(root() / f)) << f;
  }
  const Json m = davdd::read_json((root() / "a/syn/stage_manifest.json").string());
  EXPECT_EQ(m.at("stage"), "distill");
  EXPECT_EQ(m.at("inputs").at("bank").at("hash"), davdd::hash_path((root() / "a/bank").string()));
  EXPECT_EQ(m.at("inputs").at("train").at("hash"), davdd::hash_path((root() / "a/data/train").string()));
  EXPECT_EQ(lines("a/syn/trajectory.csv"), 5u);
  EXPECT_EQ(bytes("a/bank/metrics.csv").substr(0, 9), "pair,slot");
  EXPECT_EQ(davdd::read_json((root() / "a/eval/report.json").string()).at("report").at("accuracies").size(), 2u);
}

TEST_F(CliPipeline, ReRunsAreByteIdentical) {
  for (const char* f : {"data/train/audio.dvt", "data/test/manifest.json", "bank0/pair_0/audio.ckpt/param_0.dvt",
                        "bank/manifest.json", "bank/metrics.csv", "syn/canvas_audio.dvt",
                        "syn/canvas_visual.dvt", "syn/trajectory.csv", "syn/distill_meta.json",
                        "eval/report.json", "eval/runs.csv"}) {
    ASSERT_TRUE(fs::exists(root() / "a" / f)) << f;
    EXPECT_EQ(bytes(std::string("a/") + f), bytes(std::string("b/") + f)) << f;
  }
  for (const char* stage : {"data", "bank0", "bank", "syn", "eval"}) {
    for (const auto& e : fs::recursive_directory_iterator(root() / "a" / stage)) {
      if (!e.is_regular_file() || e.path().filename() == "stage_manifest.json") continue;
      const std::string rel = fs::relative(e.path(), root() / "a").generic_string();
      EXPECT_EQ(bytes("a/" + rel), bytes("b/" + rel)) << rel;
    }
  }
  EXPECT_EQ(davdd::read_json((root() / "a/eval/stage_manifest.json").string()).at("outputs"),
            davdd::read_json((root() / "b/eval/stage_manifest.json").string()).at("outputs"));
}

TEST_F(CliPipeline, MergedConfigIsPersistedWithFlagOverrides) {
  ASSERT_EQ(run("distill --config cfg.json --data a/data --bank a/bank --lambda-c 0 --seed 7 --out a/syn_l0").code, 0);
  const Json c = davdd::read_json((root() / "a/syn_l0/config.json").string());
  EXPECT_EQ(c.at("distill").at("lambda_c").get<double>(), 0.0);
  EXPECT_EQ(c.at("distill").at("steps").get<int>(), 4);
  EXPECT_EQ(c.at("seed").get<int>(), 7);
  EXPECT_EQ(c.at("decouple").at("weights").at("lambda_intra").get<double>(), 3.0);
  // The persisted config alone reproduces the run.
  ASSERT_EQ(run("distill --config a/syn_l0/config.json --data a/data --bank a/bank --out a/syn_l0_again").code, 0);
  EXPECT_EQ(bytes("a/syn_l0/canvas_audio.dvt"), bytes("a/syn_l0_again/canvas_audio.dvt"));
  std::istringstream traj(bytes("a/syn_l0/trajectory.csv"));
  std::string line;
  std::getline(traj, line);
  while (std::getline(traj, line)) EXPECT_NE(line.find(",0,"), std::string::npos) << line;
}

TEST_F(CliPipeline, ExportEmbeddingsRowsAndColumns) {
  ASSERT_EQ(run("export-embeddings --dataset a/data/train --bank a/bank --pair 1 --slot 1 --out a/emb/e.csv").code, 0);
  ASSERT_EQ(run("export-embeddings --dataset a/data/train --bank a/bank --pair 1 --slot 1 --out a/emb/f.csv").code, 0);
  const std::size_t n = davdd::read_json((root() / "a/data/train/manifest.json").string()).at("size");
  EXPECT_EQ(lines("a/emb/e.csv"), 2 * n + 1);
  std::istringstream in(bytes("a/emb/e.csv"));
  std::string header;
  std::getline(in, header);
  std::size_t zc = 0, pos = 0;
  while ((pos = header.find(",zc_", pos)) != std::string::npos) ++zc, ++pos;
  EXPECT_EQ(zc, 5u);
  EXPECT_EQ(bytes("a/emb/e.csv"), bytes("a/emb/f.csv"));
  EXPECT_NE(run("export-embeddings --dataset a/data/train --bank a/bank --pair 5 --out a/emb/g.csv").code, 0);
}

TEST_F(CliPipeline, AblateWritesFourRows) {
  ASSERT_EQ(run("ablate --config cfg.json --data a/data --bank a/bank --runs 1 --out a/abl").code, 0);
  EXPECT_EQ(lines("a/abl/ablation.csv"), 5u);
  EXPECT_TRUE(fs::exists(root() / "a/abl/row_4_cim/report.json"));
}

TEST(Cli, GenIsDeterministicAndRejectsBadSpecs) {
  ASSERT_EQ(run("gen --config cfg.json --out g1").code, 0);
  ASSERT_EQ(run("gen --config cfg.json --out g2").code, 0);
  EXPECT_EQ(bytes("g1/train/manifest.json"), bytes("g2/train/manifest.json"));
  davdd::write_json((root() / "bad_spec.json").string(), Json{{"noise", -1.0}});
  const Result bad = run("gen --config cfg.json --spec bad_spec.json --out g3");
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.err.find("noise"), std::string::npos) << bad.err;
  davdd::write_json((root() / "typo.json").string(), Json{{"distil", Json::object()}});
  const Result typo = run("gen --config typo.json --out g4");
  EXPECT_NE(typo.code, 0);
  EXPECT_NE(typo.err.find("distil"), std::string::npos) << typo.err;
}

TEST(Cli, MissingUpstreamArtifactIsNamed) {
  const Result r = run("pretrain --config cfg.json --data nowhere --out p");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("nowhere/train"), std::string::npos) << r.err;
  ASSERT_EQ(run("gen --config cfg.json --out g0").code, 0);
  const Result d = run("distill --config cfg.json --data g0 --bank no_bank --out s");
  EXPECT_NE(d.code, 0);
  EXPECT_NE(d.err.find("no_bank"), std::string::npos) << d.err;
  EXPECT_NE(run("eval --config cfg.json --data g0").code, 0);
}
