#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gamreid/config.hpp"
#include "gamreid/tensor_io.hpp"

using namespace gamreid;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "gamreid_cli_test";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Outcome {
  int code;
  std::string out, err;
};

Outcome cli(const std::string& args) {
  const auto out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd = std::string(GAMREID_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    std::ofstream(kRoot / "small.cfg") << "synth_identities = 4\nsynth_views = 6\nsynth_cameras = 2\n"
                                          "epochs_per_stage = 1\nstages = 2\nbatch_size = 8\n";
    ASSERT_EQ(cli("synth-data --spec " + (kRoot / "small.cfg").string() + " --out " + (kRoot / "data").string()).code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(kRoot); }

  static std::string path(const std::string& rel) { return (kRoot / rel).string(); }
  static Outcome train(const std::string& out) {
    return cli("train --config " + path("small.cfg") + " --data " + path("data") + " --out " + path(out));
  }
};

bool single_error_line(const Outcome& o, const std::string& category) {
  return o.code != 0 && o.err.rfind("error: " + category + ": ", 0) == 0 &&
         o.err.find('\n') == o.err.size() - 1;
}

}  // namespace

TEST_F(Cli, TrainThenEvalEmitsMetrics) {
  ASSERT_EQ(train("run").code, 0);
  for (const char* f : {"config.txt", "train_log.tsv", "stage_0.gamc", "final.gamc", "metrics.kv", "assignments.tsv"})
    EXPECT_TRUE(fs::exists(kRoot / "run" / f)) << f;
  EXPECT_EQ(slurp(kRoot / "run" / "config.txt"), format_config(load_config(kRoot / "small.cfg")));

  const auto ev = cli("eval --checkpoint " + path("run/final.gamc") + " --data " + path("data") + " --out " + path("ev"));
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto kv = slurp(kRoot / "ev" / "metrics.kv");
  EXPECT_NE(kv.find("rank1="), std::string::npos);
  EXPECT_NE(kv.find("num_queries=8"), std::string::npos);
}

TEST_F(Cli, IdenticalRunsGiveIdenticalMetrics) {
  ASSERT_EQ(train("det_a").code, 0);
  ASSERT_EQ(train("det_b").code, 0);
  for (const char* f : {"metrics.kv", "metrics.txt", "train_log.tsv"})
    EXPECT_EQ(slurp(kRoot / "det_a" / f), slurp(kRoot / "det_b" / f)) << f;
}

TEST_F(Cli, UnknownConfigKeyIsNamed) {
  std::ofstream(kRoot / "bad.cfg") << "seed = 1\nlearnig_rate = 0.1\n";
  const auto o = cli("train --config " + path("bad.cfg") + " --data " + path("data") + " --out " + path("bad"));
  EXPECT_TRUE(single_error_line(o, "config")) << o.err;
  EXPECT_NE(o.err.find("'learnig_rate'"), std::string::npos);
}

TEST_F(Cli, CheckpointConfigMismatchIsIntegrityError) {
  ASSERT_EQ(train("mm").code, 0);
  auto ck = load_checkpoint(kRoot / "mm" / "final.gamc");
  auto cfg = parse_config(ck.config_text);
  cfg.embedding_dim = 24;
  ck.config_text = format_config(cfg);
  save_checkpoint(kRoot / "mm" / "edited.gamc", ck);
  const auto o = cli("eval --checkpoint " + path("mm/edited.gamc") + " --data " + path("data") + " --out " + path("mm_ev"));
  EXPECT_TRUE(single_error_line(o, "integrity")) << o.err;
  EXPECT_FALSE(fs::exists(kRoot / "mm_ev" / "metrics.kv"));

  std::ofstream(kRoot / "other.cfg") << slurp(kRoot / "small.cfg") << "seed = 9\n";
  const auto r = cli("train --config " + path("other.cfg") + " --data " + path("data") + " --out " + path("mm2") +
                     " --resume " + path("mm/stage_0.gamc"));
  EXPECT_TRUE(single_error_line(r, "integrity")) << r.err;
}

TEST_F(Cli, FlagsValidatedBeforeWork) {
  const auto o = cli("train --config " + path("missing.cfg") + " --data " + path("data") + " --out " + path("x"));
  EXPECT_TRUE(single_error_line(o, "usage")) << o.err;
  EXPECT_FALSE(fs::exists(kRoot / "x"));
  EXPECT_TRUE(single_error_line(cli("frobnicate"), "usage"));
}

TEST_F(Cli, CountParams) {
  const auto o = cli("count-params --preset resnet50-gam --groups 4 --assembled");
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("total 24557120"), std::string::npos) << o.out;
  EXPECT_NE(o.out.find("total 10311712"), std::string::npos) << o.out;
  EXPECT_NE(o.out.find("reduction 58.01%"), std::string::npos) << o.out;
  EXPECT_NE(o.out.find("matches"), std::string::npos);
}

TEST_F(Cli, GradCheckExitCode) {
  const auto o = cli("grad-check --module attention --rounds 2");
  EXPECT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("max relative error"), std::string::npos);
  EXPECT_TRUE(single_error_line(cli("grad-check --module nope"), "usage"));
}

TEST_F(Cli, ClusterSavedEmbeddings) {
  Rng rng(4);
  std::vector<double> v(40 * 6);
  for (auto& x : v) x = standard_normal(rng);
  save_tensor(kRoot / "emb.gamt", Tensor({40, 6}, v));
  const auto o = cli("cluster --embeddings " + path("emb.gamt") + " --lambda auto --fraction 0.1 --stages 3 --out " +
                     path("cl"));
  ASSERT_EQ(o.code, 0) << o.err;
  std::ifstream is(kRoot / "cl" / "assignments.tsv");
  const auto asg = read_assignments(is);
  ASSERT_EQ(asg.size(), 40u);
  EXPECT_EQ(std::set<std::size_t>(asg.begin(), asg.end()).size(), 28u);
}

TEST_F(Cli, ExportAttention) {
  ASSERT_EQ(train("attn_run").code, 0);
  const auto index = open_dataset(kRoot / "data");
  const auto img = (kRoot / "data" / index.entries.front().path).string();
  const auto o = cli("export-attn --checkpoint " + path("attn_run/final.gamc") + " --image " + img +
                     " --layer 1 --out " + path("attn"));
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(slurp(kRoot / "attn" / "attention_layer1.pgm").substr(0, 2), "P5");
  EXPECT_TRUE(single_error_line(cli("export-attn --checkpoint " + path("attn_run/final.gamc") + " --image " + img +
                                    " --layer 99 --out " + path("attn")),
                                "usage"));
}
