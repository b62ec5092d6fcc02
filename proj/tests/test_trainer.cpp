#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "gamreid/trainer.hpp"

using namespace gamreid;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gamreid_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

SynthSpec small_spec(std::uint64_t seed = 0) {
  SynthSpec s;
  s.num_identities = 4;
  s.views_per_identity = 6;
  s.num_cameras = 3;
  s.seed = seed;
  return s;
}

TrainConfig small_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.batch_size = 8;
  c.epochs_per_stage = 1;
  c.stages = 3;
  c.seed = seed;
  c.stage_eval = false;
  return c;
}

std::vector<std::pair<std::string, Tensor>> scalar_param(double value) {
  Tensor p({1}, {value});
  p.set_requires_grad(true);
  return {{"w", p}};
}

void set_grad(Tensor& p, double g) {
  auto buf = p.mutable_grad();
  buf[0] = g;
}

}  // namespace

TEST(Sgd, WorkedExamples) {
  auto still = scalar_param(0.7);
  SgdState<double> s0;
  sgd_step(still, s0, 0.1, 0.9, 0.0);
  EXPECT_EQ(still[0].second[0], 0.7);

  auto p = scalar_param(1.0);
  SgdState<double> s1;
  set_grad(p[0].second, 1.0);
  sgd_step(p, s1, 0.1, 0.0, 0.0);
  EXPECT_NEAR(p[0].second[0], 0.9, 1e-15);

  auto q = scalar_param(0.0);
  SgdState<double> s2;
  set_grad(q[0].second, 1.0);
  sgd_step(q, s2, 0.1, 0.9, 0.0);
  const double after_one = q[0].second[0];
  set_grad(q[0].second, 1.0);
  sgd_step(q, s2, 0.1, 0.9, 0.0);
  EXPECT_NEAR(after_one - q[0].second[0], 0.19, 1e-15);
}

TEST(Sgd, WeightDecayAndNanGradient) {
  auto p = scalar_param(2.0);
  SgdState<double> s;
  sgd_step(p, s, 0.1, 0.0, 0.5);
  EXPECT_NEAR(p[0].second[0], 2.0 - 0.1 * 1.0, 1e-15);

  set_grad(p[0].second, std::numeric_limits<double>::quiet_NaN());
  try {
    sgd_step(p, s, 0.1, 0.9, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
}

TEST(Schedule, GlobalEpochDrop) {
  TrainConfig c;
  EXPECT_EQ(learning_rate(c, 0), 0.1);
  EXPECT_EQ(learning_rate(c, 24), 0.1);
  EXPECT_NEAR(learning_rate(c, 25), 0.01, 1e-18);
  EXPECT_NEAR(learning_rate(c, 29), 0.01, 1e-18);
}

TEST(Config, InvalidValuesAreConfigErrors) {
  TrainConfig c;
  c.batch_size = 100;
  EXPECT_THROW(c.validate(50), Error);
  c = TrainConfig{};
  c.lr_init = 0;
  EXPECT_THROW(c.validate(50), Error);
  c = TrainConfig{};
  c.tau = -1;
  EXPECT_THROW(c.validate(50), Error);
}

TEST(TrainStage, ZeroEpochsLeavesModelUnchanged) {
  const auto dir = temp_dir("zero");
  auto data = synthetic_train_data<double>(small_spec());
  auto cfg = small_config();
  cfg.epochs_per_stage = 0;
  cfg.stages = 1;
  cfg.merge_enabled = false;
  const auto res = run_training(cfg, make_backbone_config("tiny"), data, {dir, {}, "", SIZE_MAX});
  EXPECT_TRUE(res.log.empty());
  EXPECT_EQ(res.stages.back().num_clusters, data.train.size());

  Backbone<double> fresh(make_backbone_config("tiny"), model_seed(cfg));
  const auto ck = load_checkpoint(dir / "final.gamc");
  fresh.visit([&](const std::string& name, Tensor& t, Slot) {
    const Tensor& saved = ck.at(std::string(kModelPrefix) + name);
    for (std::size_t i = 0; i < t.numel(); ++i) ASSERT_EQ(saved[i], t[i]) << name;
  });
  fs::remove_all(dir);
}

TEST(TrainStage, JointLossIsSumOfTerms) {
  auto data = synthetic_train_data<double>(small_spec());
  const auto cfg = small_config();
  Backbone<double> model(make_backbone_config("tiny"), 3);
  const auto feats = embed_all(model, data.train);
  InstanceBank ibank(feats);
  auto mbank = MemoryBank::singletons(feats);
  merge_step(mbank, 5, 0.0);
  const std::vector<std::size_t> idx{0, 3, 5, 9, 11, 17};
  auto j = joint_loss(model, ibank, mbank, data.train, idx, cfg, 0);
  EXPECT_NEAR(j.total.item(), j.idl.item() + j.acl.item(), 1e-9);

  std::vector<Tensor> aug, plain;
  std::vector<std::size_t> clusters;
  for (auto i : idx) {
    plain.push_back(data.train[i]);
    aug.push_back(augment(data.train[i], cfg.augmentation, mix_seed({cfg.seed, i}), 0));
    clusters.push_back(mbank.assignment()[i]);
  }
  Backbone<double> twin(make_backbone_config("tiny"), 3);
  auto fa = twin.embed(stack_images(aug), Mode::train), f = twin.embed(stack_images(plain), Mode::train);
  const double separate = idl_loss(idx, fa, f, ibank, cfg.tau).item() + acl_loss(f, clusters, mbank, cfg.tau).item();
  EXPECT_NEAR(j.total.item(), separate, 1e-9);
  Tape<double>::current().clear();
}

TEST(TrainStage, OneBackwardPerStepLeavesTapeEmpty) {
  auto data = synthetic_train_data<double>(small_spec());
  const auto cfg = small_config();
  Backbone<double> model(make_backbone_config("tiny"), 4);
  const auto feats = embed_all(model, data.train);
  InstanceBank ibank(feats);
  const auto mbank = MemoryBank::singletons(feats);
  SgdState<double> opt;
  ASSERT_TRUE(Tape<double>::current().empty());
  train_step(model, opt, ibank, mbank, data.train, {0, 1, 2, 3}, cfg, 0, 0.1);
  EXPECT_TRUE(Tape<double>::current().empty());
  ibank.check_invariants();
  for (const auto& [name, p] : model.parameters()) EXPECT_FALSE(p.has_grad()) << name;
}

TEST(TrainStage, FixedBatchLossDecreases) {
  auto data = synthetic_train_data<double>(small_spec());
  const std::vector<std::size_t> batch{0, 2, 5, 7, 12, 15, 19, 22};
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = small_config(seed);
    Backbone<double> model(make_backbone_config("tiny"), model_seed(cfg));
    const auto feats = embed_all(model, data.train);
    InstanceBank ibank(feats);
    const auto mbank = MemoryBank::singletons(feats);
    SgdState<double> opt;
    const double first = train_step(model, opt, ibank, mbank, data.train, batch, cfg, 0, cfg.lr_init).total;
    double last = first;
    for (int step = 1; step < 50; ++step)
      last = train_step(model, opt, ibank, mbank, data.train, batch, cfg, 0, cfg.lr_init).total;
    decreased += last < first;
  }
  EXPECT_GE(decreased, 9);
}

TEST(Run, ClusterTrajectory) {
  SynthSpec spec;
  spec.num_identities = 10;
  spec.views_per_identity = 10;
  spec.num_cameras = 2;
  auto data = synthetic_train_data<double>(spec);
  ASSERT_EQ(data.train.size(), 100u);
  TrainConfig cfg = small_config();
  cfg.epochs_per_stage = 0;
  cfg.stages = 3;
  const auto res = run_training(cfg, make_backbone_config("tiny"), data);
  ASSERT_EQ(res.stages.size(), 3u);
  EXPECT_EQ(res.stages[0].num_clusters, 96u);
  EXPECT_EQ(res.stages[1].num_clusters, 92u);
  EXPECT_EQ(res.stages[2].num_clusters, 88u);

  cfg.stages = 1;
  cfg.merge_enabled = false;
  EXPECT_EQ(run_training(cfg, make_backbone_config("tiny"), data).stages.back().num_clusters, 100u);
}

TEST(Run, StopsAtClusterFloor) {
  auto data = synthetic_train_data<double>(small_spec());
  TrainConfig cfg = small_config();
  cfg.epochs_per_stage = 0;
  cfg.stages = 100;
  cfg.merge.merge_fraction = 0.3;
  const auto res = run_training(cfg, make_backbone_config("tiny"), data);
  const std::size_t floor = cfg.merge.floor(data.train.size());
  EXPECT_EQ(res.stages.back().num_clusters, floor);
  for (std::size_t s = 1; s < res.stages.size(); ++s)
    EXPECT_LE(res.stages[s].num_clusters, res.stages[s - 1].num_clusters);
  EXPECT_LT(res.stages.size(), 100u);
}

TEST(Run, DeterministicAndResumable) {
  auto data = synthetic_train_data<double>(small_spec(5));
  const auto cfg = small_config(5);
  const auto arch = make_backbone_config("tiny");
  const auto a = temp_dir("det_a"), b = temp_dir("det_b"), c = temp_dir("det_c");
  run_training(cfg, arch, data, {a, {}, "", SIZE_MAX});
  run_training(cfg, arch, data, {b, {}, "", SIZE_MAX});
  for (const char* f : {"train_log.tsv", "metrics.kv", "stage_metrics.tsv", "assignments.tsv"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_FALSE(slurp(a / "train_log.tsv").empty());

  run_training(cfg, arch, data, {c, {}, "", 1});
  run_training(cfg, arch, data, {c, c / checkpoint_name(0), "", SIZE_MAX});
  for (const char* f : {"train_log.tsv", "metrics.kv", "assignments.tsv"}) EXPECT_EQ(slurp(a / f), slurp(c / f)) << f;
  EXPECT_TRUE(slurp(a / "final.gamc") == slurp(c / "final.gamc"));
  if (!::testing::Test::HasFailure()) for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(Run, ResumeRejectsMismatchedData) {
  auto data = synthetic_train_data<double>(small_spec());
  auto cfg = small_config();
  cfg.stages = 1;
  cfg.epochs_per_stage = 0;
  const auto dir = temp_dir("mismatch");
  run_training(cfg, make_backbone_config("tiny"), data, {dir, {}, "", SIZE_MAX});
  auto other = synthetic_train_data<double>(SynthSpec{});
  cfg.batch_size = 8;
  try {
    run_training(cfg, make_backbone_config("tiny"), other, {temp_dir("mismatch2"), dir / checkpoint_name(0), "", SIZE_MAX});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::integrity);
  }
  fs::remove_all(dir);
  fs::remove_all(temp_dir("mismatch2"));
}

TEST(Run, RandomTinyNetIsNearChance) {
  auto data = synthetic_train_data<double>(SynthSpec{});
  Backbone<double> model(make_backbone_config("tiny"), 0);
  const auto m = evaluate_retrieval(model, data);
  const double chance = 1.0 / static_cast<double>(SynthSpec{}.num_identities);
  EXPECT_LT(m.rank1, 2 * chance);
}
