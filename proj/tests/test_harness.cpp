#include <gtest/gtest.h>

#include "plab/harness.hpp"
#include "test_util.hpp"

using namespace plab;
using namespace plab::testing;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.data.blobs = BlobSpec{90, 4, 3, 3.0, 1.0, Box{-5.0, 5.0}};
  cfg.data.n_test = 90;
  cfg.encoder.dims = {4, 6, 3};
  cfg.encoder.train = TrainConfig{30, 0.1, Schedule::cosine, 0, 0};
  cfg.eval = TrainConfig{30, 0.1, Schedule::cosine, 0, 0};
  AttackEntry gc;
  gc.label = "gc";
  gc.method = "gc-feature";
  gc.cfg.epochs = 50;
  cfg.attacks = {gc};
  cfg.eps_grid = {0.1};
  cfg.seeds = {1};
  return cfg;
}

}  // namespace

TEST(AnomalyFilter, DropsRowsAboveThreshold) {
  const LabeledData nu{Matrix{{0.5, -0.5}, {2.0, 0.0}, {-1.0, 1.0}, {0.0, -1.01}}, {0, 1, 2, 0}, 3};
  const auto r = anomaly_filter(nu, 1.0);
  EXPECT_EQ(r.removed, 2u);
  EXPECT_EQ(r.kept, (LabeledData{Matrix{{0.5, -0.5}, {-1.0, 1.0}}, {0, 2}, 3}));
  const auto again = anomaly_filter(r.kept, 1.0);
  EXPECT_EQ(again.kept, r.kept);
  EXPECT_EQ(again.removed, 0u);
  EXPECT_THROW(anomaly_filter(nu, 0.0), Error);
}

TEST(AnomalyFilter, InRangeAndSingleScaledRow) {
  Rng rng(5);
  LabeledData nu = random_labeled(rng, 20, 4, 3);
  const double linf = norms(nu.X).linf;
  EXPECT_EQ(anomaly_filter(nu, linf).removed, 0u);
  std::size_t big = 0;
  for (std::size_t i = 0; i < 20; ++i)
    if (std::abs(nu.X(i, 0)) > std::abs(nu.X(big, 0))) big = i;
  for (std::size_t j = 0; j < 4; ++j) nu.X(big, j) *= 10.0;
  const auto r = anomaly_filter(nu, linf);
  EXPECT_EQ(r.removed, 1u);
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < 20; ++i)
    if (i != big) rest.push_back(i);
  EXPECT_EQ(r.kept, subset(nu, rest));
}

TEST(AnomalyFilter, MatchesBruteForceOnFeatures) {
  Rng rng(1);
  const FeatureData z = random_features(rng, 200, 3, 2);
  const auto r = anomaly_filter(z, 1.5);
  std::size_t expected = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < 3; ++j) ok = ok && std::abs(z.Z(i, j)) <= 1.5;
    expected += ok;
  }
  EXPECT_EQ(r.kept.size(), expected);
  EXPECT_EQ(r.removed, z.size() - expected);
  EXPECT_EQ(anomaly_filter(r.kept, 1.5).kept, r.kept);
}

TEST(EvaluatePoison, EmptyPoisonReproducesCleanAccuracy) {
  Rng rng(2);
  const Encoder f = random_encoder(rng, {3, 6, 3});
  const LabeledData train = separable_blobs(rng, 100, 3, 2.0);
  const LabeledData test = separable_blobs(rng, 100, 3, 2.0);
  const TrainConfig cfg{50, 0.1, Schedule::cosine, 0, 3};
  const EvalReport r = evaluate_poison(f, train, test, LabeledData{Matrix(0, 3), {}, 2}, cfg);
  EXPECT_EQ(r.poisoned_acc, r.clean_acc);
  EXPECT_EQ(r.drop, 0.0);
  EXPECT_EQ(r.n_poison, 0u);
  const EvalReport rz = evaluate_poison(f, train, test, FeatureData{Matrix(0, 3), {}, 2}, cfg);
  EXPECT_EQ(rz.drop, 0.0);
}

TEST(EvaluatePoison, DuplicatedCleanPointsBarelyMoveAccuracy) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const LabeledData train = gen_blobs(rng, BlobSpec{600, 8, 3, 1.5, 1.0, Box{-5.0, 5.0}});
    const LabeledData test = gen_blobs(rng, BlobSpec{600, 8, 3, 1.5, 1.0, Box{-5.0, 5.0}});
    const Encoder f = pretrain_encoder(train, std::vector<std::size_t>{8, 16, 4},
                                       TrainConfig{200, 0.1, Schedule::cosine, 0, seed});
    const auto idx = rng.sample_without_replacement(600, 18);
    const EvalReport r = evaluate_poison(f, train, test, subset(train, idx),
                                         TrainConfig{100, 0.1, Schedule::cosine, 0, seed});
    EXPECT_LE(std::abs(r.drop), 0.01) << "seed " << seed;
  }
}

TEST(EvaluatePoison, DefenseCountsRemovedRows) {
  Rng rng(3);
  const Encoder f = random_encoder(rng, {3, 6, 3});
  const LabeledData train = separable_blobs(rng, 60, 3, 2.0);
  const LabeledData test = separable_blobs(rng, 60, 3, 2.0);
  LabeledData nu = subset(train, std::vector<std::size_t>{0, 1, 2});
  nu.X(1, 0) = 1e3;
  EvalOptions opt;
  opt.defend = true;
  const TrainConfig cfg{20, 0.1, Schedule::cosine, 0, 1};
  const EvalReport r = evaluate_poison(f, train, test, nu, cfg, opt);
  EXPECT_EQ(r.n_removed_by_defense, 1u);
  EXPECT_EQ(r.n_poison, 3u);
  EXPECT_EQ(r.poison_linf, 1e3);
  const EvalReport plain = evaluate_poison(f, train, test, nu, cfg);
  EXPECT_EQ(plain.n_removed_by_defense, 0u);
}

TEST(EvaluatePoison, ReachGapUsesTarget) {
  Rng rng(4);
  const Encoder f = random_encoder(rng, {3, 6, 3});
  const LabeledData train = separable_blobs(rng, 60, 3, 2.0);
  const TrainConfig cfg{20, 0.1, Schedule::cosine, 0, 1};
  const LinearHead clean = train_head(f, train, cfg);
  EvalOptions opt;
  opt.target = &clean;
  const EvalReport r = evaluate_poison(f, train, train, LabeledData{Matrix(0, 3), {}, 2}, cfg, opt);
  ASSERT_TRUE(r.reach_gap);
  EXPECT_EQ(*r.reach_gap, 0.0);
}

TEST(Resolve, BoxVariants) {
  const Box range{-2.0, 3.0};
  AttackEntry a;
  a.method = "gc-feature";
  EXPECT_FALSE(resolve_box(a, range));
  a.box = "data";
  EXPECT_EQ(resolve_box(a, range)->hi, 3.0);
  a.box = "-1,0.5";
  EXPECT_EQ(resolve_box(a, range)->lo, -1.0);
  EXPECT_EQ(resolve_box(a, range)->hi, 0.5);
  a.box = "2,1";
  EXPECT_THROW(resolve_box(a, range), Error);
  a.box = "wide";
  EXPECT_THROW(resolve_box(a, range), Error);
  a.box = "none";
  a.method = "gc-input";
  a.cfg.constrained = true;
  EXPECT_EQ(resolve_box(a, range)->lo, -2.0);
  EXPECT_DOUBLE_EQ(resolve_eps_inf(a, range), 8.0 / 255.0 * 5.0);
  a.eps_inf = 0.25;
  EXPECT_EQ(resolve_eps_inf(a, range), 0.25);
}

TEST(Resolve, CellRngStreams) {
  Rng a = cell_rng(1, "gc", 0.1), b = cell_rng(1, "gc", 0.1);
  Rng c = cell_rng(1, "fm", 0.1), d = cell_rng(1, "gc", 0.5), e = cell_rng(2, "gc", 0.1);
  const double va = a.uniform(0, 1);
  EXPECT_EQ(va, b.uniform(0, 1));
  EXPECT_NE(va, c.uniform(0, 1));
  EXPECT_NE(va, d.uniform(0, 1));
  EXPECT_NE(va, e.uniform(0, 1));
}

TEST(Experiment, SingleCellMatchesDirectEvaluation) {
  const ExperimentConfig cfg = small_config();
  const auto reports = run_experiment(cfg);
  ASSERT_EQ(reports.size(), 1u);
  const EvalReport& r = reports[0];
  ASSERT_TRUE(r.ok()) << r.error;

  const SeedContext ctx = prepare_seed(cfg, 1);
  const AttackEntry& a = cfg.attacks[0];
  const AttackConfig ac = resolve_attack(a, ctx, cfg.eval, 0.1);
  Rng rng = cell_rng(1, "gc", 0.1);
  const PoisonResult p = gc_feature_attack(encode(ctx.encoder, ctx.train), ctx.target, ac, rng);
  EvalOptions opt{&ctx.target, ctx.clean_acc, false};
  EvalReport direct = evaluate_poison(ctx.encoder, ctx.train, *ctx.test, p,
                                      with_seed(cfg.eval, 1), opt);
  direct.attack = "gc";
  direct.eps_d = 0.1;
  direct.seed = 1;
  EXPECT_EQ(r, direct);
  EXPECT_EQ(r.n_poison, 9u);
}

TEST(Experiment, OrderingDropIdentityAndFailures) {
  ExperimentConfig cfg = small_config();
  AttackEntry bad;
  bad.label = "bad";
  bad.method = "nope";
  AttackEntry emn;
  emn.label = "emn";
  emn.method = "emn";
  emn.cfg.emn.rounds = 2;
  cfg.attacks.push_back(bad);
  cfg.attacks.push_back(emn);
  cfg.eps_grid = {0.001, 0.1};
  cfg.seeds = {2, 1};
  const auto reports = run_experiment(cfg);
  ASSERT_EQ(reports.size(), 2u * 2 + 2u * 2 + 1u * 2);
  const std::vector<std::pair<std::string, double>> order{
      {"gc", 0.001}, {"gc", 0.001}, {"gc", 0.1},  {"gc", 0.1},  {"bad", 0.001},
      {"bad", 0.001}, {"bad", 0.1}, {"bad", 0.1}, {"emn", 1.0}, {"emn", 1.0}};
  for (std::size_t i = 0; i < reports.size(); ++i) {
    EXPECT_EQ(reports[i].attack, order[i].first);
    EXPECT_EQ(reports[i].eps_d, order[i].second);
    EXPECT_EQ(reports[i].seed, i % 2 == 0 ? 2u : 1u);
    if (reports[i].ok()) {
      EXPECT_EQ(reports[i].drop, reports[i].clean_acc - reports[i].poisoned_acc);
    }
  }
  EXPECT_NE(reports[0].error.find("rounds to zero"), std::string::npos) << reports[0].error;
  EXPECT_TRUE(reports[2].ok());
  EXPECT_NE(reports[4].error.find("unknown attack method"), std::string::npos);
  EXPECT_TRUE(reports[8].ok()) << reports[8].error;
  EXPECT_FALSE(reports[8].reach_gap);
  EXPECT_TRUE(reports[2].reach_gap);
}

TEST(Experiment, SetupErrorFailsEveryCellOfThatSeed) {
  ExperimentConfig cfg = small_config();
  cfg.encoder.dims = {5, 3};
  cfg.seeds = {1, 2};
  const auto reports = run_experiment(cfg);
  ASSERT_EQ(reports.size(), 2u);
  for (const auto& r : reports) EXPECT_FALSE(r.ok());
}

TEST(Summarize, SampleStdAndFailedCounts) {
  std::vector<EvalReport> rs;
  const double drops[] = {0.1, 0.3, 0.2};
  for (int i = 0; i < 3; ++i) {
    EvalReport r;
    r.attack = "a";
    r.eps_d = 0.1;
    r.clean_acc = 0.9;
    r.drop = drops[i];
    r.poisoned_acc = 0.9 - drops[i];
    if (i < 2) r.reach_gap = 1.0 + i;
    rs.push_back(r);
  }
  EvalReport failed;
  failed.attack = "a";
  failed.eps_d = 0.1;
  failed.error = "boom";
  rs.push_back(failed);
  EvalReport other;
  other.attack = "b";
  other.eps_d = 0.1;
  rs.insert(rs.begin() + 1, other);

  const auto s = summarize(rs);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].attack, "a");
  EXPECT_EQ(s[1].attack, "b");
  EXPECT_EQ(s[0].runs, 4u);
  EXPECT_EQ(s[0].failed, 1u);
  EXPECT_EQ(s[0].drop.count, 3u);
  EXPECT_NEAR(s[0].drop.mean, 0.2, 1e-15);
  EXPECT_NEAR(s[0].drop.std, 0.1, 1e-15);
  EXPECT_EQ(s[0].reach_gap.count, 2u);
  EXPECT_NEAR(s[0].reach_gap.std, std::sqrt(0.5), 1e-15);
  EXPECT_EQ(s[1].drop.std, 0.0);
  EXPECT_TRUE(summarize({}).empty());
}
