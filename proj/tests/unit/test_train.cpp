#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <random>
#include <sstream>

#include "mcl/train.hpp"

using namespace mcl;

namespace {

ParameterSet one(const std::string& name, double v) {
  ParameterSet p;
  p.add(name, Tensor(Shape{1}, {v}));
  return p;
}

TrainConfig tiny_run(Objective obj) {
  TrainConfig c;
  c.objective = obj;
  c.epochs = 3;
  c.schedule = {2};
  c.batch_size = 16;
  c.seed = 4;
  SyntheticPartsSpec s;
  s.classes = 4;
  s.image_size = 16;
  s.glyph_size = 3;
  s.train_samples = 48;
  s.test_samples = 24;
  s.noise = 0.1;
  c.data.synthetic = s;
  c.data.seed = 2;
  return c;
}

std::string csv(const RunMetrics& m) {
  std::ostringstream os;
  m.write_csv(os);
  return os.str();
}

}  // namespace

TEST(Sgd, Examples) {
  auto p = one("w", 1.0);
  sgd_step(p, {Tensor(Shape{1}, {1.0})}, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p.get("w")[0], 0.9);

  p = one("w", 2.0);
  sgd_step(p, {Tensor(Shape{1}, {0.0})}, 0.1, 5e-4);
  EXPECT_DOUBLE_EQ(p.get("w")[0], 1.9999);

  p = one("w", 0.37);
  sgd_step(p, {Tensor(Shape{1}, {0.0})}, 0.1, 0.0);
  EXPECT_EQ(p.get("w")[0], 0.37);
}

TEST(Sgd, NonFiniteGradientNamesParameterAndLeavesParamsUntouched) {
  ParameterSet p;
  p.add("conv0.weight", Tensor(Shape{2}, {1.0, 2.0}));
  p.add("head.bias", Tensor(Shape{1}, {3.0}));
  try {
    sgd_step(p, {Tensor(Shape{2}, {0.5, 0.5}), Tensor(Shape{1}, {std::nan("")})}, 0.1, 0.0);
    FAIL() << "NaN gradient accepted";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("head.bias"), std::string::npos) << e.what();
  }
  EXPECT_EQ(p.get("conv0.weight")[0], 1.0);
  EXPECT_THROW(sgd_step(p, {Tensor(Shape{2})}, 0.1, 0.0), std::invalid_argument);
}

TEST(Schedule, StepPoints) {
  TrainConfig c;
  c.epochs = 300;
  c.schedule = {150, 225};
  EXPECT_DOUBLE_EQ(lr_at(0, c), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(149, c), 0.1);
  EXPECT_NEAR(lr_at(150, c), 0.01, 1e-17);
  EXPECT_NEAR(lr_at(225, c), 0.001, 1e-18);
  double prev = lr_at(0, c);
  for (std::size_t e = 1; e < 300; ++e) {
    EXPECT_LE(lr_at(e, c), prev);
    prev = lr_at(e, c);
  }
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig c = tiny_run(Objective::Soft);
  c.mc.mu = 0.5;
  const nlohmann::json j = c;
  const TrainConfig back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 16u);

  TrainConfig d = c;
  d.seed = 5;
  EXPECT_NE(config_hash(d), config_hash(c));

  TrainConfig bad = c;
  bad.schedule = {2, 2};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.schedule = {3};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.lr0 = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);

  nlohmann::json unknown = j;
  unknown["objective"] = "focal";
  EXPECT_THROW(unknown.get<TrainConfig>(), std::exception);
  EXPECT_THROW(load_train_config("/nonexistent/cfg.json"), std::runtime_error);
}

TEST(TrainConfig, SeedEnvironmentOverride) {
  TrainConfig c;
  c.seed = 1;
  setenv("MC_SEED", "42", 1);
  apply_env_overrides(c);
  unsetenv("MC_SEED");
  EXPECT_EQ(c.seed, 42u);
  apply_env_overrides(c);
  EXPECT_EQ(c.seed, 42u);
  setenv("MC_SEED", "x1", 1);
  EXPECT_THROW(apply_env_overrides(c), std::invalid_argument);
  unsetenv("MC_SEED");
}

TEST(Training, ZeroWeightMcMatchesCrossEntropyRun) {
  const TrainConfig ce = tiny_run(Objective::Ce);
  TrainConfig mc = tiny_run(Objective::Mc);
  mc.mc.mu = 0.0;
  mc.mc.lambda = 0.0;
  const auto [tr, te] = load_data(ce.data);
  const auto a = train(ce, tr, te), b = train(mc, tr, te);
  ASSERT_EQ(a.metrics.rows.size(), b.metrics.rows.size());
  for (std::size_t i = 0; i < a.metrics.rows.size(); ++i) {
    EXPECT_EQ(a.metrics.rows[i].acc, b.metrics.rows[i].acc) << i;
    EXPECT_EQ(a.metrics.rows[i].l_ce, b.metrics.rows[i].l_ce) << i;
    EXPECT_EQ(a.metrics.rows[i].l_total, b.metrics.rows[i].l_total) << i;
  }
  EXPECT_EQ(a.model.params(), b.model.params());
}

TEST(Training, SameSeedSameLog) {
  for (Objective o : {Objective::Mc, Objective::Soft}) {
    const TrainConfig c = tiny_run(o);
    const auto [tr, te] = load_data(c.data);
    const auto a = train(c, tr, te), b = train(c, tr, te);
    EXPECT_EQ(csv(a.metrics), csv(b.metrics)) << objective_name(o);
    EXPECT_EQ(a.model.params(), b.model.params());
    EXPECT_EQ(a.mask_draws, b.mask_draws);
    EXPECT_GT(a.mask_draws, 0u);
  }
}

TEST(Training, LogShapeAndFiniteness) {
  const TrainConfig c = tiny_run(Objective::Mc);
  const auto [tr, te] = load_data(c.data);
  const auto r = train(c, tr, te);
  ASSERT_EQ(r.metrics.rows.size(), 2 * c.epochs);
  for (const auto& m : r.metrics.rows) {
    EXPECT_GE(m.acc, 0.0);
    EXPECT_LE(m.acc, 1.0);
    for (double v : {m.l_ce, m.l_dis, m.l_div, m.l_total}) EXPECT_TRUE(std::isfinite(v));
    if (m.split == "test") {
      EXPECT_EQ(m.l_total, m.l_ce);
    }
  }
  EXPECT_EQ(csv(r.metrics).substr(0, 41), "epoch,split,acc,l_ce,l_dis,l_div,l_total\n");
  EXPECT_GE(r.best_accuracy, r.metrics.final_accuracy());
}

TEST(Training, EvaluationDrawsNoMasksAndSkipsMcBranch) {
  const TrainConfig c = tiny_run(Objective::Mc);
  const auto [tr, te] = load_data(c.data);
  const auto r = train(c, tr, te);
  const auto before = mc_branch_evaluations();
  const EvalResult e1 = evaluate(r.model, te);
  const EvalResult e2 = evaluate(r.model, te, 5);
  EXPECT_EQ(mc_branch_evaluations(), before);
  EXPECT_EQ(e1.logits, e2.logits);  // batch composition does not leak into eval
}

TEST(Heatmap, ClosedFormCases) {
  Tensor act(Shape{2, 2}, {0.0, 3.0, 0.0, 0.0});
  const Tensor flat_grad(Shape{2, 2}, {0.5, 0.5, 0.5, 0.5});
  EXPECT_EQ(gradcam_map(act, flat_grad), Tensor(Shape{2, 2}, {0.0, 1.0, 0.0, 0.0}));
  EXPECT_EQ(gradcam_map(act, Tensor(Shape{2, 2})), Tensor(Shape{2, 2}));
  // negative α is clipped away entirely
  EXPECT_EQ(gradcam_map(act, Tensor(Shape{2, 2}, {-1.0, 0.0, 0.0, 0.0})), Tensor(Shape{2, 2}));
  const Tensor graded = gradcam_map(Tensor(Shape{1, 3}, {1.0, 2.0, 3.0}), Tensor(Shape{1, 3}, {1.0, 1.0, 1.0}));
  EXPECT_EQ(graded, Tensor(Shape{1, 3}, {0.0, 0.5, 1.0}));
}

TEST(Heatmap, ZeroHeadGivesZeroMapAndRangeChecks) {
  TinyCnn m = TinyCnn::build(TinyCnnConfig::desk(4, 8, 16), 1);
  m.params().get("head.weight") = Tensor(m.params().get("head.weight").shape());
  const Tensor img = synth_generate(tiny_run(Objective::Ce).data.synthetic.value(), 1).test.gather(std::vector<std::size_t>{0});
  EXPECT_EQ(channel_heatmap(m, img, 3, 1), Tensor(Shape{4, 4}));
  EXPECT_THROW(channel_heatmap(m, img, 8, 0), std::invalid_argument);
  EXPECT_THROW(channel_heatmap(m, img, 0, 4), std::invalid_argument);
}

TEST(Overlap, Examples) {
  const Tensor a(Shape{4}, {0.5, 0.5, 0.0, 0.0}), b(Shape{4}, {0.0, 0.5, 0.5, 0.0}), c(Shape{4}, {0.0, 0.0, 0.0, 1.0});
  EXPECT_DOUBLE_EQ(overlap_score({a, a}), 1.0);
  EXPECT_DOUBLE_EQ(overlap_score({a, c}), 0.0);
  EXPECT_DOUBLE_EQ(overlap_score({a, b}), 0.5);
  EXPECT_DOUBLE_EQ(overlap_score({a, b, c}), 0.5 / 3.0);
  EXPECT_THROW(overlap_score({a}), std::invalid_argument);
  EXPECT_THROW(overlap_score({a, Tensor(Shape{4}, {0.5, 0.4, 0.0, 0.0})}), std::invalid_argument);
  EXPECT_THROW(overlap_score({a, Tensor(Shape{4}, {1.5, -0.5, 0.0, 0.0})}), std::invalid_argument);
}

TEST(Overlap, SymmetricBoundedAndOneOnlyForIdenticalMaps) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x(Shape{3, 3}), y(Shape{3, 3});
    for (auto& v : x.data()) v = u(rng) < 0.3 ? 0.0 : u(rng);
    for (auto& v : y.data()) v = u(rng) < 0.3 ? 0.0 : u(rng);
    x = sum_normalized(x);
    y = sum_normalized(y);
    const double s = overlap_score({x, y});
    EXPECT_EQ(s, overlap_score({y, x}));
    EXPECT_GE(s, 0.0);
    EXPECT_LT(s, 1.0);
    EXPECT_NEAR(overlap_score({x, x}), 1.0, 1e-12);
  }
  EXPECT_EQ(sum_normalized(Tensor(Shape{2, 2})), Tensor(Shape{2, 2}, {0.25, 0.25, 0.25, 0.25}));
}
