#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mcl/backbone.hpp"
#include "mcl/gradcheck.hpp"
#include "test_util.hpp"

using namespace mcl;
using ad::Tape;
using ad::Var;
using tsupport::random_tensor;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mcl_test_backbone_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

ForwardResult run(const TinyCnn& m, Tape& t, const Tensor& x, bool training) {
  return m.forward(t.constant(x), m.params().bind_constant(t), training);
}

TinyCnnConfig small_config(bool bn) {
  TinyCnnConfig c;
  c.input_size = 8;
  c.classes = 3;
  c.batch_norm = bn;
  c.convs = {{2, 3, 1, 1}, {3, 3, 2, 1}};
  return c;
}

}  // namespace

TEST(TinyCnn, DeskGeometry) {
  const auto cfg = TinyCnnConfig::desk(8, 24);
  EXPECT_EQ(cfg.feature_extent(), 8u);
  EXPECT_EQ(cfg.feature_channels(), 24u);
  const TinyCnn m = TinyCnn::build(cfg, 1);
  Tape t;
  const ForwardResult fr = run(m, t, random_tensor({2, 1, 32, 32}, 3, 0, 1), true);
  EXPECT_EQ(fr.features.shape(), (Shape{2, 24, 8, 8}));
  EXPECT_EQ(fr.logits.shape(), (Shape{2, 8}));
  for (double v : fr.features.value().data()) EXPECT_GE(v, 0.0);
}

TEST(TinyCnn, RejectsCollapsedFeatureMap) {
  EXPECT_THROW(TinyCnn::build(TinyCnnConfig::desk(8, 24, 12), 0), std::invalid_argument);
  EXPECT_NO_THROW(TinyCnn::build(TinyCnnConfig::desk(8, 24, 16), 0));
}

TEST(TinyCnn, SeededBuildIsBitIdentical) {
  const auto cfg = TinyCnnConfig::desk(8, 24);
  EXPECT_EQ(TinyCnn::build(cfg, 5).params(), TinyCnn::build(cfg, 5).params());
  EXPECT_FALSE(TinyCnn::build(cfg, 5).params() == TinyCnn::build(cfg, 6).params());
}

TEST(TinyCnn, ParameterCountMatchesClosedForm) {
  for (bool bn : {true, false})
    for (std::size_t n : {8u, 24u, 40u}) {
      auto cfg = TinyCnnConfig::desk(8, n);
      cfg.batch_norm = bn;
      const TinyCnn m = TinyCnn::build(cfg, 0);
      // conv weights + (BN scale/shift or conv bias) + flattened head
      std::size_t expected = 0, in = 1;
      for (std::size_t width : {std::size_t{8}, std::size_t{16}, n}) {
        expected += width * in * 9 + (bn ? 2 * width : width);
        in = width;
      }
      expected += 8 * (n * 64) + 8;
      EXPECT_EQ(m.params().scalar_count(), expected) << "bn=" << bn << " n=" << n;
    }
}

TEST(TinyCnn, ZeroInputGivesHeadBias) {
  for (bool bn : {true, false}) {
    auto cfg = TinyCnnConfig::desk(8, 24);
    cfg.batch_norm = bn;
    TinyCnn m = TinyCnn::build(cfg, 2);
    m.params().get("head.bias") = random_tensor({8}, 9);
    for (bool training : {true, false}) {
      Tape t;
      const Tensor z = run(m, t, Tensor(Shape{3, 1, 32, 32}), training).logits.value();
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(z[b * 8 + k], m.params().get("head.bias")[k]);
    }
  }
}

TEST(TinyCnn, ForwardIsBitIdenticalAcrossRuns) {
  const TinyCnn m = TinyCnn::build(TinyCnnConfig::desk(8, 24), 4);
  const Tensor x = random_tensor({4, 1, 32, 32}, 1, 0, 1);
  Tape a, b;
  EXPECT_EQ(run(m, a, x, true).logits.value(), run(m, b, x, true).logits.value());
}

TEST(TinyCnn, EvalModeMatchesTrainingWhenRunningStatsEqualBatchStats) {
  TinyCnn m = TinyCnn::build(TinyCnnConfig::desk(4, 8), 7);
  const Tensor x = random_tensor({6, 1, 32, 32}, 2, 0, 1);
  Tape t;
  const ForwardResult tr = run(m, t, x, true);
  for (std::size_t i = 0; i < tr.stats.size(); ++i) {
    m.buffers().get("bn" + std::to_string(i) + ".running_mean") = Tensor(Shape{tr.stats[i].mean.size()}, tr.stats[i].mean);
    m.buffers().get("bn" + std::to_string(i) + ".running_var") = Tensor(Shape{tr.stats[i].var.size()}, tr.stats[i].var);
  }
  Tape e;
  EXPECT_LT(tsupport::max_abs_diff(run(m, e, x, false).logits.value(), tr.logits.value()), 1e-10);
}

TEST(TinyCnn, RunningStatsMomentumUpdate) {
  auto cfg = small_config(true);
  TinyCnn m = TinyCnn::build(cfg, 1);
  std::vector<ad::BatchStats> stats = {{{1.0, 2.0}, {4.0, 0.5}}, {{-1.0, 0.0, 3.0}, {1.0, 2.0, 3.0}}};
  m.update_running_stats(stats, 2);
  // layer 0 sees 2*8*8 = 128 values, layer 1 sees 2*4*4 = 32
  EXPECT_DOUBLE_EQ(m.buffers().get("bn0.running_mean")[1], 0.2);
  EXPECT_DOUBLE_EQ(m.buffers().get("bn0.running_var")[0], 0.9 + 0.1 * 4.0 * 128.0 / 127.0);
  EXPECT_DOUBLE_EQ(m.buffers().get("bn1.running_var")[2], 0.9 + 0.1 * 3.0 * 32.0 / 31.0);
}

TEST(TinyCnn, GradientsMatchFiniteDifferences) {
  for (bool bn : {false, true}) {
    const TinyCnn m = TinyCnn::build(small_config(bn), 3);
    std::vector<Tensor> inputs;
    for (const auto& p : m.params().items()) inputs.push_back(tie_break(p.value, 5, 1e-2));
    const Tensor x = random_tensor({2, 1, 8, 8}, 6, 0, 1);
    const std::size_t y[] = {0, 2};
    auto f = [&](Tape& t, std::span<const Var> v) {
      return ad::cross_entropy(m.forward(t.constant(x), v, true).logits, y);
    };
    const auto r = finite_difference_check(f, inputs, 1e-6);
    EXPECT_TRUE(r.ok) << r.failure;
    EXPECT_LT(r.max_rel_error, 1e-4) << "bn=" << bn << " input " << r.worst_input;
  }
}

TEST(Checkpoint, RoundTripIsExactAndByteStable) {
  TinyCnn m = TinyCnn::build(TinyCnnConfig::desk(8, 24), 3);
  m.buffers().get("bn1.running_var") = random_tensor({16}, 1, 0.5, 2);
  const auto dir = scratch("ckpt");
  save_checkpoint(dir, {&m.params(), &m.buffers()});
  const ParameterSet back = load_checkpoint(dir);
  ASSERT_EQ(back.size(), m.params().size() + m.buffers().size());
  for (const auto& p : m.params().items()) EXPECT_EQ(back.get(p.name), p.value);
  for (const auto& p : m.buffers().items()) EXPECT_EQ(back.get(p.name), p.value);

  std::ifstream man(dir / "manifest.json");
  const auto j = nlohmann::json::parse(man);
  std::size_t offset = 0;
  for (const auto& e : j) {
    EXPECT_EQ(e.at("offset").get<std::size_t>(), offset);
    offset += mct_byte_size(e.at("shape").get<Shape>());
  }
  EXPECT_EQ(std::filesystem::file_size(dir / "tensors.mct"), offset);

  const auto dir2 = scratch("ckpt2");
  save_checkpoint(dir2, {&m.params(), &m.buffers()});
  EXPECT_EQ(slurp(dir / "tensors.mct"), slurp(dir2 / "tensors.mct"));
  EXPECT_EQ(slurp(dir / "manifest.json"), slurp(dir2 / "manifest.json"));
}

TEST(Checkpoint, DetectsCorruption) {
  const TinyCnn m = TinyCnn::build(small_config(true), 1);
  const auto dir = scratch("corrupt");
  save_checkpoint(dir, {&m.params()});
  std::filesystem::resize_file(dir / "tensors.mct", std::filesystem::file_size(dir / "tensors.mct") - 3);
  try {
    load_checkpoint(dir);
    FAIL() << "truncated checkpoint accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_checkpoint(scratch("missing")), std::runtime_error);
}

TEST(TinyCnnConfig, JsonRoundTrip) {
  const auto cfg = TinyCnnConfig::desk(5, 15, 24);
  nlohmann::json j = cfg;
  const auto back = j.get<TinyCnnConfig>();
  EXPECT_EQ(back.feature_channels(), 15u);
  EXPECT_EQ(back.input_size, 24u);
  EXPECT_EQ(back.convs[1].stride, 2u);
  j["input_size"] = 8;
  EXPECT_THROW(j.get<TinyCnnConfig>(), std::invalid_argument);
}
