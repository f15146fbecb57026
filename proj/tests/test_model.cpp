#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "dml/model.hpp"
#include "test_util.hpp"

using namespace dml;
using dml::testing::random_tensor;

namespace {

ModelConfig small_config(std::size_t levels = 3) {
  ModelConfig c;
  c.num_classes = 4;
  c.input_h = c.input_w = 32;
  c.low_level = {{6, 2}, {8, 2}};
  c.seg_channels = {8, 8};
  c.dml_channels = 8;
  c.window_sizes = {5, 3, 1};
  c.levels = 3;
  return c.with_levels(levels);
}

template <typename T>
void expect_bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]) << i;
}

}  // namespace

TEST(ModelConfig, DefaultDeskShapes) {
  ModelConfig c;
  EXPECT_EQ(c.low_stride(), 4u);
  EXPECT_EQ(c.dml_stride(), 8u);
  Model<float> model(c, 1);
  std::mt19937_64 rng(1);
  Graph<float> g;
  g.set_recording(false);
  const auto out = model.forward(g, random_tensor<float>(Shape{2, 3, 96, 96}, rng, 0, 1));
  EXPECT_EQ(out.s.shape(), (Shape{2, 8, 24, 24}));
  ASSERT_EQ(out.m.size(), 3u);
  for (const auto& m : out.m) EXPECT_EQ(m.shape(), (Shape{2, 8, 12, 12}));
  for (const auto& m : out.m_up) EXPECT_EQ(m.shape(), (Shape{2, 8, 24, 24}));
  EXPECT_EQ(out.p.shape(), out.s.shape());
}

TEST(ModelConfig, FullScaleStridePlanPutsMultiLabelAtOneThirtySecond) {
  ModelConfig c;
  c.num_classes = 3;
  c.input_h = c.input_w = 64;
  c.low_level = {{4, 2}, {4, 2}, {4, 2}};
  c.seg_channels = {4};
  c.seg_dilations = {2};
  c.dml_channels = 4;
  c.dml_extra_stride = 4;
  c.window_sizes = {35, 17, 7};
  EXPECT_EQ(c.low_stride(), 8u);
  EXPECT_EQ(c.dml_stride(), 32u);
  Model<float> model(c, 3);
  std::mt19937_64 rng(2);
  Graph<float> g;
  const auto out = model.forward(g, random_tensor<float>(Shape{1, 3, 64, 64}, rng));
  EXPECT_EQ(out.s.shape(), (Shape{1, 3, 8, 8}));
  for (const auto& m : out.m) EXPECT_EQ(m.shape(), (Shape{1, 3, 2, 2}));
}

TEST(ModelConfig, InvalidConfigurationsAreRejected) {
  auto bad = [](auto mutate) {
    ModelConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](ModelConfig& c) { c.window_sizes = {11, 6, 3}; });
  bad([](ModelConfig& c) { c.window_sizes = {3, 5, 11}; });
  bad([](ModelConfig& c) { c.window_sizes = {11, 5}; });
  bad([](ModelConfig& c) { c.input_h = 100; });
  bad([](ModelConfig& c) { c.num_classes = 0; });
  bad([](ModelConfig& c) { c.lambda = -1; });
  bad([](ModelConfig& c) { c.seg_dilations = {1}; });
  bad([](ModelConfig& c) { c.levels = 4; });
}

TEST(ModelConfig, KeyValueRoundTrip) {
  ModelConfig c = small_config(2);
  c.lambda = 0.3;
  EXPECT_EQ(ModelConfig::from_kv(c.to_kv()), c);
  KeyValues kv;
  kv.set("levels", "1");
  ModelConfig d;
  d.apply(kv);
  EXPECT_EQ(d.window_sizes, std::vector<std::size_t>{11});
}

TEST(Forward, BaselineFusionIsSegmentationScore) {
  Model<double> model(small_config(0), 4);
  std::mt19937_64 rng(3);
  Graph<double> g;
  const auto out = model.forward(g, random_tensor<double>(Shape{2, 3, 32, 32}, rng));
  EXPECT_TRUE(out.m.empty());
  expect_bit_equal(out.p, out.s);
}

TEST(Forward, FusionIdentityHoldsExactly) {
  Model<float> model(small_config(), 5);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    Graph<float> g;
    const auto out = model.forward(g, random_tensor<float>(Shape{1, 3, 32, 32}, rng));
    for (std::size_t i = 0; i < out.p.numel(); ++i) {
      float acc = out.s[i];
      for (const auto& m : out.m_up) acc += m[i];
      ASSERT_EQ(out.p[i] - acc, 0.0f);
    }
  }
}

TEST(Forward, ZeroWeightsGiveZeroScores) {
  Model<float> model(small_config(), 6);
  for (auto& p : model.params().all())
    for (auto& v : p.tensor.data()) v = 0.0f;
  std::mt19937_64 rng(5);
  Graph<float> g;
  const auto out = model.forward(g, random_tensor<float>(Shape{1, 3, 32, 32}, rng));
  for (float v : out.s.data()) EXPECT_EQ(v, 0.0f);
  for (const auto& m : out.m)
    for (float v : m.data()) EXPECT_EQ(v, 0.0f);
  for (float v : out.p.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, PerturbingOneBlockOnlyChangesItsOutputs) {
  Model<double> model(small_config(), 7);
  std::mt19937_64 rng(6);
  const auto x = random_tensor<double>(Shape{1, 3, 32, 32}, rng);
  Graph<double> g;
  const auto before = model.forward(g, x);
  for (auto& v : model.params().get("dml1.adapt.bias").tensor.data()) v += 0.5;
  const auto after = model.forward(g, x);
  expect_bit_equal(before.s, after.s);
  expect_bit_equal(before.m[1], after.m[1]);
  expect_bit_equal(before.m[2], after.m[2]);
  bool m0_changed = false, p_changed = false;
  for (std::size_t i = 0; i < before.m[0].numel(); ++i) m0_changed |= before.m[0][i] != after.m[0][i];
  for (std::size_t i = 0; i < before.p.numel(); ++i) p_changed |= before.p[i] != after.p[i];
  EXPECT_TRUE(m0_changed);
  EXPECT_TRUE(p_changed);
}

TEST(Forward, RepeatedPassesAreBitIdentical) {
  Model<float> model(small_config(), 8);
  std::mt19937_64 rng(7);
  const auto x = random_tensor<float>(Shape{2, 3, 32, 32}, rng);
  Graph<float> g1, g2;
  expect_bit_equal(model.forward(g1, x).p, model.forward(g2, x).p);
}

TEST(Forward, SameSeedSameInitialisation) {
  Model<float> a(small_config(), 9), b(small_config(), 9), c(small_config(), 10);
  EXPECT_EQ(a.params().fingerprint(), b.params().fingerprint());
  EXPECT_NE(a.params().fingerprint(), c.params().fingerprint());
}

TEST(Forward, WrongInputShapeIsConfigError) {
  Model<float> model(small_config(), 1);
  Graph<float> g;
  EXPECT_THROW(model.forward(g, Tensor<float>(Shape{1, 3, 32, 16})), ConfigError);
  EXPECT_THROW(model.forward(g, Tensor<float>(Shape{1, 1, 32, 32})), ConfigError);
}

TEST(Forward, BlockMatchesManualRewiringAndPoolingDominatesWindow) {
  Model<double> model(small_config(), 11);
  std::mt19937_64 rng(8);
  const auto x = random_tensor<double>(Shape{1, 3, 32, 32}, rng);
  Graph<double> g;
  const auto out = model.forward(g, x);
  auto& ps = model.params();
  auto conv = [&](const std::string& name, const Tensor<double>& in, Conv2dParams p, bool r) {
    auto y = conv2d(g, in, ps.get(name + ".weight").tensor, ps.get(name + ".bias").tensor, p);
    return r ? relu(g, y) : y;
  };
  auto o = conv("low.1", conv("low.0", x, {2, 1, 1}, true), {2, 1, 1}, true);
  auto scores = conv("dml1.score", conv("dml1.conv", o, {2, 1, 1}, true), {1, 1, 0}, false);
  auto pooled = maxpool2d(g, scores, 5, 1, 2);
  expect_bit_equal(conv("dml1.adapt", pooled, {1, 1, 0}, false), out.m[0]);

  const Shape& s = scores.shape();
  for (std::size_t k = 0; k < s.c; ++k)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t xx = 0; xx < s.w; ++xx)
        for (std::size_t wy = (y >= 2 ? y - 2 : 0); wy <= std::min(y + 2, s.h - 1); ++wy)
          for (std::size_t wx = (xx >= 2 ? xx - 2 : 0); wx <= std::min(xx + 2, s.w - 1); ++wx)
            ASSERT_GE(pooled.at(0, k, y, xx), scores.at(0, k, wy, wx));
}

TEST(Parameters, BaselineIsStrictSubsetWithSharedInitialisation) {
  Model<float> base(small_config(0), 12), full(small_config(3), 12);
  EXPECT_LT(base.params().all().size(), full.params().all().size());
  for (const auto& p : base.params().all()) {
    ASSERT_TRUE(full.params().contains(p.name)) << p.name;
    const auto& q = full.params().get(p.name).tensor;
    ASSERT_EQ(p.tensor.shape(), q.shape());
    for (std::size_t i = 0; i < q.numel(); ++i) ASSERT_EQ(p.tensor[i], q[i]);
  }
}

TEST(Parameters, DeskCountMatchesLayerArithmetic) {
  // low 3*32*9+32, 32*64*9+64; seg 64*96*9+96, 96*96*9+96, 96*8+8;
  // each block 64*64*9+64 + 64*8+8 + 8*8+8.
  const std::size_t expected = 896 + 18496 + 55392 + 83040 + 776 + 3 * (36928 + 520 + 72);
  EXPECT_EQ(Model<float>(ModelConfig{}, 0).params().scalar_count(), expected);
}

TEST(PredictLabels, ConstantArgmaxAndTieRule) {
  Tensor<float> p(Shape{1, 4, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) p.at(0, 2, i / 2, i % 2) = 1.0f;
  const auto masks = predict_labels(p, 8, 8);
  for (auto v : masks.front().values) EXPECT_EQ(v, 2);

  Tensor<float> tie(Shape{1, 4, 1, 1});
  tie.at(0, 0, 0, 0) = 3.0f;
  tie.at(0, 3, 0, 0) = 3.0f;
  EXPECT_EQ(predict_labels(tie, 1, 1).front().values.front(), 0);
}

TEST(PredictLabels, MatchesLoopOracle) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_tensor<double>(Shape{2, 5, 3, 4}, rng);
    const auto masks = predict_labels(p, 12, 16);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t y = 0; y < 12; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
          std::size_t best = 0;
          double bv = -1e300;
          for (std::size_t k = 0; k < 5; ++k)
            if (p.at(n, k, y / 4, x / 4) > bv) bv = p.at(n, k, y / 4, x / 4), best = k;
          ASSERT_EQ(masks[n].at(y, x), best);
        }
  }
}

TEST(PredictLabels, NonIntegerFactorIsConfigError) {
  EXPECT_THROW(predict_labels(Tensor<float>(Shape{1, 2, 3, 3}), 10, 10), ConfigError);
}

TEST(Describe, MatchesGoldenArchitecture) {
  std::ifstream in(std::string(DML_GOLDEN_DIR) + "/architecture.txt");
  ASSERT_TRUE(in) << "missing golden file";
  std::stringstream golden;
  golden << in.rdbuf();
  EXPECT_EQ(Model<float>(ModelConfig{}, 0).describe(), golden.str());
}
