#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "dml/losses.hpp"
#include "test_util.hpp"

using namespace dml;
using dml::testing::random_tensor;
using dml::testing::rel_error;

namespace {

Tensor<double> random_binary(Shape s, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.4);
  std::vector<double> v(s.numel());
  for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
  return Tensor<double>::from(s, std::move(v));
}

std::vector<LabelMask> random_masks(std::size_t n, std::size_t h, std::size_t w, std::size_t k, std::mt19937_64& rng,
                                    double ignore = 0.0) {
  std::uniform_int_distribution<int> cls(0, static_cast<int>(k) - 1);
  std::bernoulli_distribution ign(ignore);
  std::vector<LabelMask> out;
  for (std::size_t i = 0; i < n; ++i) {
    LabelMask m(h, w);
    for (auto& v : m.values) v = ign(rng) ? kIgnoreLabel : static_cast<std::uint8_t>(cls(rng));
    out.push_back(m);
  }
  return out;
}

// Textbook per-element forms, no stabilisation beyond what moderate logits need.
double reference_multilabel(const Tensor<double>& m, const Tensor<double>& y) {
  double acc = 0;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    const double sig = 1.0 / (1.0 + std::exp(-m[i]));
    acc -= y[i] * std::log(sig) + (1 - y[i]) * std::log(1 - sig);
  }
  return acc / static_cast<double>(m.numel());
}

double reference_softmax(const Tensor<double>& p, const std::vector<LabelMask>& masks) {
  const Shape& s = p.shape();
  double acc = 0;
  std::size_t valid = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        const auto label = masks[n].at(y, x);
        if (label == kIgnoreLabel) continue;
        double z = 0;
        for (std::size_t k = 0; k < s.c; ++k) z += std::exp(p.at(n, k, y, x));
        acc -= std::log(std::exp(p.at(n, label, y, x)) / z);
        ++valid;
      }
  return valid ? acc / static_cast<double>(valid) : 0.0;
}

template <typename F>
double fd_check(Tensor<double> x, F loss_of) {
  Graph<double> g;
  backward(loss_of(g, x), g);
  std::vector<double> analytic(x.grad().begin(), x.grad().end());
  double worst = 0;
  const double h = 1e-5;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    Graph<double> gp;
    gp.set_recording(false);
    x.data()[i] = orig + h;
    const double up = loss_of(gp, x).item();
    x.data()[i] = orig - h;
    const double down = loss_of(gp, x).item();
    x.data()[i] = orig;
    worst = std::max(worst, rel_error(analytic[i], (up - down) / (2 * h), 1e-10));
  }
  return worst;
}

template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  Shape s = a.shape();
  s.n += b.shape().n;
  std::vector<T> v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return Tensor<T>::from(s, std::move(v));
}

// Moves channel perm[k] to position k.
Tensor<double> permute_channels(const Tensor<double>& t, const std::vector<std::size_t>& perm) {
  const Shape& s = t.shape();
  Tensor<double> out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t k = 0; k < s.c; ++k)
      for (std::size_t i = 0; i < s.plane(); ++i) out[(n * s.c + k) * s.plane() + i] = t[(n * s.c + perm[k]) * s.plane() + i];
  return out;
}

}  // namespace

TEST(MultilabelNll, ZeroLogitsGiveLn2) {
  std::mt19937_64 rng(1);
  Graph<double> g;
  const Tensor<double> m(Shape{2, 3, 4, 4});
  EXPECT_NEAR(multilabel_nll(g, m, random_binary(m.shape(), rng)).item(), std::log(2.0), 1e-12);
  Graph<float> gf;
  const Tensor<float> mf(Shape{1, 8, 6, 6});
  EXPECT_NEAR(multilabel_nll(gf, mf, Tensor<float>(mf.shape(), 1.0f)).item(), std::log(2.0), 1e-6);
}

TEST(MultilabelNll, SaturatedCorrectIsNearZero) {
  std::mt19937_64 rng(2);
  const auto y = random_binary(Shape{2, 3, 4, 4}, rng);
  Tensor<double> m(y.shape());
  for (std::size_t i = 0; i < m.numel(); ++i) m[i] = y[i] > 0.5 ? 40.0 : -40.0;
  Graph<double> g;
  const double loss = multilabel_nll(g, m, y).item();
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-15);
}

TEST(MultilabelNll, HugeLogitsDoNotOverflow) {
  Graph<double> g;
  auto m = Tensor<double>::from(Shape{1, 2, 1, 1}, {1e4, -1e4});
  auto y = Tensor<double>::from(Shape{1, 2, 1, 1}, {0.0, 1.0});
  const double loss = multilabel_nll(g, m, y).item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, 1e4, 1e-9);
}

TEST(MultilabelNll, MatchesScalarReference) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_tensor<double>(Shape{2, 3, 4, 4}, rng, -4, 4);
    const auto y = random_binary(m.shape(), rng);
    Graph<double> g;
    EXPECT_LE(rel_error(multilabel_nll(g, m, y).item(), reference_multilabel(m, y)), 1e-12);
  }
}

TEST(MultilabelNll, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto y = random_binary(Shape{2, 3, 3, 3}, rng);
    auto m = random_tensor<double>(y.shape(), rng, -3, 3, true);
    EXPECT_LE(fd_check(m, [&](Graph<double>& g, const Tensor<double>& x) { return multilabel_nll(g, x, y); }), 1e-6);
  }
}

TEST(MultilabelNll, ShapeMismatchIsConfigError) {
  Graph<double> g;
  EXPECT_THROW(multilabel_nll(g, Tensor<double>(Shape{1, 2, 2, 2}), Tensor<double>(Shape{1, 3, 2, 2})), ConfigError);
}

TEST(MultilabelNll, AcceptsTargetBatch) {
  const auto t = gen_multilabel_gt(LabelMask(4, 4, 1), GtSpec{2, 1, 2, {1}}).front();
  Graph<double> g;
  const Tensor<double> m(Shape{2, 2, 2, 2});
  EXPECT_NEAR(multilabel_nll(g, m, std::vector<const MultiLabelTarget*>{&t, &t}).item(), std::log(2.0), 1e-15);
}

TEST(SoftmaxNll, ZeroLogitsGiveLnK) {
  std::mt19937_64 rng(5);
  Graph<double> g;
  const Tensor<double> p(Shape{2, 4, 3, 3});
  const auto r = softmax_nll(g, p, random_masks(2, 3, 3, 4, rng));
  EXPECT_NEAR(r.value.item(), std::log(4.0), 1e-12);
  EXPECT_EQ(r.valid_pixels, 18u);
  EXPECT_FALSE(r.no_valid_pixels);
}

TEST(SoftmaxNll, SaturatedTrueClassIsNearZero) {
  std::mt19937_64 rng(6);
  const auto masks = random_masks(2, 4, 4, 5, rng);
  Tensor<double> p(Shape{2, 5, 4, 4});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) p.at(n, masks[n].at(y, x), y, x) = 40.0;
  Graph<double> g;
  const double loss = softmax_nll(g, p, masks).value.item();
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-15);
}

TEST(SoftmaxNll, MatchesScalarReference) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_tensor<double>(Shape{2, 4, 5, 3}, rng, -5, 5);
    const auto masks = random_masks(2, 5, 3, 4, rng, 0.2);
    Graph<double> g;
    EXPECT_LE(rel_error(softmax_nll(g, p, masks).value.item(), reference_softmax(p, masks)), 1e-12);
  }
}

TEST(SoftmaxNll, HalfIgnoredMaskUsesValidPixelsOnly) {
  std::mt19937_64 rng(8);
  const auto p = random_tensor<double>(Shape{1, 3, 4, 4}, rng, -2, 2);
  auto masks = random_masks(1, 4, 4, 3, rng);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 4; ++x) masks[0].at(y, x) = kIgnoreLabel;
  // Restricting to the valid rows gives a 2x4 problem with identical content.
  Tensor<double> lower(Shape{1, 3, 2, 4});
  LabelMask lower_mask(2, 4);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        lower.at(0, k, y, x) = p.at(0, k, y + 2, x);
        lower_mask.at(y, x) = masks[0].at(y + 2, x);
      }
  Graph<double> g;
  const auto full = softmax_nll(g, p, masks);
  EXPECT_EQ(full.valid_pixels, 8u);
  EXPECT_LE(rel_error(full.value.item(), softmax_nll(g, lower, {lower_mask}).value.item()), 1e-15);
}

TEST(SoftmaxNll, GradientMatchesFiniteDifferencesAndIsZeroAtIgnore) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto masks = random_masks(2, 3, 3, 4, rng, 0.3);
    auto p = random_tensor<double>(Shape{2, 4, 3, 3}, rng, -3, 3, true);
    EXPECT_LE(fd_check(p, [&](Graph<double>& g, const Tensor<double>& x) { return softmax_nll(g, x, masks).value; }),
              1e-6);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 9; ++i)
        if (masks[n].values[i] == kIgnoreLabel) {
          for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(p.grad()[(n * 4 + k) * 9 + i], 0.0);
        }
  }
}

TEST(SoftmaxNll, AllIgnoredGivesZeroAndFlag) {
  Graph<double> g;
  auto p = Tensor<double>(Shape{1, 3, 2, 2}, 1.0, true);
  const auto r = softmax_nll(g, p, {LabelMask(2, 2, kIgnoreLabel)});
  EXPECT_EQ(r.value.item(), 0.0);
  EXPECT_TRUE(r.no_valid_pixels);
  EXPECT_EQ(r.valid_pixels, 0u);
  backward(r.value, g);
  for (double v : p.grad()) EXPECT_EQ(v, 0.0);
}

TEST(SoftmaxNll, MaskShapeMismatchIsConfigError) {
  Graph<double> g;
  EXPECT_THROW(softmax_nll(g, Tensor<double>(Shape{1, 3, 2, 2}), {LabelMask(2, 3)}), ConfigError);
  EXPECT_THROW(softmax_nll(g, Tensor<double>(Shape{2, 3, 2, 2}), {LabelMask(2, 2)}), ConfigError);
}

TEST(LossProperties, DuplicatingTheBatchLeavesLossesUnchanged) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_tensor<double>(Shape{2, 3, 4, 4}, rng, -3, 3);
    const auto y = random_binary(m.shape(), rng);
    const auto p = random_tensor<double>(Shape{2, 3, 4, 4}, rng, -3, 3);
    auto masks = random_masks(2, 4, 4, 3, rng, 0.2);
    Graph<double> g;
    const double ml = multilabel_nll(g, m, y).item();
    const double ml2 = multilabel_nll(g, concat_batch(m, m), concat_batch(y, y)).item();
    EXPECT_LE(rel_error(ml, ml2), 1e-12);
    const double sl = softmax_nll(g, p, masks).value.item();
    auto masks2 = masks;
    masks2.insert(masks2.end(), masks.begin(), masks.end());
    EXPECT_LE(rel_error(sl, softmax_nll(g, concat_batch(p, p), masks2).value.item()), 1e-12);
  }
}

TEST(LossProperties, ClassPermutationInvariance) {
  std::mt19937_64 rng(11);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<std::size_t> inverse(4);
  for (std::size_t k = 0; k < 4; ++k) inverse[perm[k]] = k;
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_tensor<double>(Shape{1, 4, 3, 3}, rng, -3, 3);
    const auto y = random_binary(m.shape(), rng);
    auto masks = random_masks(1, 3, 3, 4, rng, 0.1);
    Graph<double> g;
    EXPECT_LE(rel_error(multilabel_nll(g, m, y).item(),
                        multilabel_nll(g, permute_channels(m, perm), permute_channels(y, perm)).item()),
              1e-12);
    auto relabeled = masks;
    for (auto& v : relabeled[0].values)
      if (v != kIgnoreLabel) v = static_cast<std::uint8_t>(inverse[v]);
    EXPECT_LE(rel_error(softmax_nll(g, m, masks).value.item(),
                        softmax_nll(g, permute_channels(m, perm), relabeled).value.item()),
              1e-12);
  }
}

TEST(LossProperties, NonNegative) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_tensor<double>(Shape{1, 3, 2, 2}, rng, -50, 50);
    Graph<double> g;
    EXPECT_GE(multilabel_nll(g, m, random_binary(m.shape(), rng)).item(), 0.0);
    EXPECT_GE(softmax_nll(g, m, random_masks(1, 2, 2, 3, rng)).value.item(), 0.0);
  }
}

TEST(TotalObjective, Examples) {
  EXPECT_EQ(total_objective(1.5, {0.2, 0.3, 0.4}, 0.0).total, 1.5);
  EXPECT_DOUBLE_EQ(total_objective(1.5, {0.2, 0.3, 0.4}, 1.0).total, 1.5 + 0.2 + 0.3 + 0.4);
  EXPECT_DOUBLE_EQ(total_objective(1.5, {0.2}, 0.5).total, 1.5 + 0.5 * 0.2);
  EXPECT_EQ(total_objective(0.7, {}, 1.0).total, 0.7);
}

TEST(TotalObjective, GraphObjectiveAgreesAndDistributesGradient) {
  Graph<double> g;
  auto seg = Tensor<double>::scalar(1.0, true);
  std::vector<Tensor<double>> mul{Tensor<double>::scalar(0.25, true), Tensor<double>::scalar(0.5, true)};
  const auto total = objective(g, seg, mul, 2.0);
  EXPECT_DOUBLE_EQ(total.item(), total_objective(1.0, {0.25, 0.5}, 2.0).total);
  backward(total, g);
  EXPECT_EQ(seg.grad()[0], 1.0);
  EXPECT_EQ(mul[0].grad()[0], 2.0);
  EXPECT_EQ(mul[1].grad()[0], 2.0);
}

TEST(LossReport, CsvLayout) {
  EXPECT_EQ(LossReport::csv_header(3), "iter,l_seg,l_mul_1,l_mul_2,l_mul_3,total");
  EXPECT_EQ(LossReport::csv_header(0), "iter,l_seg,total");
  EXPECT_EQ(total_objective(0.5, {0.25}, 1.0).csv_row(7), "7,0.5,0.25,0.75");
}
