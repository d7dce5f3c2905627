#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "wsd/gradcheck.hpp"
#include "wsd/head.hpp"

namespace wsd {
namespace {

Matrix<double> row_matrix(std::initializer_list<double> values) {
  Matrix<double> m(1, values.size());
  std::copy(values.begin(), values.end(), m.flat().begin());
  return m;
}

TEST(ClassSoftmax, UniformRow) {
  const auto p = class_softmax(row_matrix({0, 0, 0, 0}));
  for (double x : p.flat()) EXPECT_DOUBLE_EQ(x, 0.25);
}

TEST(ClassSoftmax, LnTwoRow) {
  const auto p = class_softmax(row_matrix({0, std::log(2.0)}));
  EXPECT_NEAR(p(0, 0), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(p(0, 1), 2.0 / 3.0, 1e-15);
}

TEST(ClassSoftmax, ShiftInvariantAndStable) {
  const auto a = class_softmax(row_matrix({0.3, -1.2, 2.0}));
  const auto b = class_softmax(row_matrix({1000.3, 998.8, 1002.0}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a(0, c), b(0, c), 1e-12);
}

TEST(SelectRegions, PicksArgmax) {
  Matrix<double> p(3, 1);
  p(0, 0) = 0.1, p(1, 0) = 0.5, p(2, 0) = 0.4;
  const auto h = select_regions(p, {1}, 1, 3);
  EXPECT_EQ(h.column(0), (std::vector<std::uint8_t>{0, 1, 0}));
}

TEST(SelectRegions, BudgetAboveNSelectsAll) {
  Matrix<double> p(3, 2, 0.5);
  const auto h = select_regions(p, {1, 0}, 10, 5);
  for (auto x : h.flat()) EXPECT_EQ(x, 1);
}

TEST(SelectRegions, TiesGoToLowerIndex) {
  Matrix<double> p(3, 1);
  p(0, 0) = 0.5, p(1, 0) = 0.5, p(2, 0) = 0.0;
  EXPECT_EQ(select_regions(p, {0}, 3, 1).column(0), (std::vector<std::uint8_t>{1, 0, 0}));
}

TEST(SelectRegions, UsesPositiveOrNegativeBudgetPerClass) {
  Matrix<double> p(4, 2);
  for (std::size_t i = 0; i < 4; ++i) p(i, 0) = p(i, 1) = 0.1 * static_cast<double>(i);
  const auto h = select_regions(p, {1, 0}, 3, 1);
  EXPECT_EQ(h.column(0), (std::vector<std::uint8_t>{0, 1, 1, 1}));
  EXPECT_EQ(h.column(1), (std::vector<std::uint8_t>{0, 0, 0, 1}));
  EXPECT_THROW(select_regions(p, {1, 0}, 0, 1), InputError);
}

TEST(SelectRegions, MatchesBruteForceArgmaxWithTies) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 200, c = 1 + rng() % 6;
    Matrix<double> p(n, c);
    for (double& x : p.flat()) x = static_cast<double>(rng() % 7) / 7.0;  // many ties
    LabelVector y(c);
    for (int& v : y) v = static_cast<int>(rng() % 2);
    const std::size_t mp = 1 + rng() % (n + 3), mn = 1 + rng() % (n + 3);
    const auto h = select_regions(p, y, mp, mn);
    for (std::size_t k = 0; k < c; ++k) {
      const auto want = oracle::select_column(p.column(k), y[k] ? mp : mn);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        ASSERT_EQ(h(i, k), want[i]);
        count += h(i, k);
      }
      EXPECT_EQ(count, std::min(n, y[k] ? mp : mn));
    }
  }
}

TEST(MaskedSoftmax, UniformOverSelected) {
  const std::vector<double> z{1, 1, 1, 1};
  const std::vector<std::uint8_t> h{1, 1, 1, 1};
  for (double v : masked_softmax<double>(z, h)) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(MaskedSoftmax, MaskedEntryExcluded) {
  const std::vector<double> z{0, std::log(2.0), 5};
  const std::vector<std::uint8_t> h{1, 1, 0};
  const auto v = masked_softmax<double>(z, h);
  EXPECT_NEAR(v[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(v[1], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(v[2], 0.0);
}

TEST(MaskedSoftmax, SingleSelectedRegion) {
  const std::vector<double> z{-3, 400, 9};
  const std::vector<std::uint8_t> h{0, 1, 0};
  EXPECT_EQ(masked_softmax<double>(z, h), (std::vector<double>{0, 1, 0}));
}

TEST(MaskedSoftmax, EmptyMaskIsContractViolation) {
  const std::vector<double> z{1, 2};
  const std::vector<std::uint8_t> h{0, 0};
  EXPECT_THROW(masked_softmax<double>(z, h), InputError);
}

TEST(Aggregate, Examples) {
  const std::vector<double> v1{1, 0}, p1{0.7, 0.2};
  EXPECT_DOUBLE_EQ(aggregate<double>(v1, p1), 0.7);
  const std::vector<double> v2{0.5, 0.5}, p2{0.4, 0.8};
  EXPECT_NEAR(aggregate<double>(v2, p2), 0.6, 1e-15);
  const std::vector<double> v3{1, 0}, p3{1, 0};
  EXPECT_DOUBLE_EQ(aggregate<double>(v3, p3), 1 - 1e-12);
}

TEST(ImageLoss, Examples) {
  const double eps = 1e-12;
  const std::vector<double> hi{1 - eps}, lo{eps}, half{0.5};
  EXPECT_NEAR(image_loss<double>({1}, hi), 0.0, 1e-11);
  EXPECT_NEAR(image_loss<double>({0}, lo), 0.0, 1e-11);
  EXPECT_NEAR(image_loss<double>({1}, half), std::log(2.0), 1e-15);
}

TEST(ForwardImage, SingleRegionSingleClassIsDegenerate) {
  HeadParams<double> params = HeadParams<double>::zeros(1, 3);
  params.w_cls(0, 1) = 2.5;
  params.w_imp(0, 2) = -1.0;
  Matrix<double> feats(1, 3, 0.7);
  const auto t = forward_image(params, feats, {1}, 1, 1);
  EXPECT_DOUBLE_EQ(t.p(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(t.v(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(t.f[0], 1.0 - 1e-12);
  EXPECT_NEAR(t.loss, 0.0, 1e-11);
}

TEST(ForwardImage, ZeroParamsUniformCase) {
  const auto params = HeadParams<double>::zeros(2, 3);
  Matrix<double> feats(4, 3);
  for (std::size_t e = 0; e < feats.size(); ++e) feats.flat()[e] = 0.1 * static_cast<double>(e);
  const auto t = forward_image(params, feats, {1, 0}, 4, 4);
  for (double x : t.p.flat()) EXPECT_DOUBLE_EQ(x, 0.5);
  for (double x : t.v.flat()) EXPECT_DOUBLE_EQ(x, 0.25);
  EXPECT_DOUBLE_EQ(t.f[0], 0.5);
  EXPECT_DOUBLE_EQ(t.f[1], 0.5);
  EXPECT_NEAR(t.loss, 2.0 * std::log(2.0), 1e-15);
}

TEST(ForwardImage, ShapeMismatchIsInputError) {
  const auto params = HeadParams<double>::zeros(2, 3);
  EXPECT_THROW(forward_image(params, Matrix<double>(4, 2), {1, 0}, 1, 1), InputError);
  EXPECT_THROW(forward_image(params, Matrix<double>(4, 3), {1}, 1, 1), InputError);
  EXPECT_THROW(forward_image(params, Matrix<double>(0, 3), {1, 0}, 1, 1), InputError);
}

void expect_trace_invariants(const ForwardTrace<double>& t) {
  for (std::size_t i = 0; i < t.p.rows(); ++i) {
    double s = 0;
    for (double x : t.p.row(i)) s += x;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  for (std::size_t c = 0; c < t.v.cols(); ++c) {
    double s = 0;
    for (std::size_t i = 0; i < t.v.rows(); ++i) {
      if (t.h(i, c)) s += t.v(i, c);
      else EXPECT_EQ(t.v(i, c), 0.0);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
    EXPECT_GE(t.f[c], t.epsilon);
    EXPECT_LE(t.f[c], 1.0 - t.epsilon);
  }
}

TEST(ForwardImage, TraceInvariantsOnRandomInstances) {
  Rng rng(17);
  const GradCheckSizes sizes{40, 8, 16, 0};
  for (int k = 0; k < 200; ++k) {
    const GradInstance inst = random_grad_instance(rng, sizes);
    expect_trace_invariants(forward_image(inst.params, inst.feats, inst.labels, inst.m_pos, inst.m_neg));
  }
}

TEST(ForwardImage, AllRegionBudgetsMatchUnmaskedModel) {
  Rng rng(23);
  for (int k = 0; k < 50; ++k) {
    const GradInstance inst = random_grad_instance(rng, {});
    const std::size_t n = inst.feats.rows();
    const auto selected = forward_image(inst.params, inst.feats, inst.labels, n, n);
    const auto unmasked = forward_with_mask(inst.params, inst.feats, inst.labels,
                                            SelectionMask(n, inst.params.classes(), 1));
    EXPECT_EQ(selected.loss, unmasked.loss);
    EXPECT_EQ(selected.v, unmasked.v);
  }
}

TEST(ForwardImage, LossInvariantToRegionPermutation) {
  Rng rng(29);
  for (int k = 0; k < 50; ++k) {
    const GradInstance inst = random_grad_instance(rng, {});
    const std::size_t n = inst.feats.rows();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix<double> shuffled(n, inst.feats.cols());
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(inst.feats.row(perm[i]).begin(), inst.feats.row(perm[i]).end(), shuffled.row(i).begin());
    }
    const double a = forward_image(inst.params, inst.feats, inst.labels, inst.m_pos, inst.m_neg).loss;
    const double b = forward_image(inst.params, shuffled, inst.labels, inst.m_pos, inst.m_neg).loss;
    EXPECT_NEAR(a, b, 1e-12 * std::max(1.0, std::abs(a)));
  }
}

TEST(BackwardImage, UniformCaseSignPattern) {
  const auto params = HeadParams<double>::zeros(2, 3);
  Matrix<double> feats(4, 3, 1.0);
  const LabelVector y{1, 0};
  const auto t = forward_image(params, feats, y, 4, 4);
  const auto g = backward_image(t, params, feats, y);
  // dL/df = (-2, 2); dL/dz per region = (-1/4, 1/4); summed over 4 regions.
  EXPECT_NEAR(g.b_cls[0], -1.0, 1e-15);
  EXPECT_NEAR(g.b_cls[1], 1.0, 1e-15);
  EXPECT_NEAR(g.b_imp[0], 0.0, 1e-15);
  EXPECT_NEAR(g.b_imp[1], 0.0, 1e-15);
}

TEST(BackwardImage, MatchesFiniteDifferences) {
  const GradCheckReport rep = run_gradcheck(1, {});
  EXPECT_EQ(rep.instances, 100u);
  EXPECT_GT(rep.positive_labels, 0u);
  EXPECT_GT(rep.negative_labels, 0u);
  EXPECT_LT(rep.max_rel_error, 1e-4);
  EXPECT_TRUE(rep.passed);
}

TEST(BackwardImage, SignFlipIsDetected) {
  const auto rep = run_gradcheck(1, {}, [](HeadParams<double>& g) {
    for (double& x : g.w_imp.flat()) x = -x;
  });
  EXPECT_FALSE(rep.passed);
}

TEST(BackwardImage, UnselectedRegionsAreInert) {
  Rng rng(31);
  int checked = 0;
  for (int k = 0; k < 300 && checked < 50; ++k) {
    GradInstance inst = random_grad_instance(rng, {});
    const auto t = forward_image(inst.params, inst.feats, inst.labels, inst.m_pos, inst.m_neg);
    const auto g = backward_image(t, inst.params, inst.feats, inst.labels);
    for (std::size_t i = 0; i < inst.feats.rows(); ++i) {
      bool any = false;
      for (std::size_t c = 0; c < inst.params.classes(); ++c) any = any || t.h(i, c);
      if (any) continue;
      Matrix<double> zeroed = inst.feats;
      for (double& x : zeroed.row(i)) x = 0.0;
      EXPECT_EQ(backward_image(t, inst.params, zeroed, inst.labels), g);
      ++checked;
    }
  }
  EXPECT_GT(checked, 0);
}

TEST(BackwardImage, SmallStepDoesNotIncreaseFrozenMaskLoss) {
  Rng rng(37);
  for (int k = 0; k < 100; ++k) {
    const GradInstance inst = random_grad_instance(rng, {});
    const auto t = forward_image(inst.params, inst.feats, inst.labels, inst.m_pos, inst.m_neg);
    const auto g = backward_image(t, inst.params, inst.feats, inst.labels);
    HeadParams<double> moved = inst.params;
    auto mb = moved.blocks();
    const auto gb = g.blocks();
    for (std::size_t b = 0; b < mb.size(); ++b) {
      for (std::size_t e = 0; e < mb[b].size(); ++e) mb[b][e] -= 1e-6 * gb[b][e];
    }
    const double after = forward_with_mask(moved, inst.feats, inst.labels, t.h).loss;
    EXPECT_LE(after, t.loss + 1e-12);
  }
}

// Closed form for one region, two classes, y = (1, 0):
// loss = 2 log(1 + exp(z1 - z0)), dloss/db0 = -2 sigmoid(z1 - z0).
double closed_form_db0(const HeadParams<double>& params, double x) {
  const double z0 = params.w_cls(0, 0) * x + params.b_cls[0];
  const double z1 = params.w_cls(1, 0) * x + params.b_cls[1];
  return -2.0 / (1.0 + std::exp(z0 - z1));
}

TEST(FiniteDiffGrads, HandLossFixture) {
  HeadParams<double> params = HeadParams<double>::zeros(2, 1);
  params.w_cls(0, 0) = 0.4;
  params.w_cls(1, 0) = -0.3;
  params.b_cls[1] = 0.2;
  Matrix<double> feats(1, 1, 1.5);
  const auto fd = finite_diff_grads(params, feats, {1, 0}, 1, 1);
  EXPECT_NEAR(fd.b_cls[0], closed_form_db0(params, 1.5), 1e-8);
  EXPECT_NEAR(fd.b_cls[1], -closed_form_db0(params, 1.5), 1e-8);
  EXPECT_THROW(finite_diff_grads(params, feats, {1, 0}, 1, 1, 0.0), InputError);
}

TEST(FiniteDiffGrads, CentralDifferenceIsSecondOrder) {
  HeadParams<double> params = HeadParams<double>::zeros(2, 1);
  params.w_cls(0, 0) = 0.4;
  params.w_cls(1, 0) = -0.3;
  Matrix<double> feats(1, 1, 1.5);
  const double exact = closed_form_db0(params, 1.5);
  const double e1 = std::abs(finite_diff_grads(params, feats, {1, 0}, 1, 1, 0.2).b_cls[0] - exact);
  const double e2 = std::abs(finite_diff_grads(params, feats, {1, 0}, 1, 1, 0.1).b_cls[0] - exact);
  EXPECT_GT(e1 / e2, 3.5);
  EXPECT_LT(e1 / e2, 4.5);
}

TEST(FiniteDiffGrads, DegenerateInstanceHasZeroGradient) {
  const GradCheckReport rep = run_gradcheck(4, {1, 1, 4, 20});
  EXPECT_TRUE(rep.passed);
  EXPECT_EQ(rep.max_rel_error, 0.0);
}

}  // namespace
}  // namespace wsd
