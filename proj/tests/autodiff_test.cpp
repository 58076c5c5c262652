// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "weakdns/autodiff.hpp"

namespace weakdns {
namespace {

using ad::Shape;
using T = ad::Tensor<double>;
using testing::gradcheck;
using testing::random_tensor;
using testing::random_tensor_away_from_zero;
using testing::weighted_sum;

constexpr double kTol = 1e-3;

void expect_passes(const testing::GradCheckResult& r, const char* op) {
  EXPECT_TRUE(r.passed(kTol)) << op << ": max rel " << r.max_rel_error << " (" << r.worst << "), small abs "
                              << r.max_abs_error_small;
}

TEST(AutodiffExamples, GateValues) {
  EXPECT_NEAR(ad::clamp_scale_gate(T::scalar(0.0)).item(), 2.84, 1e-12);
  for (double x : {10.0, 20.0, 50.0, 1e3, 1e30}) {
    const double y = ad::clamp_scale_gate(T::scalar(x)).item();
    EXPECT_LT(y, 4.64);
    EXPECT_GT(y, 4.63);
  }
  for (double x : {-10.0, -1e3, -1e30}) {
    const double y = ad::clamp_scale_gate(T::scalar(x)).item();
    EXPECT_GT(y, 1.04);
    EXPECT_LT(y, 1.05);
  }
  // Float rounding must not reach the endpoints either.
  using F = ad::Tensor<float>;
  EXPECT_LT(ad::clamp_scale_gate(F::scalar(1e6f)).item(), 4.64f);
  EXPECT_GT(ad::clamp_scale_gate(F::scalar(-1e6f)).item(), 1.04f);
}

TEST(AutodiffExamples, IdentityKernelConvolution) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor(Shape{1, 1, 3, 3}, rng);
  const auto w = T::constant(Shape{1, 1, 1, 1}, {1.0});
  const auto y = ad::conv2d(x, w, T());
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(AutodiffExamples, SumOfSquaresGradient) {
  auto p = T::parameter(Shape{3}, {1, 2, 3});
  ad::backward(ad::sum(ad::square(p)));
  EXPECT_EQ(std::vector<double>(p.grad().begin(), p.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(AutodiffExamples, GradientsAccumulateUntilZeroed) {
  std::mt19937_64 rng(2);
  auto p = random_tensor(Shape{2, 3}, rng);
  p.set_requires_grad(true);
  auto q = random_tensor(Shape{3, 2}, rng);
  auto loss = [&] { return ad::sum(ad::tanh(ad::matmul(p, q))); };
  ad::backward(loss());
  const std::vector<double> once(p.grad().begin(), p.grad().end());
  ad::backward(loss());
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(p.grad()[i], 2 * once[i]);
  p.zero_grad();
  for (double g : p.grad()) EXPECT_EQ(g, 0.0);
}

TEST(AutodiffExamples, BackwardRejectsNonScalar) {
  auto p = T::parameter(Shape{3}, {1, 2, 3});
  EXPECT_THROW(ad::backward(ad::square(p)), DomainError);
}

TEST(AutodiffExamples, ShapeErrorsNameTheOp) {
  const auto a = T::zeros(Shape{2, 3});
  const auto b = T::zeros(Shape{3, 2});
  try {
    ad::add(a, b);
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(ad::matmul(a, a), DomainError);
  EXPECT_THROW(ad::conv2d(T::zeros(Shape{1, 2, 4, 4}), T::zeros(Shape{1, 3, 3, 3}), T()), DomainError);
  EXPECT_THROW(ad::conv2d(T::zeros(Shape{1, 2, 4, 4}), T::zeros(Shape{1, 2, 2, 3}), T()), DomainError);
  EXPECT_THROW(ad::slice(a, 1, 2, 2), DomainError);
  EXPECT_THROW(ad::concat<double>({a, b}, 0), DomainError);
  EXPECT_THROW(ad::reshape(a, Shape{5}), DomainError);
}

TEST(AutodiffGraph, SharedSubexpressionVisitedOnce) {
  auto p = T::parameter(Shape{1}, {3.0});
  const auto s = ad::square(p);          // 9, ds/dp = 6
  const auto loss = ad::sum(ad::add(s, ad::mul(s, s)));  // s + s^2
  const auto order = ad::topological_order(loss.node());
  std::set<const void*> unique(order.begin(), order.end());
  EXPECT_EQ(unique.size(), order.size());
  ad::backward(loss);
  EXPECT_DOUBLE_EQ(p.grad()[0], (1 + 2 * 9.0) * 6.0);
}

TEST(AutodiffGraph, FrozenLeafGetsNoGradient) {
  auto p = T::parameter(Shape{2}, {1, 2});
  auto q = T::parameter(Shape{2}, {3, 4});
  q.set_requires_grad(false);
  ad::backward(ad::sum(ad::mul(p, q)));
  EXPECT_EQ(p.grad()[0], 3.0);
  EXPECT_TRUE(q.grad().empty() || q.grad()[0] == 0.0);
}

TEST(AutodiffGraph, ForwardIsBitDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(9);
    const auto x = random_tensor(Shape{1, 3, 7, 20}, rng);
    const auto w = random_tensor(Shape{4, 3, 3, 5}, rng);
    const auto b = random_tensor(Shape{4}, rng);
    const auto y = ad::conv2d(ad::Tensor<float>::constant(x.shape(), std::vector<float>(x.data().begin(), x.data().end())),
                              ad::Tensor<float>::constant(w.shape(), std::vector<float>(w.data().begin(), w.data().end())),
                              ad::Tensor<float>::constant(b.shape(), std::vector<float>(b.data().begin(), b.data().end())),
                              {1, 2});
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------------------
// Finite-difference checks, one per op.

TEST(AutodiffGradcheck, ElementwiseBinary) {
  std::mt19937_64 rng(10);
  auto a = random_tensor(Shape{2, 5}, rng);
  auto b = random_tensor(Shape{2, 5}, rng);
  expect_passes(gradcheck({a, b}, [&] { return weighted_sum(ad::add(a, b), 1); }, 20, 1), "add");
  expect_passes(gradcheck({a, b}, [&] { return weighted_sum(ad::sub(a, b), 2); }, 20, 2), "sub");
  expect_passes(gradcheck({a, b}, [&] { return weighted_sum(ad::mul(a, b), 3); }, 20, 3), "mul");
  auto c = random_tensor(Shape{2, 5}, rng);
  // Keep |a - c| away from zero so the max switch is stable under eps.
  for (std::size_t i = 0; i < 10; ++i) c.mutable_data()[i] = a[i] + ((i % 2) ? 0.3 : -0.3);
  expect_passes(gradcheck({a, c}, [&] { return weighted_sum(ad::maximum(a, c), 4); }, 20, 4), "maximum");
}

TEST(AutodiffGradcheck, ElementwiseUnary) {
  std::mt19937_64 rng(11);
  auto x = random_tensor_away_from_zero(Shape{3, 4}, rng);
  expect_passes(gradcheck({x}, [&] { return weighted_sum(ad::scale(x, 1.7), 5); }, 12, 5), "scale");
  expect_passes(gradcheck({x}, [&] { return weighted_sum(ad::add_scalar(x, -0.4), 6); }, 12, 6), "add_scalar");
  expect_passes(gradcheck({x}, [&] { return weighted_sum(ad::square(x), 7); }, 12, 7), "square");
  expect_passes(gradcheck({x}, [&] { return weighted_sum(ad::relu(x), 8); }, 12, 8), "relu");
  expect_passes(gradcheck({x}, [&] { return weighted_sum(ad::sigmoid(ad::scale(x, 3.0)), 9); }, 12, 9), "sigmoid");
  expect_passes(gradcheck({x}, [&] { return weighted_sum(ad::tanh(ad::scale(x, 2.0)), 10); }, 12, 10), "tanh");
  expect_passes(gradcheck({x}, [&] { return weighted_sum(ad::clamp_scale_gate(ad::scale(x, 4.0)), 11); }, 12, 11),
                "clamp_scale_gate");
}

TEST(AutodiffGradcheck, ComplexHelpers) {
  std::mt19937_64 rng(12);
  auto re = random_tensor_away_from_zero(Shape{1, 1, 3, 4}, rng, 0.1);
  auto im = random_tensor_away_from_zero(Shape{1, 1, 3, 4}, rng, 0.1);
  expect_passes(gradcheck({re, im}, [&] { return weighted_sum(ad::complex_abs(re, im), 12); }, 24, 12),
                "complex_abs");
  // tanh_ratio across the series branch, the direct branch and saturation.
  auto a = T::constant(Shape{8}, {0.01, 0.03, 0.049, 0.2, 0.9, 2.5, 6.0, 12.0});
  expect_passes(gradcheck({a}, [&] { return weighted_sum(ad::tanh_ratio(a), 13); }, 8, 13), "tanh_ratio");
}

TEST(AutodiffGradcheck, Reductions) {
  std::mt19937_64 rng(13);
  auto x = random_tensor(Shape{2, 3, 5, 4}, rng);
  expect_passes(gradcheck({x}, [&] { return ad::sum(ad::square(x)); }, 20, 14), "sum");
  expect_passes(gradcheck({x}, [&] { return ad::mean(ad::tanh(x)); }, 20, 15), "mean");
  for (std::size_t axis = 0; axis < 4; ++axis)
    expect_passes(gradcheck({x}, [&] { return weighted_sum(ad::mean_axis(x, axis), 16 + axis); }, 20, 16 + axis),
                  "mean_axis");
  // Distinct values so the arg-max is stable under eps.
  auto d = T::zeros(Shape{1, 2, 6, 3});
  auto dd = d.mutable_data();
  std::vector<double> vals(dd.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.05 * double(i);
  std::shuffle(vals.begin(), vals.end(), rng);
  std::copy(vals.begin(), vals.end(), dd.begin());
  expect_passes(gradcheck({d}, [&] { return weighted_sum(ad::reduce_max_over_frames(d), 20); }, 36, 20),
                "reduce_max_over_frames");
}

TEST(AutodiffGradcheck, Layout) {
  std::mt19937_64 rng(14);
  auto a = random_tensor(Shape{1, 2, 3, 4}, rng);
  auto b = random_tensor(Shape{1, 3, 3, 4}, rng);
  auto c = random_tensor(Shape{1, 2, 5, 4}, rng);
  expect_passes(gradcheck({a}, [&] { return weighted_sum(ad::reshape(a, Shape{6, 4}), 21); }, 24, 21), "reshape");
  expect_passes(gradcheck({a, b}, [&] { return weighted_sum(ad::concat<double>({a, b}, 1), 22); }, 30, 22), "concat");
  expect_passes(gradcheck({a, c}, [&] { return weighted_sum(ad::concat<double>({a, c}, 2), 23); }, 30, 23),
                "concat frames");
  expect_passes(gradcheck({b}, [&] { return weighted_sum(ad::slice(b, 1, 1, 3), 24); }, 30, 24), "slice");
  expect_passes(gradcheck({b}, [&] { return weighted_sum(ad::slice(b, 3, 1, 2), 25); }, 30, 25), "slice last");
}

TEST(AutodiffGradcheck, MatmulAndConvolutions) {
  std::mt19937_64 rng(15);
  auto a = random_tensor(Shape{3, 4}, rng);
  auto b = random_tensor(Shape{4, 2}, rng);
  expect_passes(gradcheck({a, b}, [&] { return weighted_sum(ad::matmul(a, b), 26); }, 20, 26), "matmul");

  auto x = random_tensor(Shape{2, 3, 5, 12}, rng);
  auto w = random_tensor(Shape{4, 3, 3, 5}, rng);
  auto bias = random_tensor(Shape{4}, rng);
  for (ad::Stride2 s : {ad::Stride2{1, 1}, ad::Stride2{1, 2}, ad::Stride2{2, 2}})
    expect_passes(gradcheck({x, w, bias}, [&] { return weighted_sum(ad::conv2d(x, w, bias, s), 27); }, 60, 27),
                  "conv2d");

  auto xt = random_tensor(Shape{2, 4, 5, 6}, rng);
  auto wt = random_tensor(Shape{4, 3, 3, 5}, rng);
  auto bt = random_tensor(Shape{3}, rng);
  expect_passes(gradcheck({xt, wt, bt},
                          [&] { return weighted_sum(ad::transposed_conv2d(xt, wt, bt, {1, 2}, 5, 12), 28); }, 60, 28),
                "transposed_conv2d");
  auto xs = random_tensor(Shape{1, 4, 3, 3}, rng);
  expect_passes(gradcheck({xs, wt, bt},
                          [&] { return weighted_sum(ad::transposed_conv2d(xs, wt, bt, {2, 2}, 5, 5), 29); }, 60, 29),
                "transposed_conv2d odd output");
}

TEST(Autodiff, TransposedConvIsAdjointOfConv) {
  // <conv(u), v> == <u, conv^T(v)> with shared weights.
  std::mt19937_64 rng(16);
  const auto w = random_tensor(Shape{3, 2, 3, 5}, rng);  // conv: 2 -> 3 channels
  const auto u = random_tensor(Shape{1, 2, 6, 12}, rng);
  const auto cu = ad::conv2d(u, w, T(), {1, 2});
  const auto v = random_tensor(cu.shape(), rng);
  const auto ctv = ad::transposed_conv2d(v, w, T(), {1, 2}, 6, 12);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cu.numel(); ++i) lhs += cu[i] * v[i];
  for (std::size_t i = 0; i < u.numel(); ++i) rhs += u[i] * ctv[i];
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

}  // namespace
}  // namespace weakdns
