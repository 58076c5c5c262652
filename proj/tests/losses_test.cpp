// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <complex>

#include "test_util.hpp"
#include "weakdns/losses.hpp"
#include "weakdns/mixer.hpp"

namespace weakdns {
namespace {

using cd = std::complex<double>;

Spectrogram random_spec(std::uint64_t seed, std::size_t n = 4000) { return stft(testing::random_waveform(n, seed)); }

// Full two-sided sum over a K-point DFT, rebuilt from the stored one-sided
// half by conjugate symmetry, divided by L * K.
double two_sided_loss(const Spectrogram& a, const Spectrogram& b, std::size_t k_size = 512) {
  double total = 0.0;
  for (std::size_t l = 0; l < a.frames(); ++l)
    for (std::size_t k = 0; k < k_size; ++k) {
      const std::size_t stored = k <= k_size / 2 ? k : k_size - k;
      cd x(a.at(l, stored)), y(b.at(l, stored));
      if (k > k_size / 2) {
        x = std::conj(x);
        y = std::conj(y);
      }
      total += std::norm(x - y);
    }
  return total / (double(a.frames()) * double(k_size));
}

TEST(JJoint, PerfectEstimateIsZero) {
  const auto s = random_spec(1);
  EXPECT_EQ(j_joint(s, s), 0.0);
}

TEST(JJoint, SingleBinThreeFourI) {
  Spectrogram a(1, 1), b(1, 1);
  a.at(0, 0) = {3.0f, 4.0f};
  EXPECT_DOUBLE_EQ(j_joint(a, b, BinLayout::uniform(1, 1)), 25.0);
}

TEST(JJoint, MatchesTwoSidedLoopOracle) {
  for (std::uint64_t seed : {2, 3, 4}) {
    const auto a = random_spec(seed), b = random_spec(seed + 100);
    const double oracle = two_sided_loss(a, b);
    EXPECT_NEAR(j_joint(a, b), oracle, 1e-6 * oracle);
  }
}

TEST(JJoint, IgnoresPaddingBins) {
  const auto a = random_spec(5);
  auto b = a;
  for (std::size_t l = 0; l < b.frames(); ++l)
    for (std::size_t k = 257; k < 260; ++k) b.at(l, k) = {100.0f, -7.0f};
  EXPECT_EQ(j_joint(a, b), 0.0);
}

TEST(JJoint, ShapeMismatchRejected) {
  EXPECT_THROW(j_joint(random_spec(1, 4000), random_spec(1, 5000)), DomainError);
  EXPECT_THROW(j_joint(Spectrogram(2, 16), Spectrogram(2, 16)), DomainError);
}

TEST(JNoise, PerfectEstimateIsZero) {
  const auto s = random_spec(6);
  EXPECT_EQ(j_noise(s, s), 0.0);
}

TEST(JNoise, EqualsJointWithoutReverberation) {
  const auto clean = testing::random_waveform(4000, 7);
  Waveform delta{std::vector<float>{1.0f}};
  const auto s = stft(clean);
  const auto s_rev = stft(reverberate(clean, delta));
  const auto s_hat = random_spec(8);
  EXPECT_EQ(s, s_rev);
  EXPECT_EQ(j_noise(s_hat, s_rev), j_joint(s_hat, s));
}

TEST(JNoise, MatchesTwoSidedLoopOracle) {
  const auto a = random_spec(9), b = random_spec(10);
  const double oracle = two_sided_loss(a, b);
  EXPECT_NEAR(j_noise(a, b), oracle, 1e-6 * oracle);
}

TEST(JSynth, Endpoints) {
  const auto s_hat = to_tensors<double>(random_spec(11));
  const auto s = to_tensors<double>(random_spec(12));
  const auto s_rev = to_tensors<double>(random_spec(13));
  const auto layout = BinLayout::one_sided();
  const double joint = j_joint(s_hat, s, layout).item();
  const double noise = j_noise(s_hat, s_rev, layout).item();
  EXPECT_EQ(j_synth(s_hat, s, s_rev, LossConfig{.beta = 1.0}, layout).item(), joint);
  EXPECT_EQ(j_synth(s_hat, s, s_rev, LossConfig{.beta = 0.0}, layout).item(), noise);
}

TEST(JSynth, DefaultBeta) { EXPECT_DOUBLE_EQ(j_synth(2.0, 10.0, LossConfig{}), 2.8); }

TEST(JSynth, MonotoneInJoint) {
  for (double beta : {0.1, 0.5, 0.9, 1.0}) {
    double prev = -1.0;
    for (double joint = 0.0; joint < 5.0; joint += 0.25) {
      const double v = j_synth(joint, 1.0, LossConfig{.beta = beta});
      EXPECT_GE(v, prev);
      prev = v;
    }
  }
}

TEST(JPesqnet, Examples) {
  EXPECT_EQ(j_pesqnet(3.1, 3.1), 0.0);
  EXPECT_DOUBLE_EQ(j_pesqnet(2.0, 3.5), 2.25);
  EXPECT_NEAR(j_pesqnet(1.04, 4.64), 12.96, 1e-12);
}

TEST(JPesqnet, OracleOutsideRangeRejected) {
  EXPECT_THROW(j_pesqnet(2.0, 1.0), DomainError);
  EXPECT_THROW(j_pesqnet(2.0, 4.7), DomainError);
  EXPECT_THROW(j_pesqnet(2.0, std::nan("")), DomainError);
  EXPECT_NO_THROW(j_pesqnet(2.0, 1.04));
  EXPECT_NO_THROW(j_pesqnet(2.0, 4.64));
}

TEST(JReal, Examples) {
  EXPECT_EQ(j_real(4.64), 0.0);
  EXPECT_NEAR(j_real(1.04), 12.96, 1e-12);
  EXPECT_NEAR(j_real(2.84), 3.24, 1e-12);
}

TEST(JTotal, Examples) {
  EXPECT_EQ(j_total(UtteranceKind::real, 123.0, j_real(4.64), LossConfig{}), 0.0);
  EXPECT_EQ(j_total(UtteranceKind::real, 123.0, 7.0, LossConfig{}), 7.0);
  EXPECT_DOUBLE_EQ(j_total(UtteranceKind::synthetic, 1.0, 4.0, LossConfig{.alpha = 0.9}), 1.3);
  EXPECT_EQ(j_total(UtteranceKind::synthetic, 1.7, 4.0, LossConfig{.alpha = 1.0}), 1.7);
}

TEST(JTotal, AlphaOneDropsQualityTermFromGraph) {
  auto synth = ad::Tensor<double>::parameter(ad::Shape{1}, {1.0});
  auto real = ad::Tensor<double>::parameter(ad::Shape{1}, {2.0});
  ad::backward(j_total(UtteranceKind::synthetic, synth, real, LossConfig{.alpha = 1.0}));
  EXPECT_EQ(synth.grad()[0], 1.0);
  EXPECT_EQ(real.grad()[0], 0.0);
}

TEST(LossConfig, RejectsOutOfRange) {
  EXPECT_THROW(LossConfig({.beta = 1.1}).validate(), DomainError);
  EXPECT_THROW(LossConfig({.alpha = -0.1}).validate(), DomainError);
  EXPECT_THROW(LossConfig({.alpha = std::nan("")}).validate(), DomainError);
  EXPECT_THROW(j_synth(1.0, 1.0, LossConfig{.beta = 2.0}), DomainError);
}

TEST(LossProperties, NonNegativeAndZeroOnlyAtZeroResidual) {
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    const auto a = random_spec(seed), b = random_spec(seed + 50);
    EXPECT_GT(j_joint(a, b), 0.0);
    EXPECT_GT(j_noise(a, b), 0.0);
    auto c = a;
    c.at(seed % c.frames(), seed % 257) += std::complex<float>(1e-3f, 0.0f);
    EXPECT_GT(j_joint(a, c), 0.0);
  }
  for (double q = 1.04; q <= 4.64; q += 0.1) {
    EXPECT_GE(j_real(q), 0.0);
    EXPECT_GE(j_pesqnet(q, 2.5), 0.0);
  }
}

TEST(LossProperties, JointScalingScalesByCSquared) {
  const auto s_hat = random_spec(40), s = random_spec(41), s_rev = random_spec(42);
  for (float c : {2.0f, 0.5f, 4.0f}) {
    auto scale = [c](Spectrogram x) {
      for (auto& v : x.values()) v *= c;
      return x;
    };
    const double cc = double(c) * double(c);
    EXPECT_EQ(j_joint(scale(s_hat), scale(s)), cc * j_joint(s_hat, s));
    EXPECT_EQ(j_noise(scale(s_hat), scale(s_rev)), cc * j_noise(s_hat, s_rev));
    const LossConfig cfg;
    EXPECT_NEAR(j_synth(j_joint(scale(s_hat), scale(s)), j_noise(scale(s_hat), scale(s_rev)), cfg),
                cc * j_synth(j_joint(s_hat, s), j_noise(s_hat, s_rev), cfg), 1e-15 * cc);
  }
}

}  // namespace
}  // namespace weakdns
