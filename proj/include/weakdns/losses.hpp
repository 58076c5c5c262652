// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// Per-utterance training losses on (re, im) tensor pairs.
//
// Spectral terms average over L * K with K the DFT size. Only the one-sided
// spectrum is stored, so bins 1..K/2-1 count twice (their conjugate mirrors)
// and the padding bins beyond K/2 are ignored.

#include <cmath>
#include <string>
#include <vector>

#include "weakdns/autodiff.hpp"
#include "weakdns/dsp.hpp"
#include "weakdns/mixer.hpp"
#include "weakdns/models.hpp"

namespace weakdns {

struct LossConfig {
  double beta = 0.9;
  double alpha = 0.9;

  void validate() const {
    detail::require(std::isfinite(beta) && beta >= 0.0 && beta <= 1.0, "LossConfig: beta must be in [0, 1]");
    detail::require(std::isfinite(alpha) && alpha >= 0.0 && alpha <= 1.0, "LossConfig: alpha must be in [0, 1]");
  }
};

/// Which bins count and with what weight, plus the normaliser K.
struct BinLayout {
  std::vector<double> weights;
  double dft_size = 512;

  /// Default: one-sided spectrum of a K-point DFT with conjugate-symmetric
  /// double counting, padded to `stored_bins`.
  static BinLayout one_sided(const StftConfig& cfg = {}) {
    BinLayout b;
    b.dft_size = double(cfg.fft_size);
    b.weights.assign(cfg.bins, 0.0);
    const std::size_t nyq = cfg.fft_size / 2;
    for (std::size_t k = 0; k <= nyq; ++k) b.weights[k] = (k == 0 || k == nyq) ? 1.0 : 2.0;
    return b;
  }
  /// Every stored bin counted once, normaliser K given explicitly.
  static BinLayout uniform(std::size_t bins, double k) {
    BinLayout b;
    b.weights.assign(bins, 1.0);
    b.dft_size = k;
    return b;
  }
};

/// (1 / (L K)) sum_l sum_k w_k |a - b|^2.
template <typename T>
ad::Tensor<T> spectral_mse(const ComplexTensor<T>& est, const ComplexTensor<T>& target, const BinLayout& layout) {
  const auto& sh = est.re.shape();
  if (!(sh == target.re.shape()) || !(sh == est.im.shape()) || !(sh == target.im.shape()))
    throw DomainError("spectral loss: shape mismatch " + sh.str() + " vs " + target.re.shape().str());
  if (sh.rank() != 4 || sh[3] != layout.weights.size())
    throw DomainError("spectral loss: expected [1, 1, L, " + std::to_string(layout.weights.size()) + "], got " +
                      sh.str());
  std::vector<T> w(est.re.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = T(layout.weights[i % layout.weights.size()]);
  const auto err = ad::add(ad::square(ad::sub(est.re, target.re)), ad::square(ad::sub(est.im, target.im)));
  const auto weighted = ad::sum(ad::mul(err, ad::Tensor<T>::constant(sh, std::move(w))));
  const double frames = double(sh[2]);
  return ad::scale(weighted, T(1.0 / (frames * layout.dft_size)));
}

template <typename T>
ad::Tensor<T> j_joint(const ComplexTensor<T>& s_hat, const ComplexTensor<T>& s, const BinLayout& layout) {
  return spectral_mse(s_hat, s, layout);
}

template <typename T>
ad::Tensor<T> j_noise(const ComplexTensor<T>& s_hat, const ComplexTensor<T>& s_rev, const BinLayout& layout) {
  return spectral_mse(s_hat, s_rev, layout);
}

/// beta * J_joint + (1 - beta) * J_noise.
template <typename T>
ad::Tensor<T> combine_synth(const ad::Tensor<T>& joint, const ad::Tensor<T>& noise, const LossConfig& cfg) {
  cfg.validate();
  return ad::add(ad::scale(joint, T(cfg.beta)), ad::scale(noise, T(1.0 - cfg.beta)));
}

template <typename T>
ad::Tensor<T> j_synth(const ComplexTensor<T>& s_hat, const ComplexTensor<T>& s, const ComplexTensor<T>& s_rev,
                      const LossConfig& cfg, const BinLayout& layout) {
  return combine_synth(j_joint(s_hat, s, layout), j_noise(s_hat, s_rev, layout), cfg);
}

/// (estimate - oracle)^2; the oracle label is a constant.
template <typename T>
ad::Tensor<T> j_pesqnet(const ad::Tensor<T>& estimate, double oracle) {
  if (!(oracle >= kQualityFloor && oracle <= kQualityCeiling))
    throw DomainError("j_pesqnet: oracle score " + std::to_string(oracle) + " outside [1.04, 4.64]");
  return ad::sum(ad::square(ad::add_scalar(estimate, T(-oracle))));
}

/// (estimate - 4.64)^2.
template <typename T>
ad::Tensor<T> j_real(const ad::Tensor<T>& estimate) {
  return ad::sum(ad::square(ad::add_scalar(estimate, T(-kQualityCeiling))));
}

/// Real data: J_real. Synthetic: alpha * J_synth + (1 - alpha) * J_real.
/// With alpha == 1 the quality term is dropped from the graph entirely.
template <typename T>
ad::Tensor<T> j_total(UtteranceKind kind, const ad::Tensor<T>& synth, const ad::Tensor<T>& real,
                      const LossConfig& cfg) {
  cfg.validate();
  if (kind == UtteranceKind::real) return real;
  if (cfg.alpha == 1.0) return synth;
  return ad::add(ad::scale(synth, T(cfg.alpha)), ad::scale(real, T(1.0 - cfg.alpha)));
}

// Scalar conveniences on spectrograms, used for evaluation and tests.

inline double j_joint(const Spectrogram& s_hat, const Spectrogram& s, const BinLayout& layout = BinLayout::one_sided()) {
  return j_joint(to_tensors<double>(s_hat), to_tensors<double>(s), layout).item();
}

inline double j_noise(const Spectrogram& s_hat, const Spectrogram& s_rev,
                      const BinLayout& layout = BinLayout::one_sided()) {
  return j_noise(to_tensors<double>(s_hat), to_tensors<double>(s_rev), layout).item();
}

inline double j_synth(double joint, double noise, const LossConfig& cfg) {
  cfg.validate();
  return cfg.beta * joint + (1.0 - cfg.beta) * noise;
}

inline double j_pesqnet(double estimate, double oracle) {
  return j_pesqnet(ad::Tensor<double>::scalar(estimate), oracle).item();
}

inline double j_real(double estimate) { return j_real(ad::Tensor<double>::scalar(estimate)).item(); }

inline double j_total(UtteranceKind kind, double synth, double real, const LossConfig& cfg) {
  return j_total(kind, ad::Tensor<double>::scalar(synth), ad::Tensor<double>::scalar(real), cfg).item();
}

}  // namespace weakdns
