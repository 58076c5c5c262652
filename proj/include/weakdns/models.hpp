// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// DenoiserNet: small conv-recurrent network that emits a complex mask
// bounded to the unit disc. QualityNet: non-intrusive utterance-level
// quality regressor on the enhanced amplitude spectrum. NormStats: per-bin
// input normalisation fitted once on training amplitudes.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "weakdns/autodiff.hpp"
#include "weakdns/checkpoint.hpp"
#include "weakdns/dsp.hpp"
#include "weakdns/optim.hpp"
#include "weakdns/random.hpp"

namespace weakdns {

inline constexpr const char* kDenoiserTopology = "weakdns.denoiser.v1";
inline constexpr const char* kQualityTopology = "weakdns.quality.v1";
inline constexpr const char* kIdentityTopology = "weakdns.identity.v1";
inline constexpr double kQualityFloor = 1.04;
inline constexpr double kQualityCeiling = 4.64;

// ---------------------------------------------------------------------------
// Normalisation

struct NormStats {
  std::vector<float> mean;
  std::vector<float> std;

  std::size_t bins() const { return mean.size(); }
  bool operator==(const NormStats&) const = default;
};

/// |S| as a frames x bins row-major array.
inline std::vector<float> amplitude(const Spectrogram& s) {
  std::vector<float> a(s.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::abs(s.values()[i]);
  return a;
}

/// Per-bin mean and population std over every frame of every utterance.
/// Each entry of `amplitudes` is frames x bins row-major.
inline NormStats fit_norm_stats(const std::vector<std::vector<float>>& amplitudes, std::size_t bins) {
  if (amplitudes.empty() || bins == 0) throw DomainError("fit_norm_stats: empty corpus");
  // Welford per bin, in double.
  std::vector<double> mean(bins, 0.0), m2(bins, 0.0);
  std::size_t count = 0;
  for (const auto& utt : amplitudes) {
    if (utt.size() % bins != 0) throw DomainError("fit_norm_stats: utterance not a multiple of bin count");
    for (std::size_t f = 0; f < utt.size() / bins; ++f) {
      ++count;
      for (std::size_t k = 0; k < bins; ++k) {
        const double x = utt[f * bins + k];
        const double d = x - mean[k];
        mean[k] += d / double(count);
        m2[k] += d * (x - mean[k]);
      }
    }
  }
  if (count == 0) throw DomainError("fit_norm_stats: no frames");
  NormStats s;
  s.mean.resize(bins);
  s.std.resize(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    s.mean[k] = float(mean[k]);
    s.std[k] = float(std::max(std::sqrt(m2[k] / double(count)), 1e-8));
  }
  return s;
}

inline void append_norm(std::vector<NamedArray>& out, const NormStats& s) {
  out.push_back({"norm.mean", {s.mean.size()}, s.mean});
  out.push_back({"norm.std", {s.std.size()}, s.std});
}

inline NormStats load_norm(const std::vector<NamedArray>& arrays) {
  const auto* m = find_array(arrays, "norm.mean");
  const auto* s = find_array(arrays, "norm.std");
  if (!m || !s) throw DataError("checkpoint: missing normalisation statistics");
  return NormStats{m->values, s->values};
}

/// (x - mean) / std per bin over a [1, 1, L, bins] tensor. The statistics
/// enter as constants, so gradients flow through x only.
template <typename T>
ad::Tensor<T> normalize(const ad::Tensor<T>& x, const NormStats& stats) {
  const auto& sh = x.shape();
  if (sh.rank() != 4 || sh[3] != stats.bins())
    throw DomainError("normalize: expected [N, C, L, " + std::to_string(stats.bins()) + "], got " + sh.str());
  std::vector<T> gain(x.numel()), offset(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t k = i % stats.bins();
    gain[i] = T(1) / T(stats.std[k]);
    offset[i] = -T(stats.mean[k]) / T(stats.std[k]);
  }
  return ad::add(ad::mul(x, ad::Tensor<T>::constant(sh, std::move(gain))),
                 ad::Tensor<T>::constant(sh, std::move(offset)));
}

/// Real and imaginary planes of a spectrogram as [1, 1, L, bins] constants.
template <typename T>
struct ComplexTensor {
  ad::Tensor<T> re, im;
};

template <typename T>
ComplexTensor<T> to_tensors(const Spectrogram& s) {
  std::vector<T> re(s.size()), im(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    re[i] = T(s.values()[i].real());
    im[i] = T(s.values()[i].imag());
  }
  const ad::Shape sh{1, 1, s.frames(), s.bins()};
  return {ad::Tensor<T>::constant(sh, std::move(re)), ad::Tensor<T>::constant(sh, std::move(im))};
}

template <typename Grid, typename T>
Grid to_grid(const ComplexTensor<T>& c) {
  const auto& sh = c.re.shape();
  Grid g(sh[2], sh[3]);
  for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] = {float(c.re[i]), float(c.im[i])};
  return g;
}

/// Elementwise complex product on (re, im) tensor pairs.
template <typename T>
ComplexTensor<T> complex_mul(const ComplexTensor<T>& a, const ComplexTensor<T>& b) {
  return {ad::sub(ad::mul(a.re, b.re), ad::mul(a.im, b.im)), ad::add(ad::mul(a.re, b.im), ad::mul(a.im, b.re))};
}

// ---------------------------------------------------------------------------
// Parameter helpers

namespace detail {

template <typename T>
ad::Tensor<T> init_weight(Rng& rng, ad::Shape shape, std::size_t fan_in, double gain = 1.0) {
  std::normal_distribution<double> g(0.0, gain / std::sqrt(double(fan_in)));
  std::vector<T> v(shape.numel());
  for (auto& x : v) x = T(g(rng));
  return ad::Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
ad::Tensor<T> init_zero(ad::Shape shape) {
  const auto n = shape.numel();
  return ad::Tensor<T>::parameter(std::move(shape), std::vector<T>(n, T(0)));
}

}  // namespace detail

template <typename T>
void append_params(std::vector<NamedArray>& out, const std::string& prefix, const ParamList<T>& params) {
  for (const auto& [name, p] : params) {
    NamedArray a;
    a.name = prefix + name;
    for (auto d : p.shape().dims) a.dims.push_back(d);
    a.values.assign(p.data().begin(), p.data().end());
    out.push_back(std::move(a));
  }
}

template <typename T>
void load_params(const std::vector<NamedArray>& arrays, const std::string& prefix, ParamList<T>& params) {
  for (auto& [name, p] : params) {
    const auto* a = find_array(arrays, prefix + name);
    if (!a) throw DataError("checkpoint: missing tensor '" + prefix + name + "'");
    std::vector<std::size_t> dims(a->dims.begin(), a->dims.end());
    if (!(ad::Shape(dims) == p.shape()))
      throw DataError("checkpoint: tensor '" + prefix + name + "' has shape " + ad::Shape(dims).str() +
                      ", expected " + p.shape().str());
    auto dst = p.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = T(a->values[i]);
  }
}

/// Name of the topology marker record for a model stored under `prefix`.
inline std::string topology_record(const std::string& prefix, const std::string& topology) {
  return "@topology/" + prefix + topology;
}

inline void check_topology(const std::vector<NamedArray>& arrays, const std::string& prefix,
                           const std::string& topology) {
  for (const auto& a : arrays) {
    const std::string marker = "@topology/" + prefix;
    if (a.name.rfind(marker, 0) == 0) {
      const std::string found = a.name.substr(marker.size());
      if (found != topology)
        throw DataError("checkpoint: topology '" + found + "' does not match expected '" + topology + "'");
      return;
    }
  }
  throw DataError("checkpoint: no topology record for '" + prefix + "'");
}

/// FNV-1a over the raw parameter bytes; used to prove a model stayed frozen.
template <typename T>
std::uint64_t checksum(const ParamList<T>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, p] : params)
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p.data().data()), p.numel() * sizeof(T)), h);
  return h;
}

template <typename T>
ParamList<T> clone_params(const ParamList<T>& params) {
  ParamList<T> out;
  for (const auto& [name, p] : params) {
    auto c = ad::Tensor<T>::constant(p.shape(), std::vector<T>(p.data().begin(), p.data().end()));
    c.set_requires_grad(p.requires_grad());
    out.emplace_back(name, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DenoiserNet

/// Encoder: two conv blocks, kernel 3x5, stride (1, 2), 16 and 32 channels.
/// Recurrence: gated cell over frames, 32 state channels, 1x3 frequency
/// kernels. Decoder: two transposed conv blocks mirroring the encoder with an
/// additive skip from the first encoder block. Head: 1x1 conv to (re, im),
/// then z -> z tanh(|z|) / |z|.
template <typename T>
class DenoiserNet {
 public:
  static constexpr std::size_t kInputChannels = 3;
  static constexpr std::size_t kC1 = 16, kC2 = 32, kState = 32;

  static DenoiserNet init(std::uint64_t seed) {
    Rng rng = derive_rng(seed, "denoiser-init");
    DenoiserNet m;
    auto& p = m.params_;
    p.emplace_back("enc1.w", detail::init_weight<T>(rng, {kC1, kInputChannels, 3, 5}, kInputChannels * 15, std::sqrt(2.0)));
    p.emplace_back("enc1.b", detail::init_zero<T>({kC1}));
    p.emplace_back("enc2.w", detail::init_weight<T>(rng, {kC2, kC1, 3, 5}, kC1 * 15, std::sqrt(2.0)));
    p.emplace_back("enc2.b", detail::init_zero<T>({kC2}));
    p.emplace_back("rec.wx", detail::init_weight<T>(rng, {2 * kState, kC2, 1, 3}, kC2 * 3));
    p.emplace_back("rec.bx", detail::init_zero<T>({2 * kState}));
    p.emplace_back("rec.wh", detail::init_weight<T>(rng, {2 * kState, kState, 1, 3}, kState * 3));
    p.emplace_back("dec1.w", detail::init_weight<T>(rng, {kState, kC1, 3, 5}, kState * 15 / 2, std::sqrt(2.0)));
    p.emplace_back("dec1.b", detail::init_zero<T>({kC1}));
    p.emplace_back("dec2.w", detail::init_weight<T>(rng, {kC1, kC1, 3, 5}, kC1 * 15 / 2, std::sqrt(2.0)));
    p.emplace_back("dec2.b", detail::init_zero<T>({kC1}));
    p.emplace_back("head.w", detail::init_weight<T>(rng, {2, kC1, 1, 1}, kC1));
    p.emplace_back("head.b", detail::init_zero<T>({2}));
    return m;
  }

  ParamList<T>& params() { return params_; }
  const ParamList<T>& params() const { return params_; }

  /// Network input [1, 3, L, bins]: normalised |Y|, Re Y, Im Y.
  static ad::Tensor<T> make_input(const ComplexTensor<T>& y, const NormStats& stats) {
    const auto amp = ad::complex_abs(y.re, y.im);
    return ad::concat<T>({normalize(amp, stats), y.re, y.im}, 1);
  }

  /// Pre-bounding head output z as (re, im), each [1, 1, L, bins].
  ComplexTensor<T> head(const ad::Tensor<T>& input) const {
    const auto& sh = input.shape();
    if (sh.rank() != 4 || sh[1] != kInputChannels)
      throw DomainError("denoiser_forward: expected [1, 3, L, F] input, got " + sh.str());
    if (sh[2] == 0) throw DomainError("denoiser_forward: zero frames");
    if (sh[3] % 4 != 0) throw DomainError("denoiser_forward: bin count must be divisible by 4, got " + sh.str());
    const std::size_t frames = sh[2], bins = sh[3];
    const ad::Stride2 half_f{1, 2};

    const auto e1 = ad::relu(ad::conv2d(input, p("enc1.w"), p("enc1.b"), half_f));
    const auto e2 = ad::relu(ad::conv2d(e1, p("enc2.w"), p("enc2.b"), half_f));

    // Gated recurrence across frames, independently per frequency position
    // apart from the 1x3 kernels.
    const auto gx = ad::conv2d(e2, p("rec.wx"), p("rec.bx"));
    std::vector<ad::Tensor<T>> states;
    states.reserve(frames);
    ad::Tensor<T> h;
    for (std::size_t t = 0; t < frames; ++t) {
      auto g = ad::slice(gx, 2, t, t + 1);
      if (h.defined()) g = ad::add(g, ad::conv2d(h, p("rec.wh"), ad::Tensor<T>()));
      const auto z = ad::sigmoid(ad::slice(g, 1, 0, kState));
      const auto cand = ad::tanh(ad::slice(g, 1, kState, 2 * kState));
      h = h.defined() ? ad::add(h, ad::mul(z, ad::sub(cand, h))) : ad::mul(z, cand);
      states.push_back(h);
    }
    const auto r = ad::concat(states, 2);

    const auto d1 = ad::relu(ad::transposed_conv2d(r, p("dec1.w"), p("dec1.b"), half_f, frames, bins / 2));
    const auto d2 = ad::relu(ad::transposed_conv2d(ad::add(d1, e1), p("dec2.w"), p("dec2.b"), half_f, frames, bins));
    const auto zz = ad::conv2d(d2, p("head.w"), p("head.b"));
    return {ad::slice(zz, 1, 0, 1), ad::slice(zz, 1, 1, 2)};
  }

  /// Complex mask (re, im), |M| < 1 everywhere.
  ComplexTensor<T> forward(const ad::Tensor<T>& input) const { return bound_mask(head(input)); }

  static ComplexTensor<T> bound_mask(const ComplexTensor<T>& z) {
    const auto g = ad::tanh_ratio(ad::complex_abs(z.re, z.im));
    return {ad::mul(z.re, g), ad::mul(z.im, g)};
  }

  /// Enhanced spectrum Y * M for a noisy spectrogram.
  ComplexTensor<T> enhance(const ComplexTensor<T>& y, const NormStats& stats) const {
    return complex_mul(y, forward(make_input(y, stats)));
  }

  void append_to(std::vector<NamedArray>& out, const std::string& prefix = "denoiser.") const {
    out.push_back({topology_record(prefix, kDenoiserTopology), {0}, {}});
    append_params(out, prefix, params_);
  }
  void load_from(const std::vector<NamedArray>& arrays, const std::string& prefix = "denoiser.") {
    check_topology(arrays, prefix, kDenoiserTopology);
    load_params(arrays, prefix, params_);
  }

 private:
  const ad::Tensor<T>& p(const char* name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw DomainError(std::string("denoiser: no parameter ") + name);
  }

  ParamList<T> params_;
};

// ---------------------------------------------------------------------------
// QualityNet

/// Concatenated mean and max over frames of a [N, C, L, 1] embedding,
/// returned as [N, 2C, 1, 1].
template <typename T>
ad::Tensor<T> statistics_pooling(const ad::Tensor<T>& embedding) {
  return ad::concat<T>({ad::mean_axis(embedding, 2), ad::reduce_max_over_frames(embedding)}, 1);
}

/// Three 3x3 stride-2 conv blocks (16, 32, 64 channels), frequency-averaged
/// per-frame embedding, mean+max pooling over frames, dense 64 + relu,
/// dense 1, gate into (1.04, 4.64). Sees only the enhanced amplitude.
template <typename T>
class QualityNet {
 public:
  static constexpr std::size_t kMinFrames = 8;

  static QualityNet init(std::uint64_t seed) {
    Rng rng = derive_rng(seed, "quality-init");
    QualityNet m;
    auto& p = m.params_;
    const double he = std::sqrt(2.0);
    p.emplace_back("conv1.w", detail::init_weight<T>(rng, {16, 1, 3, 3}, 9, he));
    p.emplace_back("conv1.b", detail::init_zero<T>({16}));
    p.emplace_back("conv2.w", detail::init_weight<T>(rng, {32, 16, 3, 3}, 16 * 9, he));
    p.emplace_back("conv2.b", detail::init_zero<T>({32}));
    p.emplace_back("conv3.w", detail::init_weight<T>(rng, {64, 32, 3, 3}, 32 * 9, he));
    p.emplace_back("conv3.b", detail::init_zero<T>({64}));
    p.emplace_back("fc1.w", detail::init_weight<T>(rng, {128, 64}, 128, he));
    p.emplace_back("fc1.b", detail::init_zero<T>({1, 64}));
    p.emplace_back("fc2.w", detail::init_weight<T>(rng, {64, 1}, 64));
    p.emplace_back("fc2.b", detail::init_zero<T>({1, 1}));
    return m;
  }

  ParamList<T>& params() { return params_; }
  const ParamList<T>& params() const { return params_; }

  /// Per-frame embedding [1, 64, L', 1] of a normalised amplitude input.
  ad::Tensor<T> embed(const ad::Tensor<T>& amp_norm) const {
    const auto& sh = amp_norm.shape();
    if (sh.rank() != 4 || sh[0] != 1 || sh[1] != 1)
      throw DomainError("quality_forward: expected [1, 1, L, F] input, got " + sh.str());
    if (sh[2] < kMinFrames)
      throw DomainError("quality_forward: need at least " + std::to_string(kMinFrames) + " frames, got " +
                        std::to_string(sh[2]));
    const ad::Stride2 s{2, 2};
    auto c = ad::relu(ad::conv2d(amp_norm, p("conv1.w"), p("conv1.b"), s));
    c = ad::relu(ad::conv2d(c, p("conv2.w"), p("conv2.b"), s));
    c = ad::relu(ad::conv2d(c, p("conv3.w"), p("conv3.b"), s));
    return ad::mean_axis(c, 3);
  }

  /// Estimated score, shape [1, 1].
  ad::Tensor<T> forward(const ad::Tensor<T>& amp_norm) const {
    const auto pooled = ad::reshape(statistics_pooling(embed(amp_norm)), ad::Shape{1, 128});
    const auto h = ad::relu(ad::add(ad::matmul(pooled, p("fc1.w")), p("fc1.b")));
    return ad::clamp_scale_gate(ad::add(ad::matmul(h, p("fc2.w")), p("fc2.b")));
  }

  /// Score for an enhanced spectrum given as (re, im) tensors; gradients
  /// reach the spectrum through |.| and the normalisation.
  ad::Tensor<T> score(const ComplexTensor<T>& s_hat, const NormStats& stats) const {
    return forward(normalize(ad::complex_abs(s_hat.re, s_hat.im), stats));
  }

  void append_to(std::vector<NamedArray>& out, const std::string& prefix = "quality.") const {
    out.push_back({topology_record(prefix, kQualityTopology), {0}, {}});
    append_params(out, prefix, params_);
  }
  void load_from(const std::vector<NamedArray>& arrays, const std::string& prefix = "quality.") {
    check_topology(arrays, prefix, kQualityTopology);
    load_params(arrays, prefix, params_);
  }

 private:
  const ad::Tensor<T>& p(const char* name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw DomainError(std::string("quality: no parameter ") + name);
  }

  ParamList<T> params_;
};

}  // namespace weakdns
