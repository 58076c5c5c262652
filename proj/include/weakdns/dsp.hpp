// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// STFT analysis/synthesis with the 260-bin layout used by the models:
// bins 0..256 hold the one-sided spectrum of a 512-point DFT, bins 257..259
// repeat bin 256 so the frequency axis survives two stride-2 halvings.

#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "weakdns/error.hpp"
#include "weakdns/wav.hpp"

namespace weakdns {

struct StftConfig {
  std::size_t frame_len = 384;
  std::size_t hop = 192;
  std::size_t fft_size = 512;
  std::size_t bins = 260;

  std::size_t physical_bins() const { return fft_size / 2 + 1; }

  void validate() const {
    detail::require(frame_len > 0 && hop * 2 == frame_len,
                    "StftConfig: hop must be frame_len / 2");
    detail::require(fft_size >= frame_len, "StftConfig: fft_size must be >= frame_len");
    detail::require(fft_size % 2 == 0, "StftConfig: fft_size must be even");
    detail::require(bins >= physical_bins(), "StftConfig: bins must cover the one-sided spectrum");
  }

  bool operator==(const StftConfig&) const = default;
};

/// Periodic Hann window, w[n] = 0.5 - 0.5 cos(2 pi n / N).
inline std::vector<double> periodic_hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(n));
  return w;
}

/// Dense frames x bins grid of complex values. The tag keeps spectra and
/// masks from being mixed up at call sites.
template <typename Tag>
class ComplexGrid {
 public:
  using value_type = std::complex<float>;

  ComplexGrid() = default;
  ComplexGrid(std::size_t frames, std::size_t bins)
      : frames_(frames), bins_(bins), values_(frames * bins) {}

  std::size_t frames() const { return frames_; }
  std::size_t bins() const { return bins_; }
  std::size_t size() const { return values_.size(); }

  value_type& at(std::size_t frame, std::size_t bin) { return values_[frame * bins_ + bin]; }
  const value_type& at(std::size_t frame, std::size_t bin) const {
    return values_[frame * bins_ + bin];
  }
  std::vector<value_type>& values() { return values_; }
  const std::vector<value_type>& values() const { return values_; }

  bool same_shape(const auto& other) const {
    return frames_ == other.frames() && bins_ == other.bins();
  }
  bool operator==(const ComplexGrid&) const = default;

 private:
  std::size_t frames_ = 0;
  std::size_t bins_ = 0;
  std::vector<value_type> values_;
};

struct SpectrumTag {};
struct MaskTag {};
using Spectrogram = ComplexGrid<SpectrumTag>;
/// Complex mask; producers guarantee |M| <= 1 per bin.
using Mask = ComplexGrid<MaskTag>;

inline std::size_t frame_count(std::size_t length, const StftConfig& cfg) {
  if (length <= cfg.frame_len) return 1;
  return (length - cfg.frame_len + cfg.hop - 1) / cfg.hop + 1;
}

/// Replicates bin physical_bins()-1 into the padding bins.
inline void fill_redundant_bins(Spectrogram& s, const StftConfig& cfg) {
  const std::size_t last = cfg.physical_bins() - 1;
  for (std::size_t l = 0; l < s.frames(); ++l)
    for (std::size_t k = last + 1; k < s.bins(); ++k) s.at(l, k) = s.at(l, last);
}

inline Spectrogram stft(const Waveform& x, const StftConfig& cfg = {}) {
  cfg.validate();
  if (x.empty()) throw DomainError("stft: empty waveform");
  check_finite(x, "stft");

  const std::size_t frames = frame_count(x.size(), cfg);
  const auto window = periodic_hann(cfg.frame_len);
  Spectrogram out(frames, cfg.bins);

  Eigen::FFT<double> fft;
  std::vector<double> buf(cfg.fft_size);
  std::vector<std::complex<double>> spec;
  for (std::size_t l = 0; l < frames; ++l) {
    std::fill(buf.begin(), buf.end(), 0.0);
    const std::size_t start = l * cfg.hop;
    for (std::size_t n = 0; n < cfg.frame_len && start + n < x.size(); ++n)
      buf[n] = window[n] * double(x.samples[start + n]);
    fft.fwd(spec, buf);
    for (std::size_t k = 0; k < cfg.physical_bins(); ++k)
      out.at(l, k) = std::complex<float>(spec[k]);
  }
  fill_redundant_bins(out, cfg);
  return out;
}

/// Weighted overlap-add: each inverse frame is windowed again and the sum is
/// divided by the overlapped squared window. Redundant bins are ignored.
inline Waveform istft(const Spectrogram& s, const StftConfig& cfg, std::size_t out_len) {
  cfg.validate();
  if (s.bins() != cfg.bins || s.frames() == 0)
    throw DomainError("istft: spectrogram shape " + std::to_string(s.frames()) + "x" +
                      std::to_string(s.bins()) + " does not match config bins " +
                      std::to_string(cfg.bins));

  const auto window = periodic_hann(cfg.frame_len);
  const std::size_t span = (s.frames() - 1) * cfg.hop + cfg.frame_len;
  std::vector<double> acc(span, 0.0), norm(span, 0.0);

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> full(cfg.fft_size);
  std::vector<double> frame;
  const std::size_t half = cfg.fft_size / 2;
  for (std::size_t l = 0; l < s.frames(); ++l) {
    for (std::size_t k = 0; k <= half; ++k) full[k] = std::complex<double>(s.at(l, k));
    // DC and Nyquist of a real signal are real.
    full[0] = full[0].real();
    full[half] = full[half].real();
    for (std::size_t k = 1; k < half; ++k) full[cfg.fft_size - k] = std::conj(full[k]);
    fft.inv(frame, full);
    const std::size_t start = l * cfg.hop;
    for (std::size_t n = 0; n < cfg.frame_len; ++n) {
      acc[start + n] += window[n] * frame[n];
      norm[start + n] += window[n] * window[n];
    }
  }

  Waveform y{std::vector<float>(out_len, 0.0f)};
  for (std::size_t n = 0; n < std::min(out_len, span); ++n)
    if (norm[n] > 1e-12) y.samples[n] = float(acc[n] / norm[n]);
  return y;
}

/// Elementwise complex product Y * M.
inline Spectrogram apply_mask(const Spectrogram& y, const Mask& m) {
  if (!y.same_shape(m))
    throw DomainError("apply_mask: shape mismatch " + std::to_string(y.frames()) + "x" +
                      std::to_string(y.bins()) + " vs " + std::to_string(m.frames()) + "x" +
                      std::to_string(m.bins()));
  Spectrogram out(y.frames(), y.bins());
  for (std::size_t i = 0; i < y.size(); ++i) out.values()[i] = y.values()[i] * m.values()[i];
  return out;
}

}  // namespace weakdns
