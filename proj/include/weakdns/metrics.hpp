// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "weakdns/error.hpp"
#include "weakdns/models.hpp"
#include "weakdns/wav.hpp"

namespace weakdns {

struct SegSnrConfig {
  std::size_t frame = 256;
  std::size_t hop = 256;
  double clamp_lo = -10.0;
  double clamp_hi = 35.0;

  void validate() const {
    detail::require(frame > 0 && hop > 0, "SegSnrConfig: frame and hop must be positive");
    detail::require(clamp_lo < clamp_hi, "SegSnrConfig: clamp_lo must be below clamp_hi");
  }
};

/// Mean over frames of the clamped per-frame SNR of `test` against
/// `reference`. Frames with zero reference energy are skipped.
inline double seg_snr(const Waveform& reference, const Waveform& test, const SegSnrConfig& cfg = {}) {
  cfg.validate();
  if (reference.size() != test.size())
    throw DomainError("seg_snr: length mismatch " + std::to_string(reference.size()) + " vs " +
                      std::to_string(test.size()));
  if (reference.empty()) throw DomainError("seg_snr: empty input");
  const std::size_t frame = std::min(cfg.frame, reference.size());
  const std::size_t frames = (reference.size() - frame) / cfg.hop + 1;
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t f = 0; f < frames; ++f) {
    double sig = 0.0, err = 0.0;
    for (std::size_t n = f * cfg.hop; n < f * cfg.hop + frame; ++n) {
      const double r = reference.samples[n];
      const double e = r - double(test.samples[n]);
      sig += r * r;
      err += e * e;
    }
    if (sig == 0.0) continue;
    const double snr = err == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(sig / err);
    total += std::clamp(snr, cfg.clamp_lo, cfg.clamp_hi);
    ++used;
  }
  if (used == 0) throw DomainError("seg_snr: reference is silent in every frame");
  return total / double(used);
}

inline double delta_seg_snr(const Waveform& clean_rev, const Waveform& noisy, const Waveform& enhanced,
                            const SegSnrConfig& cfg = {}) {
  return seg_snr(clean_rev, enhanced, cfg) - seg_snr(clean_rev, noisy, cfg);
}

/// Affine map of clamped segmental SNR onto [1.04, 4.64].
inline double segsnr_to_quality(double snr_db, const SegSnrConfig& cfg = {}) {
  const double c = std::clamp(snr_db, cfg.clamp_lo, cfg.clamp_hi);
  const double t = (c - cfg.clamp_lo) / (cfg.clamp_hi - cfg.clamp_lo);
  return kQualityFloor * (1.0 - t) + kQualityCeiling * t;
}

/// Reference-based quality score standing in for a perceptual metric.
inline double quality_oracle(const Waveform& reference, const Waveform& degraded, const SegSnrConfig& cfg = {}) {
  return segsnr_to_quality(seg_snr(reference, degraded, cfg), cfg);
}

/// Pluggable label source for quality-net training.
using QualityOracle = std::function<double(const Waveform& reference, const Waveform& degraded)>;

inline QualityOracle default_quality_oracle(const SegSnrConfig& cfg = {}) {
  return [cfg](const Waveform& r, const Waveform& d) { return quality_oracle(r, d, cfg); };
}

}  // namespace weakdns
