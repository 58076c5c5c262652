// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// Generated stand-in material for tests and the bundled fixture corpus:
// voiced "syllables" separated by pauses, and a handful of noise families.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "weakdns/mixer.hpp"
#include "weakdns/random.hpp"
#include "weakdns/wav.hpp"

namespace weakdns::fixture {

/// Harmonic syllables (f0 90..260 Hz, gliding) with formant-like spectral
/// tilt and raised-cosine envelopes, separated by silent gaps.
inline Waveform speech_like(double seconds, Rng& rng, double peak = 0.3) {
  const std::size_t n = std::size_t(seconds * kSampleRate);
  std::vector<double> x(n, 0.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;

  std::size_t pos = std::size_t(u(rng) * 0.15 * kSampleRate);
  while (pos < n) {
    const std::size_t len = std::size_t((0.12 + 0.2 * u(rng)) * kSampleRate);
    const double f0a = 90.0 + 170.0 * u(rng);
    const double f0b = f0a * (0.8 + 0.4 * u(rng));
    const double formant1 = 300.0 + 600.0 * u(rng);
    const double formant2 = 900.0 + 1600.0 * u(rng);
    const double amp = 0.4 + 0.6 * u(rng);
    double phase = 0.0;
    for (std::size_t i = 0; i < len && pos + i < n; ++i) {
      const double t = double(i) / double(len);
      const double f0 = f0a + (f0b - f0a) * t;
      phase += two_pi * f0 / kSampleRate;
      const double env = 0.5 - 0.5 * std::cos(two_pi * t);
      double v = 0.0;
      for (int h = 1; f0 * h < 7000.0; ++h) {
        const double f = f0 * h;
        const double g = 1.0 / (1.0 + std::pow((f - formant1) / 200.0, 2)) +
                         0.6 / (1.0 + std::pow((f - formant2) / 300.0, 2)) + 0.02;
        v += g * std::sin(phase * h);
      }
      x[pos + i] += amp * env * v;
    }
    pos += len + std::size_t((0.04 + 0.2 * u(rng)) * kSampleRate);
  }
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  Waveform w{std::vector<float>(n, 0.0f)};
  if (m > 0.0)
    for (std::size_t i = 0; i < n; ++i) w.samples[i] = float(peak * x[i] / m);
  return w;
}

enum class NoiseKind { white, pink, hum, modulated, babble };

inline Waveform noise(NoiseKind kind, double seconds, Rng& rng, double rms = 0.1) {
  const std::size_t n = std::size_t(seconds * kSampleRate);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(n, 0.0);
  switch (kind) {
    case NoiseKind::white:
      for (auto& v : x) v = g(rng);
      break;
    case NoiseKind::pink: {
      // Sum of three one-pole lowpassed white sources.
      double a = 0, b = 0, c = 0;
      for (auto& v : x) {
        const double w = g(rng);
        a = 0.99 * a + 0.1 * w;
        b = 0.9 * b + 0.3 * w;
        c = 0.5 * c + 0.5 * w;
        v = a + b + c;
      }
      break;
    }
    case NoiseKind::hum: {
      const double f = 50.0 + 70.0 * u(rng);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = double(i) / kSampleRate;
        double v = 0.0;
        for (int h = 1; h <= 8; ++h) v += std::sin(2 * std::numbers::pi * f * h * t) / h;
        x[i] = v + 0.3 * g(rng);
      }
      break;
    }
    case NoiseKind::modulated: {
      const double rate = 1.0 + 4.0 * u(rng);
      double lp = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        lp = 0.7 * lp + 0.3 * g(rng);
        const double env = 0.6 + 0.4 * std::sin(2 * std::numbers::pi * rate * double(i) / kSampleRate);
        x[i] = env * lp;
      }
      break;
    }
    case NoiseKind::babble: {
      for (int talker = 0; talker < 5; ++talker) {
        const Waveform s = speech_like(seconds, rng, 1.0);
        for (std::size_t i = 0; i < n; ++i) x[i] += s.samples[i];
      }
      for (auto& v : x) v += 0.05 * g(rng);
      break;
    }
  }
  double e = 0.0;
  for (double v : x) e += v * v;
  const double scale = e > 0.0 ? rms / std::sqrt(e / double(n)) : 0.0;
  Waveform w{std::vector<float>(n)};
  for (std::size_t i = 0; i < n; ++i) w.samples[i] = float(scale * x[i]);
  return w;
}

inline NoiseKind noise_kind(std::size_t i) { return NoiseKind(i % 5); }

struct FixtureSpec {
  std::size_t clean = 60;
  std::size_t noise = 10;
  std::size_t real = 12;
  double seconds = 2.0;
  std::uint64_t seed = 1;
  std::string prefix = "utt";
};

/// Builds in-memory sources. "Real" recordings are mixtures whose references
/// are discarded, using noise realisations that never appear in `noise`.
inline CorpusSources make_sources(const FixtureSpec& spec) {
  CorpusSources src;
  auto name = [&](const char* kind, std::size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%s%03zu", spec.prefix.c_str(), kind, i);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < spec.clean; ++i) {
    Rng rng = derive_rng(spec.seed, name("clean", i));
    src.clean.push_back({name("clean", i), speech_like(spec.seconds, rng)});
  }
  for (std::size_t i = 0; i < spec.noise; ++i) {
    Rng rng = derive_rng(spec.seed, name("noise", i));
    src.noise.push_back({name("noise", i), noise(noise_kind(i), spec.seconds * 1.5, rng)});
  }
  for (std::size_t i = 0; i < spec.real; ++i) {
    Rng rng = derive_rng(spec.seed, name("real", i));
    const Waveform s = speech_like(spec.seconds, rng);
    const Waveform d = noise(noise_kind(i + 2), spec.seconds, rng);
    std::uniform_real_distribution<double> snr(0.0, 10.0);
    src.real.push_back({name("real", i), mix_at_snr(s, d, snr(rng)).noisy});
  }
  return src;
}

/// Writes the sources as WAV files plus a manifest.tsv and returns the
/// manifest path.
inline std::filesystem::path write_sources(const std::filesystem::path& dir, const CorpusSources& src) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.tsv", std::ios::binary);
  auto emit = [&](const std::vector<NamedWave>& group, const char* role) {
    for (const auto& w : group) {
      const fs::path rel = fs::path(role) / (w.id + ".wav");
      write_wav(dir / rel, w.wave);
      manifest << w.id << '\t' << role << '\t' << rel.generic_string() << '\n';
    }
  };
  emit(src.clean, "clean");
  emit(src.noise, "noise");
  emit(src.rir, "rir");
  emit(src.real, "real");
  return dir / "manifest.tsv";
}

}  // namespace weakdns::fixture
