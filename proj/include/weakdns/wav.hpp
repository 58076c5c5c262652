// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "weakdns/error.hpp"

namespace weakdns {

inline constexpr int kSampleRate = 16000;

/// Mono time-domain signal. Samples are nominally in [-1, 1).
struct Waveform {
  std::vector<float> samples;
  int sample_rate = kSampleRate;

  Waveform() = default;
  explicit Waveform(std::vector<float> s, int rate = kSampleRate)
      : samples(std::move(s)), sample_rate(rate) {}

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  float operator[](std::size_t i) const { return samples[i]; }
  float& operator[](std::size_t i) { return samples[i]; }
};

inline void check_finite(const Waveform& x, const char* who) {
  for (float v : x.samples)
    if (!std::isfinite(v)) throw DomainError(std::string(who) + ": non-finite sample");
}

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return std::uint16_t(p[0] | (p[1] << 8));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}

}  // namespace detail

/// Reads RIFF/WAVE, PCM 16-bit little-endian, mono, 16 kHz. Anything else is
/// rejected with a DataError naming the file and the offending field.
inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open WAV file: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& why) {
    throw DataError(path.string() + ": " + why);
  };
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    fail("not a RIFF/WAVE file");

  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const unsigned char* chunk = buf.data() + pos;
    const std::uint32_t size = detail::read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > buf.size()) fail("truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) fail("fmt chunk too short");
      const unsigned char* f = buf.data() + body;
      const auto format = detail::read_u16(f);
      const auto channels = detail::read_u16(f + 2);
      const auto rate = detail::read_u32(f + 4);
      const auto bits = detail::read_u16(f + 14);
      if (format != 1) fail("unsupported format tag " + std::to_string(format) + " (need PCM)");
      if (channels != 1) fail("unsupported channel count " + std::to_string(channels) + " (need mono)");
      if (bits != 16) fail("unsupported bit depth " + std::to_string(bits) + " (need 16)");
      if (rate != std::uint32_t(kSampleRate))
        throw SampleRateMismatch(path.string() + ": unsupported sample rate " + std::to_string(rate) +
                                 " (need 16000)");
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) fail("data chunk before fmt chunk");
      Waveform w;
      w.samples.resize(size / 2);
      const unsigned char* d = buf.data() + body;
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto v = std::int16_t(detail::read_u16(d + 2 * i));
        w.samples[i] = float(v) / 32768.0f;
      }
      return w;
    }
    pos = body + size + (size & 1u);
  }
  fail("no data chunk");
  return {};
}

/// Writes 16-bit PCM mono. Samples are rounded and saturated to int16.
inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  if (w.sample_rate != kSampleRate)
    throw DomainError("write_wav: sample rate must be 16000, got " + std::to_string(w.sample_rate));
  std::string out;
  const auto data_bytes = std::uint32_t(w.samples.size() * 2);
  out.reserve(44 + data_bytes);
  out.append("RIFF");
  detail::put_u32(out, 36 + data_bytes);
  out.append("WAVEfmt ");
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  detail::put_u32(out, kSampleRate);
  detail::put_u32(out, kSampleRate * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out.append("data");
  detail::put_u32(out, data_bytes);
  for (float s : w.samples) {
    const double scaled = std::round(double(s) * 32768.0);
    const auto v = std::int16_t(std::clamp(scaled, -32768.0, 32767.0));
    detail::put_u16(out, std::uint16_t(v));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write WAV file: " + path.string());
  f.write(out.data(), std::streamsize(out.size()));
}

}  // namespace weakdns
