// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// Synthetic mixture construction y = s * h + g d, plus ingestion of
// reference-free recordings and the on-disk dataset layout.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "weakdns/error.hpp"
#include "weakdns/random.hpp"
#include "weakdns/wav.hpp"

namespace weakdns {

enum class UtteranceKind { synthetic, real };

inline std::string to_string(UtteranceKind k) { return k == UtteranceKind::real ? "real" : "synthetic"; }

struct UtteranceRecord {
  std::string id;
  UtteranceKind kind = UtteranceKind::synthetic;
  Waveform noisy;
  std::optional<Waveform> clean;
  std::optional<Waveform> clean_rev;
  /// Scaled additive noise g*d; only kept in memory, never written.
  std::optional<Waveform> noise;

  void validate() const {
    const bool refs = clean.has_value() && clean_rev.has_value();
    if (kind == UtteranceKind::synthetic && !refs)
      throw DomainError("utterance " + id + ": synthetic record without references");
    if (kind == UtteranceKind::real && (clean || clean_rev))
      throw DomainError("utterance " + id + ": real record must not carry references");
  }
};

struct MixMetadata {
  std::string id;
  UtteranceKind kind = UtteranceKind::synthetic;
  double snr_db = 0.0;
  std::optional<std::string> rir_id;
  std::optional<std::string> noise_id;
  double scale = 0.0;
  bool reverberated = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["id"] = id;
    j["kind"] = to_string(kind);
    j["snr_db"] = snr_db;
    j["rir_id"] = rir_id ? nlohmann::ordered_json(*rir_id) : nlohmann::ordered_json(nullptr);
    j["noise_id"] = noise_id ? nlohmann::ordered_json(*noise_id) : nlohmann::ordered_json(nullptr);
    j["scale"] = scale;
    j["reverberated"] = reverberated;
    return j;
  }

  static MixMetadata from_json(const nlohmann::json& j) {
    MixMetadata m;
    m.id = j.at("id").get<std::string>();
    m.kind = j.at("kind").get<std::string>() == "real" ? UtteranceKind::real : UtteranceKind::synthetic;
    m.snr_db = j.at("snr_db").get<double>();
    if (!j.at("rir_id").is_null()) m.rir_id = j.at("rir_id").get<std::string>();
    if (j.contains("noise_id") && !j.at("noise_id").is_null())
      m.noise_id = j.at("noise_id").get<std::string>();
    m.scale = j.at("scale").get<double>();
    m.reverberated = j.at("reverberated").get<bool>();
    return m;
  }
};

// ---------------------------------------------------------------------------
// Signal-level operations

/// Full linear convolution s * h truncated to len(s).
inline Waveform reverberate(const Waveform& s, const Waveform& h) {
  if (h.empty()) throw DomainError("reverberate: empty RIR");
  if (h.size() > s.size())
    throw DomainError("reverberate: RIR longer than signal (" + std::to_string(h.size()) + " > " +
                      std::to_string(s.size()) + ")");
  Waveform out(std::vector<float>(s.size(), 0.0f), s.sample_rate);
  for (std::size_t n = 0; n < s.size(); ++n) {
    double acc = 0.0;
    const std::size_t kmax = std::min(n + 1, h.size());
    for (std::size_t k = 0; k < kmax; ++k) acc += double(h.samples[k]) * double(s.samples[n - k]);
    out.samples[n] = float(acc);
  }
  return out;
}

inline double mean_power(const Waveform& x) {
  if (x.empty()) throw DomainError("mean_power: empty waveform");
  double e = 0.0;
  for (float v : x.samples) e += double(v) * double(v);
  return e / double(x.size());
}

struct ActiveLevelConfig {
  std::size_t frame = 512;  // 32 ms
  std::size_t hop = 256;    // 16 ms
  double threshold_db = 15.9;
};

/// Approximate active speech level. Frames whose RMS falls more than
/// threshold_db below the loudest frame are inactive; a sample counts toward
/// the level only when every frame covering it is active.
inline double active_level(const Waveform& x, const ActiveLevelConfig& cfg = {}) {
  if (x.empty()) throw DomainError("active_level: empty waveform");
  const std::size_t frame = std::min(cfg.frame, x.size());
  const std::size_t frames = (x.size() - frame) / cfg.hop + 1;

  std::vector<double> rms(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double e = 0.0;
    for (std::size_t n = 0; n < frame; ++n) {
      const double v = x.samples[f * cfg.hop + n];
      e += v * v;
    }
    rms[f] = std::sqrt(e / double(frame));
  }
  const double peak = *std::max_element(rms.begin(), rms.end());
  if (!(peak > 0.0)) throw DomainError("active_level: no active speech");
  const double gate = peak * std::pow(10.0, -cfg.threshold_db / 20.0);

  // covered[n] counts frames over n, active[n] counts active ones.
  std::vector<std::uint32_t> covered(x.size(), 0), active(x.size(), 0);
  for (std::size_t f = 0; f < frames; ++f) {
    const bool on = rms[f] > gate;
    for (std::size_t n = 0; n < frame; ++n) {
      ++covered[f * cfg.hop + n];
      if (on) ++active[f * cfg.hop + n];
    }
  }
  double e = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    if (covered[n] > 0 && active[n] == covered[n]) {
      e += double(x.samples[n]) * double(x.samples[n]);
      ++count;
    }
  }
  if (count == 0) throw DomainError("active_level: no active speech");
  return e / double(count);
}

struct Mixture {
  Waveform noisy;
  Waveform scaled_noise;
  double scale = 0.0;
};

/// y = speech + g d with g chosen so that active_level(speech) / power(g d)
/// equals 10^(snr_db / 10). Only the first len(speech) noise samples are used.
inline Mixture mix_at_snr(const Waveform& speech, const Waveform& noise, double snr_db) {
  if (!std::isfinite(snr_db)) throw DomainError("mix_at_snr: non-finite SNR");
  if (noise.size() < speech.size())
    throw DomainError("mix_at_snr: noise shorter than speech; fit its length first");
  Waveform d{std::vector<float>(noise.samples.begin(), noise.samples.begin() + std::ptrdiff_t(speech.size()))};
  const double pd = mean_power(d);
  if (!(pd > 0.0)) throw DomainError("mix_at_snr: zero-power noise");
  const double ps = active_level(speech);
  const double g = std::sqrt(ps / (pd * std::pow(10.0, snr_db / 10.0)));

  Mixture m;
  m.scale = g;
  m.scaled_noise = Waveform(std::vector<float>(speech.size()));
  m.noisy = Waveform(std::vector<float>(speech.size()));
  for (std::size_t n = 0; n < speech.size(); ++n) {
    m.scaled_noise.samples[n] = float(g * double(d.samples[n]));
    m.noisy.samples[n] = speech.samples[n] + m.scaled_noise.samples[n];
  }
  return m;
}

/// Crops (random offset) or tiles (random phase) noise to exactly `length`.
inline Waveform fit_noise_length(const Waveform& noise, std::size_t length, Rng& rng) {
  if (noise.empty()) throw DomainError("fit_noise_length: empty noise");
  Waveform out{std::vector<float>(length)};
  if (noise.size() >= length) {
    std::uniform_int_distribution<std::size_t> pick(0, noise.size() - length);
    const std::size_t off = pick(rng);
    std::copy_n(noise.samples.begin() + std::ptrdiff_t(off), length, out.samples.begin());
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, noise.size() - 1);
    const std::size_t off = pick(rng);
    for (std::size_t n = 0; n < length; ++n) out.samples[n] = noise.samples[(off + n) % noise.size()];
  }
  return out;
}

struct RirConfig {
  double t60_lo = 0.2;
  double t60_hi = 1.0;
  double direct_to_reverb_db = 3.0;
  std::size_t max_taps = 8000;
};

/// Exponential-decay RIR: unit direct path at tap 0 followed by Gaussian
/// noise decaying 60 dB over t60 seconds. Tail energy is set relative to the
/// direct path by direct_to_reverb_db.
inline Waveform make_rir(double t60, Rng& rng, const RirConfig& cfg = {}) {
  if (!(t60 > 0.0)) throw DomainError("make_rir: t60 must be positive");
  const std::size_t taps = std::clamp<std::size_t>(std::size_t(std::ceil(t60 * kSampleRate)), 2, cfg.max_taps);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double decay = 3.0 * std::log(10.0) / (t60 * kSampleRate);  // amplitude, -60 dB at t60
  std::vector<double> tail(taps, 0.0);
  double e = 0.0;
  for (std::size_t n = 1; n < taps; ++n) {
    tail[n] = gauss(rng) * std::exp(-decay * double(n));
    e += tail[n] * tail[n];
  }
  const double gain = e > 0.0 ? std::sqrt(std::pow(10.0, -cfg.direct_to_reverb_db / 10.0) / e) : 0.0;
  Waveform h{std::vector<float>(taps)};
  h.samples[0] = 1.0f;
  for (std::size_t n = 1; n < taps; ++n) h.samples[n] = float(gain * tail[n]);
  return h;
}

// ---------------------------------------------------------------------------
// Corpus construction

enum class SourceRole { clean, noise, rir, real };

struct ManifestEntry {
  std::string id;
  SourceRole role = SourceRole::clean;
  std::filesystem::path path;
};

inline SourceRole parse_role(const std::string& s) {
  if (s == "clean") return SourceRole::clean;
  if (s == "noise") return SourceRole::noise;
  if (s == "rir") return SourceRole::rir;
  if (s == "real") return SourceRole::real;
  throw DataError("manifest: unknown role '" + s + "'");
}

inline std::string to_string(SourceRole r) {
  switch (r) {
    case SourceRole::clean: return "clean";
    case SourceRole::noise: return "noise";
    case SourceRole::rir: return "rir";
    case SourceRole::real: return "real";
  }
  return "?";
}

/// Parses `id<TAB>role<TAB>path` lines. Relative paths resolve against the
/// manifest's directory. Blank lines and lines starting with '#' are skipped.
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 3)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
    ManifestEntry e{cols[0], parse_role(cols[1]), cols[2]};
    if (e.path.is_relative()) e.path = path.parent_path() / e.path;
    out.push_back(std::move(e));
  }
  return out;
}

struct CorpusConfig {
  double snr_lo = 0.0;
  double snr_hi = 40.0;
  /// When non-empty, SNR is drawn uniformly from this set instead of [lo, hi].
  std::vector<double> snr_values;
  double reverb_fraction = 0.5;
  RirConfig rir;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(std::isfinite(snr_lo) && std::isfinite(snr_hi) && snr_lo <= snr_hi,
                    "CorpusConfig: invalid SNR range");
    detail::require(reverb_fraction >= 0.0 && reverb_fraction <= 1.0,
                    "CorpusConfig: reverb_fraction must be in [0, 1]");
    for (double v : snr_values) detail::require(std::isfinite(v), "CorpusConfig: non-finite SNR value");
  }
};

struct NamedWave {
  std::string id;
  Waveform wave;
};

struct CorpusSources {
  std::vector<NamedWave> clean, noise, rir, real;
};

struct Corpus {
  std::vector<UtteranceRecord> records;
  std::vector<MixMetadata> metadata;
};

inline std::size_t reverb_count(std::size_t n, double fraction) {
  return std::size_t(std::llround(fraction * double(n)));
}

/// Mixes every clean source with a seeded noise choice and SNR draw. Exactly
/// round(fraction * N) synthetic records are reverberated; real sources pass
/// through without references.
inline Corpus mix_corpus(const CorpusSources& src, const CorpusConfig& cfg) {
  cfg.validate();
  if (!src.clean.empty() && src.noise.empty()) throw DataError("corpus: clean sources given but no noise");

  std::set<std::string> ids;
  for (const auto* group : {&src.clean, &src.real})
    for (const auto& w : *group)
      if (!ids.insert(w.id).second) throw DataError("corpus: duplicate utterance id '" + w.id + "'");

  // Which synthetic records get reverberated: seeded shuffle over sorted ids.
  std::vector<std::string> order;
  for (const auto& w : src.clean) order.push_back(w.id);
  std::sort(order.begin(), order.end());
  Rng shuffle_rng = derive_rng(cfg.seed, "reverb-selection");
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  const std::set<std::string> reverb_ids(order.begin(),
                                         order.begin() + std::ptrdiff_t(reverb_count(order.size(), cfg.reverb_fraction)));

  Corpus out;
  for (const auto& c : src.clean) {
    check_finite(c.wave, "corpus clean");
    Rng rng = derive_rng(cfg.seed, c.id);
    MixMetadata meta;
    meta.id = c.id;
    meta.kind = UtteranceKind::synthetic;

    std::uniform_int_distribution<std::size_t> pick_noise(0, src.noise.size() - 1);
    const auto& noise = src.noise[pick_noise(rng)];
    meta.noise_id = noise.id;
    if (cfg.snr_values.empty()) {
      std::uniform_real_distribution<double> snr(cfg.snr_lo, cfg.snr_hi);
      meta.snr_db = snr(rng);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, cfg.snr_values.size() - 1);
      meta.snr_db = cfg.snr_values[pick(rng)];
    }

    Waveform clean_rev = c.wave;
    if (reverb_ids.count(c.id)) {
      meta.reverberated = true;
      Waveform h;
      if (!src.rir.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, src.rir.size() - 1);
        const auto& r = src.rir[pick(rng)];
        meta.rir_id = r.id;
        h = r.wave;
      } else {
        std::uniform_real_distribution<double> t60(cfg.rir.t60_lo, cfg.rir.t60_hi);
        const double t = t60(rng);
        RirConfig rc = cfg.rir;
        rc.max_taps = std::min(rc.max_taps, c.wave.size());
        h = make_rir(t, rng, rc);
        std::ostringstream name;
        name << "generated:t60=" << std::llround(t * 1000.0) << "ms";
        meta.rir_id = name.str();
      }
      if (h.size() > c.wave.size()) h.samples.resize(c.wave.size());
      clean_rev = reverberate(c.wave, h);
    }

    const Waveform d = fit_noise_length(noise.wave, c.wave.size(), rng);
    Mixture mix = mix_at_snr(clean_rev, d, meta.snr_db);
    meta.scale = mix.scale;

    UtteranceRecord rec;
    rec.id = c.id;
    rec.kind = UtteranceKind::synthetic;
    rec.noisy = std::move(mix.noisy);
    rec.clean = c.wave;
    rec.clean_rev = std::move(clean_rev);
    rec.noise = std::move(mix.scaled_noise);
    out.records.push_back(std::move(rec));
    out.metadata.push_back(std::move(meta));
  }
  for (const auto& r : src.real) {
    check_finite(r.wave, "corpus real");
    UtteranceRecord rec;
    rec.id = r.id;
    rec.kind = UtteranceKind::real;
    rec.noisy = r.wave;
    out.records.push_back(std::move(rec));
    MixMetadata meta;
    meta.id = r.id;
    meta.kind = UtteranceKind::real;
    meta.snr_db = std::numeric_limits<double>::quiet_NaN();
    out.metadata.push_back(std::move(meta));
  }
  return out;
}

inline CorpusSources load_sources(const std::vector<ManifestEntry>& manifest) {
  CorpusSources src;
  std::map<SourceRole, std::set<std::string>> seen;
  for (const auto& e : manifest) {
    if (!seen[e.role].insert(e.id).second)
      throw DataError("manifest: duplicate " + to_string(e.role) + " id '" + e.id + "'");
    if (!std::filesystem::exists(e.path)) throw DataError("missing file: " + e.path.string());
    NamedWave w{e.id, read_wav(e.path)};
    switch (e.role) {
      case SourceRole::clean: src.clean.push_back(std::move(w)); break;
      case SourceRole::noise: src.noise.push_back(std::move(w)); break;
      case SourceRole::rir: src.rir.push_back(std::move(w)); break;
      case SourceRole::real: src.real.push_back(std::move(w)); break;
    }
  }
  return src;
}

inline std::string metadata_jsonl(const std::vector<MixMetadata>& meta) {
  std::string out;
  for (const auto& m : meta) {
    auto j = m.to_json();
    if (m.kind == UtteranceKind::real) j["snr_db"] = nullptr;
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// Writes `<root>/{noisy,clean,clean_rev}/<id>.wav` and `<root>/metadata.jsonl`.
inline void write_dataset(const std::filesystem::path& root, const Corpus& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "noisy");
  fs::create_directories(root / "clean");
  fs::create_directories(root / "clean_rev");
  for (const auto& r : corpus.records) {
    write_wav(root / "noisy" / (r.id + ".wav"), r.noisy);
    if (r.clean) write_wav(root / "clean" / (r.id + ".wav"), *r.clean);
    if (r.clean_rev) write_wav(root / "clean_rev" / (r.id + ".wav"), *r.clean_rev);
  }
  std::ofstream meta(root / "metadata.jsonl", std::ios::binary);
  if (!meta) throw DataError("cannot write " + (root / "metadata.jsonl").string());
  meta << metadata_jsonl(corpus.metadata);
}

inline Corpus build_corpus(const std::filesystem::path& manifest, const CorpusConfig& cfg,
                           const std::filesystem::path& out_root) {
  Corpus c = mix_corpus(load_sources(read_manifest(manifest)), cfg);
  write_dataset(out_root, c);
  return c;
}

/// Loads a dataset written by write_dataset. Records keep metadata order.
inline Corpus load_dataset(const std::filesystem::path& root) {
  const auto meta_path = root / "metadata.jsonl";
  std::ifstream in(meta_path);
  if (!in) throw DataError("missing dataset metadata: " + meta_path.string());
  Corpus c;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.at("snr_db").is_null()) j["snr_db"] = std::numeric_limits<double>::quiet_NaN();
    MixMetadata m = MixMetadata::from_json(j);
    UtteranceRecord r;
    r.id = m.id;
    r.kind = m.kind;
    const auto noisy = root / "noisy" / (m.id + ".wav");
    if (!std::filesystem::exists(noisy)) throw DataError("missing file: " + noisy.string());
    r.noisy = read_wav(noisy);
    if (m.kind == UtteranceKind::synthetic) {
      r.clean = read_wav(root / "clean" / (m.id + ".wav"));
      r.clean_rev = read_wav(root / "clean_rev" / (m.id + ".wav"));
    }
    c.records.push_back(std::move(r));
    c.metadata.push_back(std::move(m));
  }
  return c;
}

}  // namespace weakdns
