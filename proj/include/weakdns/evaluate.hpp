// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// Single-file enhancement and per-utterance evaluation reports.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "weakdns/dsp.hpp"
#include "weakdns/metrics.hpp"
#include "weakdns/trainer.hpp"
#include "weakdns/wav.hpp"

namespace weakdns {

/// Denoiser (or identity) plus its normalisation, ready to run on audio.
class Enhancer {
 public:
  explicit Enhancer(ModelBundle bundle, StftConfig cfg = {}) : bundle_(std::move(bundle)), cfg_(cfg) {
    if (!bundle_.identity && !bundle_.denoiser)
      throw DataError("checkpoint holds neither a denoiser nor the identity marker");
    if (bundle_.denoiser && bundle_.norm.bins() != cfg_.bins)
      throw DataError("checkpoint normalisation has " + std::to_string(bundle_.norm.bins()) + " bins, expected " +
                      std::to_string(cfg_.bins));
  }

  /// Enhanced spectrum Y * M as tensors; the identity returns Y.
  ComplexTensor<float> enhance_spectrum(const ComplexTensor<float>& y) const {
    if (bundle_.identity) return y;
    NoGradScope<float> no_grad(bundle_.denoiser->params());
    return bundle_.denoiser->enhance(y, bundle_.norm);
  }

  /// stft -> mask -> istft; output has the input's length. Digital silence
  /// stays silent and the identity passes audio through unchanged.
  Waveform enhance(const Waveform& x) const {
    if (x.sample_rate != kSampleRate)
      throw DomainError("enhance: sample rate " + std::to_string(x.sample_rate) + " Hz, expected " +
                        std::to_string(kSampleRate));
    if (x.empty()) return x;
    bool silent = true;
    for (float v : x.samples) silent = silent && v == 0.0f;
    if (silent || bundle_.identity) return x;
    const auto s_hat = enhance_spectrum(to_tensors<float>(stft(x, cfg_)));
    return istft(to_grid<Spectrogram>(s_hat), cfg_, x.size());
  }

  /// Estimated quality of an enhanced spectrum, if the bundle has a quality net.
  std::optional<double> estimate_quality(const ComplexTensor<float>& s_hat) const {
    if (!bundle_.quality || s_hat.re.shape()[2] < QualityNet<float>::kMinFrames) return std::nullopt;
    NoGradScope<float> no_grad(bundle_.quality->params());
    return double(bundle_.quality->score(s_hat, bundle_.norm).item());
  }

  const ModelBundle& bundle() const { return bundle_; }
  const StftConfig& stft_config() const { return cfg_; }

 private:
  ModelBundle bundle_;
  StftConfig cfg_;
};

/// One row of the evaluation report. Reference-based columns are empty for
/// real recordings.
struct EvalRow {
  std::string id;
  bool reverberated = false;
  std::optional<double> seg_snr_noisy;
  std::optional<double> seg_snr_enhanced;
  std::optional<double> delta_seg_snr;
  std::optional<double> oracle_q_noisy;
  std::optional<double> oracle_q_enhanced;
  std::optional<double> estimated_q_enhanced;
};

/// Segmental SNR columns are measured against the reverberant clean
/// reference; oracle scores use the same reference as quality-net training.
inline EvalRow evaluate_utterance(const Enhancer& enh, const Utterance& u,
                                  const QualityOracle& oracle = default_quality_oracle()) {
  EvalRow row;
  row.id = u.id;
  row.reverberated = u.reverberated;
  const auto s_hat = enh.enhance_spectrum(u.y);
  const Waveform enhanced =
      enh.bundle().identity ? u.noisy : istft(to_grid<Spectrogram>(s_hat), enh.stft_config(), u.noisy.size());
  if (u.kind == UtteranceKind::synthetic) {
    row.seg_snr_noisy = seg_snr(*u.clean_rev, u.noisy);
    row.seg_snr_enhanced = seg_snr(*u.clean_rev, enhanced);
    row.delta_seg_snr = delta_seg_snr(*u.clean_rev, u.noisy, enhanced);
    row.oracle_q_noisy = oracle(*u.clean, u.noisy);
    row.oracle_q_enhanced = oracle(*u.clean, enhanced);
  }
  row.estimated_q_enhanced = enh.estimate_quality(s_hat);
  return row;
}

struct EvalReport {
  std::vector<EvalRow> rows;
  /// "mean:all", followed by "mean:dry" and "mean:reverberated" when the
  /// dataset has both kinds. Each averages its rows column by column over
  /// the rows that have a value.
  std::vector<EvalRow> aggregates;
};

namespace detail {

inline EvalRow aggregate(const std::string& name, const std::vector<const EvalRow*>& rows) {
  EvalRow agg;
  agg.id = name;
  auto mean = [&rows](std::optional<double> EvalRow::*field) -> std::optional<double> {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto* r : rows)
      if ((r->*field).has_value()) {
        sum += *(r->*field);
        ++n;
      }
    if (n == 0) return std::nullopt;
    return sum / double(n);
  };
  agg.seg_snr_noisy = mean(&EvalRow::seg_snr_noisy);
  agg.seg_snr_enhanced = mean(&EvalRow::seg_snr_enhanced);
  agg.delta_seg_snr = mean(&EvalRow::delta_seg_snr);
  agg.oracle_q_noisy = mean(&EvalRow::oracle_q_noisy);
  agg.oracle_q_enhanced = mean(&EvalRow::oracle_q_enhanced);
  agg.estimated_q_enhanced = mean(&EvalRow::estimated_q_enhanced);
  return agg;
}

inline std::string csv_field(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

}  // namespace detail

inline EvalReport evaluate(const Enhancer& enh, const std::vector<Utterance>& utts,
                           const QualityOracle& oracle = default_quality_oracle()) {
  if (utts.empty()) throw DomainError("evaluate: empty dataset");
  EvalReport rep;
  for (const auto& u : utts) rep.rows.push_back(evaluate_utterance(enh, u, oracle));
  std::vector<const EvalRow*> all, dry, rev;
  for (const auto& r : rep.rows) {
    all.push_back(&r);
    (r.reverberated ? rev : dry).push_back(&r);
  }
  rep.aggregates.push_back(detail::aggregate("mean:all", all));
  if (!dry.empty() && !rev.empty()) {
    rep.aggregates.push_back(detail::aggregate("mean:dry", dry));
    rep.aggregates.push_back(detail::aggregate("mean:reverberated", rev));
  }
  return rep;
}

inline constexpr const char* kEvalHeader =
    "utterance_id,seg_snr_noisy,seg_snr_enhanced,delta_seg_snr,oracle_q_noisy,oracle_q_enhanced,"
    "estimated_q_enhanced";

inline std::string eval_csv(const EvalReport& rep) {
  std::string out = std::string(kEvalHeader) + "\n";
  auto line = [&out](const EvalRow& r) {
    out += r.id;
    for (const auto& v : {r.seg_snr_noisy, r.seg_snr_enhanced, r.delta_seg_snr, r.oracle_q_noisy,
                          r.oracle_q_enhanced, r.estimated_q_enhanced})
      out += "," + detail::csv_field(v);
    out += "\n";
  };
  for (const auto& r : rep.rows) line(r);
  for (const auto& r : rep.aggregates) line(r);
  return out;
}

inline void write_eval_csv(const std::filesystem::path& path, const EvalReport& rep) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << eval_csv(rep);
}

}  // namespace weakdns
