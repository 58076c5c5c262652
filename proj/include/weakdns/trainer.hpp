// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// Training orchestration: supervised pre-training of both models, and the
// alternating <r-s-p> protocol in which the denoiser learns from real data
// through a frozen quality net, then the quality net catches up on fresh
// synthetic batches with the denoiser frozen.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "weakdns/checkpoint.hpp"
#include "weakdns/dsp.hpp"
#include "weakdns/error.hpp"
#include "weakdns/losses.hpp"
#include "weakdns/metrics.hpp"
#include "weakdns/mixer.hpp"
#include "weakdns/models.hpp"
#include "weakdns/optim.hpp"
#include "weakdns/random.hpp"

namespace weakdns {

// ---------------------------------------------------------------------------
// Protocol specification

struct ProtocolSpec {
  std::size_t r = 1;
  std::size_t s = 1;
  std::size_t p = 50;
  std::size_t minibatch = 3;

  void validate() const {
    detail::require(r + s >= 1, "protocol: r + s must be at least 1");
    detail::require(p >= 1, "protocol: p must be at least 1");
    detail::require(minibatch >= 1, "protocol: minibatch size must be at least 1");
  }

  /// "r-s-p", the form accepted on the command line.
  std::string str() const { return std::to_string(r) + "-" + std::to_string(s) + "-" + std::to_string(p); }
  /// "⟨r−s−p⟩" with angle brackets and minus signs.
  std::string bracketed() const {
    return "⟨" + std::to_string(r) + "−" + std::to_string(s) + "−" + std::to_string(p) + "⟩";
  }

  /// Accepts both forms above, and ASCII "<r-s-p>".
  static ProtocolSpec parse(std::string_view text, std::size_t minibatch = 3) {
    std::string t(text);
    auto replace_all = [&t](const std::string& from, const std::string& to) {
      for (std::size_t pos = t.find(from); pos != std::string::npos; pos = t.find(from, pos + to.size()))
        t.replace(pos, from.size(), to);
    };
    replace_all("⟨", "");
    replace_all("⟩", "");
    replace_all("−", "-");
    if (!t.empty() && t.front() == '<' && t.back() == '>') t = t.substr(1, t.size() - 2);

    std::vector<std::size_t> parts;
    std::size_t start = 0;
    while (true) {
      const auto dash = t.find('-', start);
      const std::string field = t.substr(start, dash == std::string::npos ? std::string::npos : dash - start);
      if (field.empty() || field.find_first_not_of("0123456789") != std::string::npos || field.size() > 9)
        throw DomainError("protocol: cannot parse '" + std::string(text) + "', expected r-s-p");
      parts.push_back(std::stoul(field));
      if (dash == std::string::npos) break;
      start = dash + 1;
    }
    if (parts.size() != 3) throw DomainError("protocol: cannot parse '" + std::string(text) + "', expected r-s-p");
    ProtocolSpec spec{parts[0], parts[1], parts[2], minibatch};
    spec.validate();
    return spec;
  }

  bool operator==(const ProtocolSpec&) const = default;
};

// ---------------------------------------------------------------------------
// Prepared utterances

/// A corpus record with its spectrograms precomputed as tensors.
struct Utterance {
  std::string id;
  UtteranceKind kind = UtteranceKind::synthetic;
  bool reverberated = false;
  Waveform noisy;
  std::optional<Waveform> clean;
  std::optional<Waveform> clean_rev;
  ComplexTensor<float> y;
  ComplexTensor<float> s;      // synthetic only
  ComplexTensor<float> s_rev;  // synthetic only
};

inline Utterance prepare_utterance(const UtteranceRecord& rec, bool reverberated, const StftConfig& cfg = {}) {
  rec.validate();
  Utterance u;
  u.id = rec.id;
  u.kind = rec.kind;
  u.reverberated = reverberated;
  u.noisy = rec.noisy;
  u.clean = rec.clean;
  u.clean_rev = rec.clean_rev;
  u.y = to_tensors<float>(stft(rec.noisy, cfg));
  if (rec.kind == UtteranceKind::synthetic) {
    if (rec.clean->size() != rec.noisy.size() || rec.clean_rev->size() != rec.noisy.size())
      throw DataError("utterance " + rec.id + ": reference length differs from noisy length");
    u.s = to_tensors<float>(stft(*rec.clean, cfg));
    u.s_rev = to_tensors<float>(stft(*rec.clean_rev, cfg));
  }
  return u;
}

inline std::vector<Utterance> prepare_corpus(const Corpus& corpus, const StftConfig& cfg = {}) {
  std::vector<Utterance> out;
  out.reserve(corpus.records.size());
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const bool rev = i < corpus.metadata.size() && corpus.metadata[i].reverberated;
    out.push_back(prepare_utterance(corpus.records[i], rev, cfg));
  }
  return out;
}

inline std::vector<Utterance> select_kind(const std::vector<Utterance>& all, UtteranceKind kind) {
  std::vector<Utterance> out;
  for (const auto& u : all)
    if (u.kind == kind) out.push_back(u);
  return out;
}

/// Normalisation statistics over the noisy amplitudes of a training set.
inline NormStats fit_norm_stats(const std::vector<Utterance>& train) {
  std::vector<std::vector<float>> amps;
  for (const auto& u : train) {
    std::vector<float> a(u.y.re.numel());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = float(std::hypot(double(u.y.re[i]), double(u.y.im[i])));
    amps.push_back(std::move(a));
  }
  if (amps.empty()) throw DomainError("fit_norm_stats: empty corpus");
  return fit_norm_stats(amps, train.front().y.re.shape()[3]);
}

// ---------------------------------------------------------------------------
// Seeded minibatch stream

/// Endless (or pass-limited) stream of minibatches over a pool of `size`
/// items. Each pass visits every item once in an order derived from
/// (seed, name, pass), so the stream's whole future is fixed by its position.
class BatchStream {
 public:
  struct Position {
    std::uint64_t pass = 0;
    std::size_t pos = 0;
    bool operator==(const Position&) const = default;
  };

  BatchStream() = default;
  BatchStream(std::string name, std::size_t size, std::uint64_t seed, std::uint64_t max_passes = 0)
      : name_(std::move(name)), size_(size), seed_(seed), max_passes_(max_passes) {
    shuffle();
  }

  /// Next n item indices. On exhaustion throws StreamExhausted and leaves
  /// the stream where it was.
  std::vector<std::size_t> next(std::size_t n) {
    BatchStream work = *this;
    std::vector<std::size_t> out;
    out.reserve(n);
    while (out.size() < n) {
      if (work.size_ == 0) throw StreamExhausted("stream '" + name_ + "' is empty");
      if (work.pos_.pos == work.size_) {
        ++work.pos_.pass;
        work.pos_.pos = 0;
        work.shuffle();
      }
      if (work.max_passes_ != 0 && work.pos_.pass >= work.max_passes_)
        throw StreamExhausted("stream '" + name_ + "' exhausted after " + std::to_string(max_passes_) + " passes");
      out.push_back(work.order_[work.pos_.pos++]);
    }
    *this = std::move(work);
    return out;
  }

  Position position() const { return pos_; }
  void seek(Position p) {
    pos_ = p;
    shuffle();
  }
  const std::string& name() const { return name_; }
  std::size_t size() const { return size_; }

  bool operator==(const BatchStream& o) const {
    return name_ == o.name_ && size_ == o.size_ && seed_ == o.seed_ && max_passes_ == o.max_passes_ && pos_ == o.pos_;
  }

 private:
  void shuffle() {
    order_.resize(size_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng = derive_rng(seed_, name_ + "/pass" + std::to_string(pos_.pass));
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  std::string name_;
  std::size_t size_ = 0;
  std::uint64_t seed_ = 0;
  std::uint64_t max_passes_ = 0;
  Position pos_;
  std::vector<std::size_t> order_;
};

// ---------------------------------------------------------------------------
// Step log

enum class Phase { fcrn_real, fcrn_synth, pesqnet, pretrain_denoiser, pretrain_quality };

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::fcrn_real: return "fcrn_real";
    case Phase::fcrn_synth: return "fcrn_synth";
    case Phase::pesqnet: return "pesqnet";
    case Phase::pretrain_denoiser: return "pretrain_denoiser";
    case Phase::pretrain_quality: return "pretrain_quality";
  }
  return "unknown";
}

struct StepRecord {
  std::uint64_t step = 0;
  std::uint64_t cycle = 0;
  Phase phase = Phase::fcrn_synth;
  std::string loss_kind;
  double loss_value = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
  std::uint64_t denoiser_checksum = 0;
  std::uint64_t quality_checksum = 0;
};

/// Collects step records and mirrors them to a CSV file when one is open.
class StepLog {
 public:
  static constexpr const char* kHeader = "step,cycle,phase,loss_kind,loss_value,lr,wall_ms";

  StepLog() = default;
  explicit StepLog(const std::filesystem::path& csv, bool append = false) { open(csv, append); }

  void open(const std::filesystem::path& csv, bool append = false) {
    if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
    const bool fresh = !append || !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
    csv_.open(csv, append ? std::ios::app : std::ios::trunc);
    if (!csv_) throw DataError("cannot write step log " + csv.string());
    if (fresh) csv_ << kHeader << '\n';
  }

  void add(StepRecord r) {
    if (csv_.is_open()) {
      char buf[64];
      csv_ << r.step << ',' << r.cycle << ',' << to_string(r.phase) << ',' << r.loss_kind << ',';
      std::snprintf(buf, sizeof buf, "%.9g,%.6g,%.3f", r.loss_value, r.lr, r.wall_ms);
      csv_ << buf << '\n';
      csv_.flush();
    }
    records_.push_back(std::move(r));
  }

  const std::vector<StepRecord>& records() const { return records_; }

 private:
  std::ofstream csv_;
  std::vector<StepRecord> records_;
};

// ---------------------------------------------------------------------------
// Loss evaluation helpers

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

/// Enhanced waveform for an enhanced spectrum given as tensors.
inline Waveform resynthesize(const ComplexTensor<float>& s_hat, std::size_t length, const StftConfig& cfg) {
  return istft(to_grid<Spectrogram>(s_hat), cfg, length);
}

}  // namespace detail

/// Mean J_synth of a denoiser over synthetic utterances.
inline double mean_j_synth(const DenoiserNet<float>& net, const NormStats& norm, const std::vector<Utterance>& utts,
                           const LossConfig& loss, const StftConfig& stft_cfg = {}) {
  if (utts.empty()) throw DomainError("mean_j_synth: empty set");
  const auto layout = BinLayout::one_sided(stft_cfg);
  NoGradScope<float> no_grad(net.params());
  double total = 0.0;
  for (const auto& u : utts) {
    if (u.kind != UtteranceKind::synthetic) throw DomainError("mean_j_synth: utterance " + u.id + " is not synthetic");
    const auto s_hat = net.enhance(u.y, norm);
    total += double(j_synth(s_hat, u.s, u.s_rev, loss, layout).item());
  }
  return total / double(utts.size());
}

/// Enhanced spectrum and oracle label for one synthetic utterance.
struct QualityTarget {
  ComplexTensor<float> s_hat;
  double label = 0.0;
};

inline QualityTarget quality_target(const DenoiserNet<float>& net, const NormStats& norm, const Utterance& u,
                                    const QualityOracle& oracle, const StftConfig& stft_cfg = {}) {
  if (u.kind != UtteranceKind::synthetic) throw DomainError("quality target needs a synthetic utterance: " + u.id);
  NoGradScope<float> no_grad(net.params());
  QualityTarget t;
  t.s_hat = net.enhance(u.y, norm);
  t.label = oracle(*u.clean, detail::resynthesize(t.s_hat, u.noisy.size(), stft_cfg));
  return t;
}

/// Mean squared error of the quality net against oracle labels, together
/// with the error of the constant predictor at the gate midpoint.
struct QualityError {
  double mse = 0.0;
  double midpoint_mse = 0.0;
  std::vector<double> labels, estimates;
};

inline QualityError quality_error(const std::vector<QualityTarget>& targets, const QualityNet<float>& quality,
                                  const NormStats& norm) {
  if (targets.empty()) throw DomainError("quality_error: empty set");
  NoGradScope<float> no_grad(quality.params());
  QualityError e;
  const double mid = 0.5 * (kQualityFloor + kQualityCeiling);
  for (const auto& t : targets) {
    const double q = quality.score(t.s_hat, norm).item();
    e.labels.push_back(t.label);
    e.estimates.push_back(q);
    e.mse += (q - t.label) * (q - t.label);
    e.midpoint_mse += (mid - t.label) * (mid - t.label);
  }
  e.mse /= double(targets.size());
  e.midpoint_mse /= double(targets.size());
  return e;
}

inline std::vector<QualityTarget> quality_targets(const DenoiserNet<float>& net, const NormStats& norm,
                                                  const std::vector<Utterance>& utts, const QualityOracle& oracle,
                                                  const StftConfig& stft_cfg = {}) {
  std::vector<QualityTarget> out;
  out.reserve(utts.size());
  for (const auto& u : utts) out.push_back(quality_target(net, norm, u, oracle, stft_cfg));
  return out;
}

/// Mean J_total; real utterances contribute J_real only.
inline double mean_j_total(const DenoiserNet<float>& net, const QualityNet<float>& quality, const NormStats& norm,
                           const std::vector<Utterance>& utts, const LossConfig& loss,
                           const StftConfig& stft_cfg = {}) {
  if (utts.empty()) throw DomainError("mean_j_total: empty set");
  const auto layout = BinLayout::one_sided(stft_cfg);
  NoGradScope<float> no_grad_d(net.params()), no_grad_q(quality.params());
  double total = 0.0;
  for (const auto& u : utts) {
    const auto s_hat = net.enhance(u.y, norm);
    const double real = j_real(quality.score(s_hat, norm)).item();
    const double synth =
        u.kind == UtteranceKind::synthetic ? double(j_synth(s_hat, u.s, u.s_rev, loss, layout).item()) : 0.0;
    total += j_total(u.kind, synth, real, loss);
  }
  return total / double(utts.size());
}

/// Mean segmental SNR improvement over synthetic utterances, measured
/// against the reverberant clean reference.
inline double mean_delta_seg_snr(const DenoiserNet<float>& net, const NormStats& norm,
                                 const std::vector<Utterance>& utts, const StftConfig& stft_cfg = {}) {
  if (utts.empty()) throw DomainError("mean_delta_seg_snr: empty set");
  NoGradScope<float> no_grad(net.params());
  double total = 0.0;
  for (const auto& u : utts) {
    const auto enhanced = detail::resynthesize(net.enhance(u.y, norm), u.noisy.size(), stft_cfg);
    total += delta_seg_snr(*u.clean_rev, u.noisy, enhanced);
  }
  return total / double(utts.size());
}

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainConfig {
  std::size_t epochs = 10;
  std::size_t minibatch = 3;
  AdamConfig adam;
  LossConfig loss;
  StftConfig stft;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct PretrainResult {
  double val_at_init = 0.0;
  std::vector<EpochRecord> epochs;
};

/// Supervised denoiser training on J_synth, one Adam step per minibatch.
inline PretrainResult pretrain_denoiser(DenoiserNet<float>& net, AdamState<float>& opt, const NormStats& norm,
                                        const std::vector<Utterance>& train, const std::vector<Utterance>& val,
                                        const PretrainConfig& cfg, StepLog* log = nullptr) {
  if (train.empty()) throw DomainError("pretrain_denoiser: empty training set");
  if (opt.m.size() != net.params().size()) opt = AdamState<float>::init(net.params());
  const auto layout = BinLayout::one_sided(cfg.stft);
  const auto& val_set = val.empty() ? train : val;
  PretrainResult result;
  result.val_at_init = mean_j_synth(net, norm, val_set, cfg.loss, cfg.stft);
  BatchStream stream("pretrain-denoiser", train.size(), cfg.seed);
  const std::size_t batches = (train.size() + cfg.minibatch - 1) / cfg.minibatch;
  std::uint64_t step = log ? log->records().size() : 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto batch = stream.next(cfg.minibatch);
      zero_grads(net.params());
      double batch_loss = 0.0;
      for (std::size_t i : batch) {
        const auto& u = train[i];
        const auto loss = j_synth(net.enhance(u.y, norm), u.s, u.s_rev, cfg.loss, layout);
        batch_loss += loss.item();
        ad::backward(ad::scale(loss, 1.0f / float(batch.size())));
      }
      adam_step(net.params(), opt, cfg.adam);
      batch_loss /= double(batch.size());
      epoch_loss += batch_loss;
      if (log)
        log->add({++step, epoch, Phase::pretrain_denoiser, "synth", batch_loss, cfg.adam.lr, detail::seconds_since(t0),
                  0, 0});
    }
    result.epochs.push_back({epoch, epoch_loss / double(batches), mean_j_synth(net, norm, val_set, cfg.loss, cfg.stft)});
  }
  return result;
}

/// Regression of the quality net onto oracle scores of utterances enhanced
/// by a fixed denoiser. The denoiser's outputs are computed once.
inline PretrainResult pretrain_qualitynet(QualityNet<float>& quality, AdamState<float>& opt,
                                          const DenoiserNet<float>& denoiser, const NormStats& norm,
                                          const std::vector<Utterance>& train, const std::vector<Utterance>& val,
                                          const PretrainConfig& cfg, const QualityOracle& oracle,
                                          StepLog* log = nullptr) {
  if (train.empty()) throw DomainError("pretrain_qualitynet: empty training set");
  if (opt.m.size() != quality.params().size()) opt = AdamState<float>::init(quality.params());
  const auto train_targets = quality_targets(denoiser, norm, train, oracle, cfg.stft);
  const auto val_targets = val.empty() ? train_targets : quality_targets(denoiser, norm, val, oracle, cfg.stft);

  PretrainResult result;
  result.val_at_init = quality_error(val_targets, quality, norm).mse;
  BatchStream stream("pretrain-quality", train.size(), cfg.seed);
  const std::size_t batches = (train.size() + cfg.minibatch - 1) / cfg.minibatch;
  std::uint64_t step = log ? log->records().size() : 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto batch = stream.next(cfg.minibatch);
      zero_grads(quality.params());
      double batch_loss = 0.0;
      for (std::size_t i : batch) {
        const auto& t = train_targets[i];
        const auto loss = j_pesqnet(quality.score(t.s_hat, norm), t.label);
        batch_loss += loss.item();
        ad::backward(ad::scale(loss, 1.0f / float(batch.size())));
      }
      adam_step(quality.params(), opt, cfg.adam);
      batch_loss /= double(batch.size());
      epoch_loss += batch_loss;
      if (log)
        log->add({++step, epoch, Phase::pretrain_quality, "pesqnet", batch_loss, cfg.adam.lr,
                  detail::seconds_since(t0), 0, 0});
    }
    result.epochs.push_back({epoch, epoch_loss / double(batches), quality_error(val_targets, quality, norm).mse});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Alternating protocol

enum class CheckpointUnit { protocol_run, minibatch };

inline std::string to_string(CheckpointUnit u) { return u == CheckpointUnit::minibatch ? "minibatch" : "protocol_run"; }

inline CheckpointUnit parse_checkpoint_unit(const std::string& s) {
  if (s == "protocol_run") return CheckpointUnit::protocol_run;
  if (s == "minibatch") return CheckpointUnit::minibatch;
  throw DomainError("checkpoint unit must be 'protocol_run' or 'minibatch', got '" + s + "'");
}

struct TrainConfig {
  ProtocolSpec protocol;
  LossConfig loss;
  StftConfig stft;
  AdamConfig denoiser_adam;
  AdamConfig quality_adam;
  std::size_t checkpoint_every = 39;
  CheckpointUnit checkpoint_unit = CheckpointUnit::protocol_run;
  std::uint64_t seed = 0;
  /// Checkpoints are written here when set; otherwise only their indices
  /// are recorded.
  std::filesystem::path out_dir;
  /// Copied into every checkpoint's metadata.
  std::map<std::string, std::string> manifest_hashes;
  /// Command-line flags exactly as typed, also copied into the metadata.
  std::map<std::string, std::string> flags;
  bool record_checksums = true;
};

enum class SwitchPosition { fcrn_update, pesqnet_update };

struct TrainState {
  DenoiserNet<float> denoiser;
  QualityNet<float> quality;
  NormStats norm;
  AdamState<float> denoiser_opt;
  AdamState<float> quality_opt;
  std::uint64_t cycle = 0;
  std::uint64_t protocol_run = 0;
  std::uint64_t step = 0;
  std::uint64_t minibatches = 0;
  std::uint64_t fcrn_updates = 0;
  std::uint64_t pesqnet_updates = 0;
  std::uint64_t seed = 0;
  SwitchPosition position = SwitchPosition::fcrn_update;
  BatchStream real;
  BatchStream synth;
  BatchStream pesq;
  std::vector<std::uint64_t> checkpoints;
};

/// Fresh protocol state around pre-trained models.
inline TrainState make_train_state(DenoiserNet<float> denoiser, QualityNet<float> quality, NormStats norm,
                                   std::size_t real_pool, std::size_t synth_pool, std::uint64_t seed) {
  TrainState s{std::move(denoiser), std::move(quality), std::move(norm)};
  s.denoiser_opt = AdamState<float>::init(s.denoiser.params());
  s.quality_opt = AdamState<float>::init(s.quality.params());
  s.seed = seed;
  s.real = BatchStream("real", real_pool, seed);
  s.synth = BatchStream("synthetic", synth_pool, seed);
  s.pesq = BatchStream("pesqnet", synth_pool, seed);
  return s;
}

class Trainer {
 public:
  Trainer(TrainConfig cfg, TrainState state, const std::vector<Utterance>& real,
          const std::vector<Utterance>& synth, QualityOracle oracle = default_quality_oracle())
      : cfg_(std::move(cfg)), state_(std::move(state)), real_(real), synth_(synth), oracle_(std::move(oracle)) {
    cfg_.protocol.validate();
    cfg_.loss.validate();
    detail::require(cfg_.checkpoint_every >= 1, "checkpoint_every must be at least 1");
    for (const auto& u : synth_)
      if (u.kind != UtteranceKind::synthetic) throw DomainError("synthetic pool holds real utterance " + u.id);
    for (const auto& u : real_)
      if (u.kind != UtteranceKind::real) throw DomainError("real pool holds synthetic utterance " + u.id);
  }

  /// One <r-s-p> cycle. All minibatches are drawn before any update, so a
  /// stream that runs dry aborts the cycle with the state untouched.
  void run_cycle() {
    const auto& proto = cfg_.protocol;
    auto real = state_.real, synth = state_.synth, pesq = state_.pesq;
    std::vector<std::vector<std::size_t>> real_batches, synth_batches, pesq_batches;
    for (std::size_t i = 0; i < proto.r; ++i) real_batches.push_back(real.next(proto.minibatch));
    for (std::size_t i = 0; i < proto.s; ++i) synth_batches.push_back(synth.next(proto.minibatch));
    for (std::size_t i = 0; i < proto.p; ++i) pesq_batches.push_back(pesq.next(proto.minibatch));
    state_.real = std::move(real);
    state_.synth = std::move(synth);
    state_.pesq = std::move(pesq);

    ++state_.cycle;
    state_.position = SwitchPosition::fcrn_update;
    for (const auto& b : real_batches) fcrn_step(b, real_, Phase::fcrn_real);
    for (const auto& b : synth_batches) fcrn_step(b, synth_, Phase::fcrn_synth);

    state_.position = SwitchPosition::pesqnet_update;
    if (phase_hook_) phase_hook_(*this, SwitchPosition::fcrn_update);
    cache_.clear();
    for (const auto& b : pesq_batches) pesqnet_step(b);
    cache_.clear();
    state_.position = SwitchPosition::fcrn_update;
    if (phase_hook_) phase_hook_(*this, SwitchPosition::pesqnet_update);

    ++state_.protocol_run;
    if (cfg_.checkpoint_unit == CheckpointUnit::protocol_run && state_.protocol_run % cfg_.checkpoint_every == 0)
      emit_checkpoint(state_.protocol_run);
  }

  void run_cycles(std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) run_cycle();
  }

  /// Called after each cycle with the cycle number; used for validation
  /// curves during stage-2 training.
  void set_cycle_hook(std::function<void(const Trainer&)> hook) { hook_ = std::move(hook); }
  /// Called when a cycle's enhancer updates end and again when its quality
  /// updates end; the position names the phase that just finished.
  void set_phase_hook(std::function<void(const Trainer&, SwitchPosition)> hook) { phase_hook_ = std::move(hook); }
  void run_cycles_with_hook(std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      run_cycle();
      if (hook_) hook_(*this);
    }
  }

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const TrainConfig& config() const { return cfg_; }
  StepLog& log() { return log_; }
  const StepLog& log() const { return log_; }

  /// Full resumable state: models, optimiser moments, counters, streams.
  void save(const std::filesystem::path& stem) const;
  void load(const std::filesystem::path& stem);

  std::filesystem::path checkpoint_stem(std::uint64_t index) const {
    return cfg_.out_dir / ("ckpt_" + std::to_string(index));
  }

 private:
  void fcrn_step(const std::vector<std::size_t>& batch, const std::vector<Utterance>& pool, Phase phase) {
    const auto t0 = std::chrono::steady_clock::now();
    auto& d = state_.denoiser.params();
    NoGradScope<float> frozen(state_.quality.params());
    zero_grads(d);
    const auto layout = BinLayout::one_sided(cfg_.stft);
    double total = 0.0;
    for (std::size_t i : batch) {
      const auto& u = pool[i];
      const auto s_hat = state_.denoiser.enhance(u.y, state_.norm);
      ad::Tensor<float> loss;
      if (u.kind == UtteranceKind::synthetic) {
        const auto synth = j_synth(s_hat, u.s, u.s_rev, cfg_.loss, layout);
        const auto real = cfg_.loss.alpha == 1.0 ? ad::Tensor<float>::scalar(0.0f)
                                                 : j_real(state_.quality.score(s_hat, state_.norm));
        loss = j_total(u.kind, synth, real, cfg_.loss);
      } else {
        loss = j_total(u.kind, ad::Tensor<float>(), j_real(state_.quality.score(s_hat, state_.norm)), cfg_.loss);
      }
      total += loss.item();
      ad::backward(ad::scale(loss, 1.0f / float(batch.size())));
    }
    adam_step(d, state_.denoiser_opt, cfg_.denoiser_adam);
    ++state_.fcrn_updates;
    record(phase, "total", total / double(batch.size()), cfg_.denoiser_adam.lr, t0);
  }

  void pesqnet_step(const std::vector<std::size_t>& batch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto& q = state_.quality.params();
    NoGradScope<float> frozen(state_.denoiser.params());
    zero_grads(q);
    double total = 0.0;
    for (std::size_t i : batch) {
      auto it = cache_.find(i);
      if (it == cache_.end())
        it = cache_.emplace(i, quality_target(state_.denoiser, state_.norm, synth_[i], oracle_, cfg_.stft)).first;
      const auto loss = j_pesqnet(state_.quality.score(it->second.s_hat, state_.norm), it->second.label);
      total += loss.item();
      ad::backward(ad::scale(loss, 1.0f / float(batch.size())));
    }
    adam_step(q, state_.quality_opt, cfg_.quality_adam);
    ++state_.pesqnet_updates;
    record(Phase::pesqnet, "pesqnet", total / double(batch.size()), cfg_.quality_adam.lr, t0);
  }

  void record(Phase phase, const char* kind, double value, double lr, std::chrono::steady_clock::time_point t0) {
    ++state_.step;
    ++state_.minibatches;
    StepRecord r{state_.step, state_.cycle, phase, kind, value, lr, detail::seconds_since(t0), 0, 0};
    if (cfg_.record_checksums) {
      r.denoiser_checksum = checksum(state_.denoiser.params());
      r.quality_checksum = checksum(state_.quality.params());
    }
    log_.add(std::move(r));
    if (cfg_.checkpoint_unit == CheckpointUnit::minibatch && state_.minibatches % cfg_.checkpoint_every == 0)
      emit_checkpoint(state_.minibatches);
  }

  void emit_checkpoint(std::uint64_t index) {
    state_.checkpoints.push_back(index);
    if (!cfg_.out_dir.empty()) save(checkpoint_stem(index));
  }

  TrainConfig cfg_;
  TrainState state_;
  const std::vector<Utterance>& real_;
  const std::vector<Utterance>& synth_;
  QualityOracle oracle_;
  StepLog log_;
  std::map<std::size_t, QualityTarget> cache_;
  std::function<void(const Trainer&)> hook_;
  std::function<void(const Trainer&, SwitchPosition)> phase_hook_;
};

// ---------------------------------------------------------------------------
// Checkpoint files

namespace detail {

inline void append_adam(std::vector<NamedArray>& out, const std::string& prefix, const ParamList<float>& params,
                        const AdamState<float>& st) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<std::uint64_t> dims(params[i].second.shape().dims.begin(), params[i].second.shape().dims.end());
    out.push_back({prefix + "m." + params[i].first, dims, st.m[i]});
    out.push_back({prefix + "v." + params[i].first, dims, st.v[i]});
  }
}

inline void load_adam(const std::vector<NamedArray>& arrays, const std::string& prefix,
                      const ParamList<float>& params, AdamState<float>& st, std::uint64_t t) {
  st = AdamState<float>::init(params);
  st.t = t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* m = find_array(arrays, prefix + "m." + params[i].first);
    const auto* v = find_array(arrays, prefix + "v." + params[i].first);
    if (!m || !v) throw DataError("checkpoint: missing optimizer moments for '" + params[i].first + "'");
    if (m->values.size() != st.m[i].size() || v->values.size() != st.v[i].size())
      throw DataError("checkpoint: optimizer moments for '" + params[i].first + "' have the wrong size");
    st.m[i] = m->values;
    st.v[i] = v->values;
  }
}

inline nlohmann::ordered_json stream_json(const BatchStream& s) {
  return {{"pass", s.position().pass}, {"pos", s.position().pos}};
}

inline void seek_stream(BatchStream& s, const nlohmann::json& j) {
  s.seek({j.at("pass").get<std::uint64_t>(), j.at("pos").get<std::size_t>()});
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw DataError("cannot open " + p.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace detail

/// Metadata written beside every checkpoint.
inline nlohmann::ordered_json checkpoint_metadata(const TrainConfig& cfg, const TrainState& st) {
  nlohmann::ordered_json j;
  j["protocol"] = cfg.protocol.str();
  j["minibatch"] = cfg.protocol.minibatch;
  j["alpha"] = cfg.loss.alpha;
  j["beta"] = cfg.loss.beta;
  j["seed"] = cfg.seed;
  j["checkpoint_unit"] = to_string(cfg.checkpoint_unit);
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["lr_denoiser"] = cfg.denoiser_adam.lr;
  j["lr_quality"] = cfg.quality_adam.lr;
  nlohmann::ordered_json hashes = nlohmann::ordered_json::object();
  for (const auto& [k, v] : cfg.manifest_hashes) hashes[k] = v;
  j["manifest_hashes"] = hashes;
  nlohmann::ordered_json flags = nlohmann::ordered_json::object();
  for (const auto& [k, v] : cfg.flags) flags[k] = v;
  j["flags"] = flags;
  j["cycle"] = st.cycle;
  j["protocol_run"] = st.protocol_run;
  j["step"] = st.step;
  j["minibatches"] = st.minibatches;
  j["fcrn_updates"] = st.fcrn_updates;
  j["pesqnet_updates"] = st.pesqnet_updates;
  j["adam_t"] = {{"denoiser", st.denoiser_opt.t}, {"quality", st.quality_opt.t}};
  j["streams"] = {{"real", detail::stream_json(st.real)},
                  {"synthetic", detail::stream_json(st.synth)},
                  {"pesqnet", detail::stream_json(st.pesq)}};
  return j;
}

inline void Trainer::save(const std::filesystem::path& stem) const {
  std::vector<NamedArray> arrays;
  state_.denoiser.append_to(arrays);
  state_.quality.append_to(arrays);
  append_norm(arrays, state_.norm);
  detail::append_adam(arrays, "opt.denoiser.", state_.denoiser.params(), state_.denoiser_opt);
  detail::append_adam(arrays, "opt.quality.", state_.quality.params(), state_.quality_opt);
  write_container(std::filesystem::path(stem.string() + ".wdns"), arrays);
  std::ofstream meta(stem.string() + ".json");
  if (!meta) throw DataError("cannot write " + stem.string() + ".json");
  meta << checkpoint_metadata(cfg_, state_).dump(2) << '\n';
}

inline void Trainer::load(const std::filesystem::path& stem) {
  const auto arrays = read_container(std::filesystem::path(stem.string() + ".wdns"));
  const auto j = nlohmann::json::parse(detail::read_text(stem.string() + ".json"));
  state_.denoiser.load_from(arrays);
  state_.quality.load_from(arrays);
  state_.norm = load_norm(arrays);
  detail::load_adam(arrays, "opt.denoiser.", state_.denoiser.params(), state_.denoiser_opt,
                    j.at("adam_t").at("denoiser").get<std::uint64_t>());
  detail::load_adam(arrays, "opt.quality.", state_.quality.params(), state_.quality_opt,
                    j.at("adam_t").at("quality").get<std::uint64_t>());
  state_.cycle = j.at("cycle").get<std::uint64_t>();
  state_.protocol_run = j.at("protocol_run").get<std::uint64_t>();
  state_.step = j.at("step").get<std::uint64_t>();
  state_.minibatches = j.at("minibatches").get<std::uint64_t>();
  state_.fcrn_updates = j.at("fcrn_updates").get<std::uint64_t>();
  state_.pesqnet_updates = j.at("pesqnet_updates").get<std::uint64_t>();
  detail::seek_stream(state_.real, j.at("streams").at("real"));
  detail::seek_stream(state_.synth, j.at("streams").at("synthetic"));
  detail::seek_stream(state_.pesq, j.at("streams").at("pesqnet"));
}

// ---------------------------------------------------------------------------
// Model bundles on disk

/// What a checkpoint file may hold: a denoiser or the identity marker, a
/// quality net, and the normalisation statistics.
struct ModelBundle {
  std::optional<DenoiserNet<float>> denoiser;
  std::optional<QualityNet<float>> quality;
  NormStats norm;
  bool identity = false;
};

inline void save_bundle(const std::filesystem::path& path, const ModelBundle& b) {
  std::vector<NamedArray> arrays;
  if (b.identity) arrays.push_back({topology_record("denoiser.", kIdentityTopology), {0}, {}});
  if (b.denoiser) b.denoiser->append_to(arrays);
  if (b.quality) b.quality->append_to(arrays);
  append_norm(arrays, b.norm);
  write_container(path, arrays);
}

inline bool has_topology(const std::vector<NamedArray>& arrays, const std::string& prefix) {
  for (const auto& a : arrays)
    if (a.name.rfind("@topology/" + prefix, 0) == 0) return true;
  return false;
}

inline ModelBundle load_bundle(const std::filesystem::path& path) {
  const auto arrays = read_container(path);
  ModelBundle b;
  if (find_array(arrays, topology_record("denoiser.", kIdentityTopology))) {
    b.identity = true;
  } else if (has_topology(arrays, "denoiser.")) {
    b.denoiser = DenoiserNet<float>::init(0);
    b.denoiser->load_from(arrays);
  }
  if (has_topology(arrays, "quality.")) {
    b.quality = QualityNet<float>::init(0);
    b.quality->load_from(arrays);
  }
  if (find_array(arrays, "norm.mean")) b.norm = load_norm(arrays);
  return b;
}

// ---------------------------------------------------------------------------
// Model selection

struct Selection {
  std::vector<double> real_losses;
  std::vector<double> synth_losses;
  std::vector<std::size_t> real_ranking;   // best first
  std::vector<std::size_t> synth_ranking;  // best first
  std::optional<std::size_t> chosen_real;
  std::optional<std::size_t> chosen_synth;
};

namespace detail {
inline std::vector<std::size_t> ranking(const std::vector<double>& losses) {
  std::vector<std::size_t> idx(losses.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });
  return idx;
}
}  // namespace detail

/// Rankings from per-candidate validation losses. Either list may be empty
/// when the corresponding validation set is absent, but not both.
inline Selection rank_candidates(std::vector<double> real_losses, std::vector<double> synth_losses) {
  if (real_losses.empty() && synth_losses.empty()) throw DomainError("select_model: no checkpoints to choose from");
  Selection s;
  s.real_losses = std::move(real_losses);
  s.synth_losses = std::move(synth_losses);
  s.real_ranking = detail::ranking(s.real_losses);
  s.synth_ranking = detail::ranking(s.synth_losses);
  if (!s.real_ranking.empty()) s.chosen_real = s.real_ranking.front();
  if (!s.synth_ranking.empty()) s.chosen_synth = s.synth_ranking.front();
  return s;
}

struct Candidate {
  std::string name;
  DenoiserNet<float> denoiser;
  QualityNet<float> quality;
};

/// Mean J_total of every candidate on the real and the synthetic
/// validation sets, ranked separately.
inline Selection select_model(const std::vector<Candidate>& candidates, const NormStats& norm,
                              const std::vector<Utterance>& val_real, const std::vector<Utterance>& val_synth,
                              const LossConfig& loss, const StftConfig& stft_cfg = {}) {
  if (candidates.empty()) throw DomainError("select_model: no checkpoints to choose from");
  std::vector<double> real, synth;
  for (const auto& c : candidates) {
    if (!val_real.empty()) real.push_back(mean_j_total(c.denoiser, c.quality, norm, val_real, loss, stft_cfg));
    if (!val_synth.empty()) synth.push_back(mean_j_total(c.denoiser, c.quality, norm, val_synth, loss, stft_cfg));
  }
  return rank_candidates(std::move(real), std::move(synth));
}

}  // namespace weakdns
