// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// The single JSON document describing a run. Every object is parsed
// strictly: unknown keys and wrongly typed values raise ConfigError.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include "json.hpp"
#include "weakdns/dsp.hpp"
#include "weakdns/error.hpp"
#include "weakdns/losses.hpp"
#include "weakdns/mixer.hpp"
#include "weakdns/optim.hpp"
#include "weakdns/trainer.hpp"

namespace weakdns {

struct DataPaths {
  std::string manifest;       // source manifest for `mix`
  std::string dataset;        // mixed synthetic training corpus
  std::string real_dataset;   // real recordings (noisy only)
  std::string val_dataset;    // synthetic validation corpus
  std::string real_val_dataset;

  bool operator==(const DataPaths&) const = default;
};

struct PretrainSettings {
  std::size_t denoiser_epochs = 10;
  std::size_t quality_epochs = 10;

  bool operator==(const PretrainSettings&) const = default;
};

struct RunConfig {
  StftConfig stft;
  LossConfig loss;
  ProtocolSpec protocol;
  AdamConfig denoiser_adam;
  AdamConfig quality_adam;
  PretrainSettings pretrain;
  CorpusConfig corpus;
  DataPaths data;
  /// Stage-2 length in protocol cycles.
  std::size_t cycles = 78;
  std::size_t checkpoint_every = 39;
  CheckpointUnit checkpoint_unit = CheckpointUnit::protocol_run;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  void validate() const {
    try {
      stft.validate();
      loss.validate();
      protocol.validate();
      corpus.validate();
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
    for (const auto* a : {&denoiser_adam, &quality_adam})
      if (!(a->lr > 0.0) || !(a->beta1 >= 0.0 && a->beta1 < 1.0) || !(a->beta2 >= 0.0 && a->beta2 < 1.0) ||
          !(a->eps > 0.0))
        throw ConfigError("adam: need lr > 0, betas in [0, 1) and eps > 0");
    if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
    if (stft != StftConfig{}) throw ConfigError("stft: only the 384/192/512/260 layout is supported by the models");
  }

  bool operator==(const RunConfig& o) const {
    auto adam_eq = [](const AdamConfig& a, const AdamConfig& b) {
      return a.lr == b.lr && a.beta1 == b.beta1 && a.beta2 == b.beta2 && a.eps == b.eps;
    };
    auto corpus_eq = [](const CorpusConfig& a, const CorpusConfig& b) {
      return a.snr_lo == b.snr_lo && a.snr_hi == b.snr_hi && a.snr_values == b.snr_values &&
             a.reverb_fraction == b.reverb_fraction && a.rir.t60_lo == b.rir.t60_lo && a.rir.t60_hi == b.rir.t60_hi &&
             a.rir.direct_to_reverb_db == b.rir.direct_to_reverb_db && a.rir.max_taps == b.rir.max_taps &&
             a.seed == b.seed;
    };
    return stft == o.stft && loss.alpha == o.loss.alpha && loss.beta == o.loss.beta && protocol == o.protocol &&
           adam_eq(denoiser_adam, o.denoiser_adam) && adam_eq(quality_adam, o.quality_adam) &&
           pretrain == o.pretrain && corpus_eq(corpus, o.corpus) && data == o.data && cycles == o.cycles &&
           checkpoint_every == o.checkpoint_every && checkpoint_unit == o.checkpoint_unit && seed == o.seed &&
           out_dir == o.out_dir;
  }
};

namespace detail {

using ojson = nlohmann::ordered_json;

/// Reads members of one JSON object, rejecting keys that are never read.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string sub(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const auto& k : seen_) known = known || k == it.key();
      if (!known) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline ojson adam_json(const AdamConfig& a) {
  return ojson{{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
}

inline void read_adam(const nlohmann::json& j, const std::string& path, AdamConfig& a) {
  StrictObject o(j, path);
  o.get("lr", a.lr);
  o.get("beta1", a.beta1);
  o.get("beta2", a.beta2);
  o.get("eps", a.eps);
  o.finish();
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  using detail::ojson;
  ojson j;
  j["stft"] = ojson{{"frame_len", c.stft.frame_len}, {"hop", c.stft.hop}, {"fft_size", c.stft.fft_size},
                    {"bins", c.stft.bins}};
  j["loss"] = ojson{{"alpha", c.loss.alpha}, {"beta", c.loss.beta}};
  j["protocol"] = c.protocol.str();
  j["minibatch"] = c.protocol.minibatch;
  j["optimizer"] = ojson{{"denoiser", detail::adam_json(c.denoiser_adam)},
                         {"quality", detail::adam_json(c.quality_adam)}};
  j["pretrain"] = ojson{{"denoiser_epochs", c.pretrain.denoiser_epochs},
                        {"quality_epochs", c.pretrain.quality_epochs}};
  j["corpus"] = ojson{{"snr_lo", c.corpus.snr_lo},
                      {"snr_hi", c.corpus.snr_hi},
                      {"snr_values", c.corpus.snr_values},
                      {"reverb_fraction", c.corpus.reverb_fraction},
                      {"t60_lo", c.corpus.rir.t60_lo},
                      {"t60_hi", c.corpus.rir.t60_hi},
                      {"direct_to_reverb_db", c.corpus.rir.direct_to_reverb_db},
                      {"rir_max_taps", c.corpus.rir.max_taps},
                      {"seed", c.corpus.seed}};
  j["data"] = ojson{{"manifest", c.data.manifest},
                    {"dataset", c.data.dataset},
                    {"real_dataset", c.data.real_dataset},
                    {"val_dataset", c.data.val_dataset},
                    {"real_val_dataset", c.data.real_val_dataset}};
  j["cycles"] = c.cycles;
  j["checkpoint_every"] = c.checkpoint_every;
  j["checkpoint_unit"] = to_string(c.checkpoint_unit);
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  return j;
}

/// Missing keys keep their defaults; the result is validated.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::StrictObject root(j, "config");
  if (const auto* s = root.child("stft")) {
    detail::StrictObject o(*s, root.sub("stft"));
    o.get("frame_len", c.stft.frame_len);
    o.get("hop", c.stft.hop);
    o.get("fft_size", c.stft.fft_size);
    o.get("bins", c.stft.bins);
    o.finish();
  }
  if (const auto* s = root.child("loss")) {
    detail::StrictObject o(*s, root.sub("loss"));
    o.get("alpha", c.loss.alpha);
    o.get("beta", c.loss.beta);
    o.finish();
  }
  std::size_t minibatch = c.protocol.minibatch;
  root.get("minibatch", minibatch);
  std::string protocol = c.protocol.str();
  root.get("protocol", protocol);
  try {
    c.protocol = ProtocolSpec::parse(protocol, minibatch);
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  if (const auto* s = root.child("optimizer")) {
    detail::StrictObject o(*s, root.sub("optimizer"));
    if (const auto* a = o.child("denoiser")) detail::read_adam(*a, o.sub("denoiser"), c.denoiser_adam);
    if (const auto* a = o.child("quality")) detail::read_adam(*a, o.sub("quality"), c.quality_adam);
    o.finish();
  }
  if (const auto* s = root.child("pretrain")) {
    detail::StrictObject o(*s, root.sub("pretrain"));
    o.get("denoiser_epochs", c.pretrain.denoiser_epochs);
    o.get("quality_epochs", c.pretrain.quality_epochs);
    o.finish();
  }
  if (const auto* s = root.child("corpus")) {
    detail::StrictObject o(*s, root.sub("corpus"));
    o.get("snr_lo", c.corpus.snr_lo);
    o.get("snr_hi", c.corpus.snr_hi);
    o.get("snr_values", c.corpus.snr_values);
    o.get("reverb_fraction", c.corpus.reverb_fraction);
    o.get("t60_lo", c.corpus.rir.t60_lo);
    o.get("t60_hi", c.corpus.rir.t60_hi);
    o.get("direct_to_reverb_db", c.corpus.rir.direct_to_reverb_db);
    o.get("rir_max_taps", c.corpus.rir.max_taps);
    o.get("seed", c.corpus.seed);
    o.finish();
  }
  if (const auto* s = root.child("data")) {
    detail::StrictObject o(*s, root.sub("data"));
    o.get("manifest", c.data.manifest);
    o.get("dataset", c.data.dataset);
    o.get("real_dataset", c.data.real_dataset);
    o.get("val_dataset", c.data.val_dataset);
    o.get("real_val_dataset", c.data.real_val_dataset);
    o.finish();
  }
  root.get("cycles", c.cycles);
  root.get("checkpoint_every", c.checkpoint_every);
  std::string unit = to_string(c.checkpoint_unit);
  root.get("checkpoint_unit", unit);
  try {
    c.checkpoint_unit = parse_checkpoint_unit(unit);
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  root.get("seed", c.seed);
  root.get("out_dir", c.out_dir);
  root.finish();
  c.validate();
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

inline std::string serialize_run_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace weakdns
