// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// Small prepared corpora for trainer tests.

#include "weakdns/fixture.hpp"
#include "weakdns/trainer.hpp"

namespace weakdns::testing {

struct TrainData {
  std::vector<Utterance> synth;
  std::vector<Utterance> real;
  NormStats norm;
};

inline TrainData make_train_data(std::size_t clean, std::size_t real, double seconds, std::uint64_t seed,
                                 const std::string& prefix = "utt") {
  fixture::FixtureSpec spec;
  spec.clean = clean;
  spec.noise = 5;
  spec.real = real;
  spec.seconds = seconds;
  spec.seed = seed;
  spec.prefix = prefix;
  CorpusConfig cfg;
  cfg.snr_lo = 0.0;
  cfg.snr_hi = 10.0;
  cfg.seed = seed;
  const auto all = prepare_corpus(mix_corpus(fixture::make_sources(spec), cfg));
  TrainData d;
  d.synth = select_kind(all, UtteranceKind::synthetic);
  d.real = select_kind(all, UtteranceKind::real);
  d.norm = fit_norm_stats(d.synth);
  return d;
}

}  // namespace weakdns::testing
