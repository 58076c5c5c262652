// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "train_fixture.hpp"
#include "weakdns/trainer.hpp"

namespace weakdns {
namespace {

namespace fs = std::filesystem;

// Quarter-second utterances keep a 52-step cycle well under a second.
const testing::TrainData& tiny() {
  static const auto data = testing::make_train_data(9, 4, 0.25, 3);
  return data;
}

TrainConfig tiny_config(const std::string& protocol = "1-1-50") {
  TrainConfig cfg;
  cfg.protocol = ProtocolSpec::parse(protocol);
  cfg.denoiser_adam.lr = 1e-3;
  cfg.quality_adam.lr = 1e-3;
  cfg.seed = 11;
  return cfg;
}

Trainer tiny_trainer(const TrainConfig& cfg) {
  const auto& d = tiny();
  return Trainer(cfg,
                 make_train_state(DenoiserNet<float>::init(1), QualityNet<float>::init(2), d.norm, d.real.size(),
                                  d.synth.size(), cfg.seed),
                 d.real, d.synth);
}

std::vector<Phase> phases(const StepLog& log) {
  std::vector<Phase> out;
  for (const auto& r : log.records()) out.push_back(r.phase);
  return out;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("weakdns_trainer_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------

TEST(ProtocolSpec, ParsesAndPrintsBothForms) {
  const auto a = ProtocolSpec::parse("1-1-50");
  EXPECT_EQ(a.r, 1u);
  EXPECT_EQ(a.s, 1u);
  EXPECT_EQ(a.p, 50u);
  EXPECT_EQ(a.minibatch, 3u);
  EXPECT_EQ(a.str(), "1-1-50");
  EXPECT_EQ(a.bracketed(), "⟨1−1−50⟩");
  EXPECT_EQ(ProtocolSpec::parse(a.bracketed()), a);
  EXPECT_EQ(ProtocolSpec::parse("<0-2-50>").str(), "0-2-50");
  EXPECT_EQ(ProtocolSpec::parse(ProtocolSpec::parse("⟨0−2−50⟩").bracketed()).bracketed(), "⟨0−2−50⟩");
}

TEST(ProtocolSpec, RejectsInvalid) {
  for (const char* bad : {"", "1-1", "1-1-50-2", "a-1-50", "0-0-50", "1-1-0", "1--50", "-1-1-50", "1-1-50x"})
    EXPECT_THROW(ProtocolSpec::parse(bad), DomainError) << bad;
}

TEST(BatchStream, EachPassIsAPermutation) {
  BatchStream s("x", 7, 5);
  for (int pass = 0; pass < 3; ++pass) {
    std::vector<std::size_t> seen;
    for (int i = 0; i < 7; ++i) seen.push_back(s.next(1)[0]);
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(seen[i], i);
  }
}

TEST(BatchStream, SeekReproducesFuture) {
  BatchStream a("x", 10, 5);
  (void)a.next(13);
  BatchStream b("x", 10, 5);
  b.seek(a.position());
  EXPECT_EQ(a.next(25), b.next(25));
  EXPECT_NE(BatchStream("x", 10, 5).next(10), BatchStream("y", 10, 5).next(10));
}

TEST(BatchStream, ExhaustionLeavesStreamIntact) {
  BatchStream s("x", 4, 1, 1);
  (void)s.next(3);
  const auto before = s;
  EXPECT_THROW(s.next(3), StreamExhausted);
  EXPECT_EQ(s, before);
  EXPECT_EQ(s.next(1).size(), 1u);
  EXPECT_THROW(BatchStream("empty", 0, 1).next(1), StreamExhausted);
}

TEST(ProtocolCycle, OneOneFiftyPhaseSequence) {
  auto t = tiny_trainer(tiny_config("1-1-50"));
  t.run_cycles(2);
  std::vector<Phase> expect;
  for (int c = 0; c < 2; ++c) {
    expect.push_back(Phase::fcrn_real);
    expect.push_back(Phase::fcrn_synth);
    expect.insert(expect.end(), 50, Phase::pesqnet);
  }
  EXPECT_EQ(phases(t.log()), expect);
  EXPECT_EQ(t.log().records().back().cycle, 2u);
}

TEST(ProtocolCycle, ZeroTwoFiftyHasNoRealStep) {
  auto t = tiny_trainer(tiny_config("0-2-50"));
  t.run_cycle();
  std::vector<Phase> expect{Phase::fcrn_synth, Phase::fcrn_synth};
  expect.insert(expect.end(), 50, Phase::pesqnet);
  EXPECT_EQ(phases(t.log()), expect);
}

TEST(ProtocolCycle, FrozenModelUnchangedWithinPhase) {
  auto t = tiny_trainer(tiny_config("2-2-5"));
  const auto d0 = checksum(t.state().denoiser.params());
  t.run_cycles(3);
  const auto& recs = t.log().records();
  std::uint64_t prev_d = d0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].phase == Phase::pesqnet) {
      EXPECT_EQ(recs[i].denoiser_checksum, prev_d) << "step " << recs[i].step;
      if (i > 0) EXPECT_NE(recs[i].quality_checksum, recs[i - 1].quality_checksum);
    } else {
      if (i > 0) EXPECT_EQ(recs[i].quality_checksum, recs[i - 1].quality_checksum) << "step " << recs[i].step;
      EXPECT_NE(recs[i].denoiser_checksum, prev_d);
    }
    prev_d = recs[i].denoiser_checksum;
  }
}

TEST(ProtocolCycle, UpdateCountsFollowProtocolArithmetic) {
  auto t = tiny_trainer(tiny_config("2-1-4"));
  t.run_cycles(3);
  EXPECT_EQ(t.state().fcrn_updates, 3u * 3u);
  EXPECT_EQ(t.state().pesqnet_updates, 3u * 4u);
  EXPECT_EQ(t.state().protocol_run, 3u);
}

TEST(ProtocolCycle, ExhaustedStreamAbortsWithStateIntact) {
  const auto& d = tiny();
  auto cfg = tiny_config("1-1-3");
  const std::vector<Utterance> no_real;
  Trainer t(cfg,
            make_train_state(DenoiserNet<float>::init(1), QualityNet<float>::init(2), d.norm, 0, d.synth.size(),
                             cfg.seed),
            no_real, d.synth);
  const auto d0 = checksum(t.state().denoiser.params());
  const auto q0 = checksum(t.state().quality.params());
  const auto synth_pos = t.state().synth.position();
  EXPECT_THROW(t.run_cycle(), StreamExhausted);
  EXPECT_EQ(checksum(t.state().denoiser.params()), d0);
  EXPECT_EQ(checksum(t.state().quality.params()), q0);
  EXPECT_EQ(t.state().synth.position(), synth_pos);
  EXPECT_EQ(t.state().cycle, 0u);
  EXPECT_TRUE(t.log().records().empty());
}

TEST(Checkpoints, CadenceInProtocolRuns) {
  auto cfg = tiny_config("0-1-1");
  cfg.checkpoint_every = 4;
  auto t = tiny_trainer(cfg);
  t.run_cycles(13);
  EXPECT_EQ(t.state().checkpoints, (std::vector<std::uint64_t>{4, 8, 12}));
}

TEST(Checkpoints, CadenceInMinibatches) {
  auto cfg = tiny_config("0-1-2");
  cfg.checkpoint_every = 4;
  cfg.checkpoint_unit = CheckpointUnit::minibatch;
  auto t = tiny_trainer(cfg);
  t.run_cycles(3);  // 9 minibatches
  EXPECT_EQ(t.state().checkpoints, (std::vector<std::uint64_t>{4, 8}));
}

TEST(Checkpoints, FilesCarryProtocolAndHashes) {
  auto cfg = tiny_config("1-1-2");
  cfg.checkpoint_every = 1;
  cfg.loss.alpha = 0.9;
  cfg.out_dir = scratch_dir("files");
  cfg.manifest_hashes["train"] = "abc123";
  auto t = tiny_trainer(cfg);
  t.run_cycle();
  ASSERT_TRUE(fs::exists(cfg.out_dir / "ckpt_1.wdns"));
  const auto j = nlohmann::json::parse(detail::read_text(cfg.out_dir / "ckpt_1.json"));
  EXPECT_EQ(j.at("protocol"), "1-1-2");
  EXPECT_EQ(j.at("alpha"), 0.9);
  EXPECT_EQ(j.at("beta"), 0.9);
  EXPECT_EQ(j.at("seed"), 11);
  EXPECT_EQ(j.at("manifest_hashes").at("train"), "abc123");
  const auto bundle = load_bundle(cfg.out_dir / "ckpt_1.wdns");
  ASSERT_TRUE(bundle.denoiser && bundle.quality);
  EXPECT_EQ(checksum(bundle.denoiser->params()), checksum(t.state().denoiser.params()));
  fs::remove_all(cfg.out_dir);
}

TEST(Resume, MatchesUninterruptedRunBitExact) {
  auto cfg = tiny_config("1-1-5");
  auto straight = tiny_trainer(cfg);
  straight.run_cycles(2);

  const auto dir = scratch_dir("resume");
  auto first = tiny_trainer(cfg);
  first.run_cycle();
  first.save(dir / "state");
  auto resumed = tiny_trainer(cfg);  // fresh models, overwritten by load
  resumed.load(dir / "state");
  resumed.run_cycle();

  const auto& a = straight.state();
  const auto& b = resumed.state();
  EXPECT_EQ(checksum(a.denoiser.params()), checksum(b.denoiser.params()));
  EXPECT_EQ(checksum(a.quality.params()), checksum(b.quality.params()));
  EXPECT_EQ(a.denoiser_opt, b.denoiser_opt);
  EXPECT_EQ(a.quality_opt, b.quality_opt);
  EXPECT_EQ(a.step, b.step);
  EXPECT_EQ(a.real, b.real);
  EXPECT_EQ(a.synth, b.synth);
  EXPECT_EQ(a.pesq, b.pesq);
  const auto& la = straight.log().records();
  const auto& lb = resumed.log().records();
  ASSERT_EQ(lb.size(), la.size() / 2);
  for (std::size_t i = 0; i < lb.size(); ++i) EXPECT_EQ(la[la.size() / 2 + i].loss_value, lb[i].loss_value);
  fs::remove_all(dir);
}

TEST(StepLog, CsvColumns) {
  const auto dir = scratch_dir("log");
  {
    StepLog log(dir / "steps.csv");
    log.add({1, 1, Phase::fcrn_real, "total", 0.5, 1e-4, 12.0, 0, 0});
    log.add({2, 1, Phase::pesqnet, "pesqnet", 0.25, 1e-4, 3.0, 0, 0});
  }
  std::ifstream f(dir / "steps.csv");
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  EXPECT_EQ(header, "step,cycle,phase,loss_kind,loss_value,lr,wall_ms");
  EXPECT_EQ(row.substr(0, 24), "1,1,fcrn_real,total,0.5,");
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Pre-training

const testing::TrainData& eight() {
  static const auto data = testing::make_train_data(8, 0, 0.5, 4, "pre");
  return data;
}

PretrainConfig pre_config(std::size_t epochs) {
  PretrainConfig cfg;
  cfg.epochs = epochs;
  cfg.adam.lr = 1e-3;
  cfg.seed = 7;
  return cfg;
}

TEST(PretrainDenoiser, OneEpochLowersTrainingLoss) {
  const auto& d = eight();
  auto net = DenoiserNet<float>::init(7);
  AdamState<float> opt;
  const auto r = pretrain_denoiser(net, opt, d.norm, d.synth, d.synth, pre_config(1));
  ASSERT_EQ(r.epochs.size(), 1u);
  EXPECT_LT(r.epochs[0].val_loss, r.val_at_init);
}

TEST(PretrainDenoiser, ZeroEpochsKeepsInitialisation) {
  const auto& d = eight();
  auto net = DenoiserNet<float>::init(7);
  const auto before = checksum(net.params());
  AdamState<float> opt;
  const auto r = pretrain_denoiser(net, opt, d.norm, d.synth, {}, pre_config(0));
  EXPECT_TRUE(r.epochs.empty());
  EXPECT_EQ(checksum(net.params()), before);
}

TEST(PretrainDenoiser, DeterministicForSeed) {
  const auto& d = eight();
  auto run = [&] {
    auto net = DenoiserNet<float>::init(7);
    AdamState<float> opt;
    return pretrain_denoiser(net, opt, d.norm, d.synth, d.synth, pre_config(2)).epochs.back().val_loss;
  };
  EXPECT_EQ(run(), run());
}

TEST(PretrainQualityNet, LowersValidationErrorAndLeavesDenoiser) {
  const auto& d = eight();
  const auto denoiser = DenoiserNet<float>::init(7);
  const auto dsum = checksum(denoiser.params());
  auto quality = QualityNet<float>::init(8);
  AdamState<float> opt;
  auto cfg = pre_config(15);
  const auto r = pretrain_qualitynet(quality, opt, denoiser, d.norm, d.synth, d.synth, cfg, default_quality_oracle());
  EXPECT_LT(r.epochs.back().val_loss, r.val_at_init);
  EXPECT_EQ(checksum(denoiser.params()), dsum);
  const auto err = quality_error(quality_targets(denoiser, d.norm, d.synth, default_quality_oracle()), quality, d.norm);
  for (double q : err.estimates) {
    EXPECT_GT(q, 1.04);
    EXPECT_LT(q, 4.64);
  }
  for (double l : err.labels) {
    EXPECT_GE(l, 1.04);
    EXPECT_LE(l, 4.64);
  }
}

// ---------------------------------------------------------------------------
// Model selection

TEST(SelectModel, SingleCandidateChosen) {
  const auto s = rank_candidates({}, {3.0});
  EXPECT_EQ(s.chosen_synth, 0u);
  EXPECT_FALSE(s.chosen_real.has_value());
}

TEST(SelectModel, ArgminOfSyntheticLosses) {
  const auto s = rank_candidates({0.4, 0.3, 0.2}, {1.2, 0.8, 1.5});
  EXPECT_EQ(s.chosen_synth, 1u);
  EXPECT_EQ(s.synth_ranking, (std::vector<std::size_t>{1, 0, 2}));
  EXPECT_EQ(s.chosen_real, 2u);
  EXPECT_EQ(s.real_ranking, (std::vector<std::size_t>{2, 1, 0}));
}

TEST(SelectModel, EmptyCandidateListRejected) {
  EXPECT_THROW(rank_candidates({}, {}), DomainError);
  EXPECT_THROW(select_model({}, tiny().norm, tiny().real, tiny().synth, LossConfig{}), DomainError);
}

TEST(SelectModel, EvaluatesBothValidationSets) {
  const auto& d = tiny();
  std::vector<Candidate> cands;
  for (std::uint64_t seed : {1, 2})
    cands.push_back({"c" + std::to_string(seed), DenoiserNet<float>::init(seed), QualityNet<float>::init(seed)});
  const auto s = select_model(cands, d.norm, d.real, d.synth, LossConfig{});
  EXPECT_EQ(s.real_losses.size(), 2u);
  EXPECT_EQ(s.synth_losses.size(), 2u);
  EXPECT_EQ(s.real_losses[0], mean_j_total(cands[0].denoiser, cands[0].quality, d.norm, d.real, LossConfig{}));
}

}  // namespace
}  // namespace weakdns
