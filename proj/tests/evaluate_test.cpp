// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "test_util.hpp"
#include "train_fixture.hpp"
#include "weakdns/evaluate.hpp"

namespace weakdns {
namespace {

ModelBundle identity_bundle() {
  ModelBundle b;
  b.identity = true;
  return b;
}

ModelBundle random_bundle(const NormStats& norm) {
  ModelBundle b;
  b.denoiser = DenoiserNet<float>::init(3);
  b.quality = QualityNet<float>::init(4);
  b.norm = norm;
  return b;
}

const testing::TrainData& data() {
  static const auto d = testing::make_train_data(6, 2, 1.0, 5, "ev");
  return d;
}

TEST(Enhancer, SilenceStaysSilent) {
  const Enhancer e(random_bundle(data().norm));
  const Waveform silence{std::vector<float>(12345, 0.0f)};
  const Waveform out = e.enhance(silence);
  ASSERT_EQ(out.size(), silence.size());
  for (float v : out.samples) ASSERT_EQ(v, 0.0f);
}

TEST(Enhancer, OutputLengthMatchesInput) {
  const Enhancer e(random_bundle(data().norm));
  for (std::size_t n : {1u, 191u, 384u, 8000u, 16001u}) {
    const Waveform x = testing::random_waveform(n, n);
    EXPECT_EQ(e.enhance(x).size(), n);
  }
}

TEST(Enhancer, RejectsWrongSampleRate) {
  const Enhancer e(identity_bundle());
  Waveform x = testing::random_waveform(1000, 1);
  x.sample_rate = 8000;
  EXPECT_THROW(e.enhance(x), DomainError);
}

TEST(Enhancer, RequiresAModel) { EXPECT_THROW(Enhancer(ModelBundle{}), DataError); }

TEST(Enhancer, IdentityPassesThrough) {
  const Enhancer e(identity_bundle());
  const Waveform x = testing::random_waveform(5000, 9);
  EXPECT_EQ(e.enhance(x).samples, x.samples);
}

TEST(Evaluate, IdentityGivesZeroDelta) {
  const auto rep = evaluate(Enhancer(identity_bundle()), data().synth);
  ASSERT_EQ(rep.rows.size(), data().synth.size());
  for (const auto& r : rep.rows) {
    ASSERT_TRUE(r.delta_seg_snr.has_value());
    EXPECT_EQ(*r.delta_seg_snr, 0.0) << r.id;
    EXPECT_EQ(*r.oracle_q_enhanced, *r.oracle_q_noisy);
    EXPECT_FALSE(r.estimated_q_enhanced.has_value());
  }
}

TEST(Evaluate, SingleUtteranceHasOneAggregate) {
  const std::vector<Utterance> one{data().synth.front()};
  const auto rep = evaluate(Enhancer(random_bundle(data().norm)), one);
  ASSERT_EQ(rep.rows.size(), 1u);
  ASSERT_EQ(rep.aggregates.size(), 1u);
  std::istringstream csv(eval_csv(rep));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], kEvalHeader);
  EXPECT_EQ(lines[1].rfind(one.front().id + ",", 0), 0u);
  EXPECT_EQ(lines[2].rfind("mean:all,", 0), 0u);
}

TEST(Evaluate, AggregatesAreRowMeans) {
  const auto rep = evaluate(Enhancer(random_bundle(data().norm)), data().synth);
  ASSERT_EQ(rep.aggregates.size(), 3u);
  for (const auto& agg : rep.aggregates) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rep.rows) {
      const bool in = agg.id == "mean:all" || (agg.id == "mean:reverberated") == r.reverberated;
      if (!in) continue;
      sum += *r.delta_seg_snr;
      ++n;
    }
    ASSERT_GT(n, 0u);
    EXPECT_NEAR(*agg.delta_seg_snr, sum / double(n), 1e-9) << agg.id;
  }
}

TEST(Evaluate, RealRowsHaveNoReferenceColumns) {
  const auto rep = evaluate(Enhancer(random_bundle(data().norm)), data().real);
  for (const auto& r : rep.rows) {
    EXPECT_FALSE(r.seg_snr_noisy.has_value());
    EXPECT_FALSE(r.delta_seg_snr.has_value());
    EXPECT_TRUE(r.estimated_q_enhanced.has_value());
  }
  EXPECT_FALSE(rep.aggregates.front().delta_seg_snr.has_value());
}

TEST(Evaluate, EmptyDatasetThrows) { EXPECT_THROW(evaluate(Enhancer(identity_bundle()), {}), DomainError); }

TEST(Evaluate, BundleRoundTripGivesSameReport) {
  const auto dir = std::filesystem::temp_directory_path() / "weakdns_evaluate_test";
  std::filesystem::create_directories(dir);
  const auto b = random_bundle(data().norm);
  save_bundle(dir / "m.wdns", b);
  const auto a = eval_csv(evaluate(Enhancer(b), data().synth));
  const auto c = eval_csv(evaluate(Enhancer(load_bundle(dir / "m.wdns")), data().synth));
  EXPECT_EQ(a, c);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace weakdns
