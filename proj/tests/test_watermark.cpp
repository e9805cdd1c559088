#include <gtest/gtest.h>

#include <numeric>

#include "latentmark/corpus.hpp"
#include "latentmark/watermark.hpp"
#include "test_util.hpp"

using namespace latentmark;

namespace {

Signal white_noise(std::size_t n, std::uint64_t seed, double sd = 0.1) {
  Rng rng = make_rng(seed, 77);
  std::vector<float> x(n);
  for (float& v : x) v = float(sd * gaussian(rng));
  return Signal(std::move(x), 16000);
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

}  // namespace

TEST(Key, CarrierIsUnitNormAndBandLimited) {
  const WatermarkKey key = make_key(42);
  const auto c = key.carrier();
  ASSERT_EQ(c.size(), 320u);
  double norm = 0.0;
  for (std::size_t k = 0; k < c.size(); ++k) {
    norm += c[k] * c[k];
    if (k >= 8 && k < 56)
      EXPECT_NEAR(std::abs(c[k]), 1.0 / std::sqrt(48.0), 1e-15);
    else
      EXPECT_EQ(c[k], 0.0);
  }
  EXPECT_NEAR(norm, 1.0, 1e-12);
  double pnorm = 0.0;
  for (double v : key.pattern()) pnorm += v * v;
  EXPECT_NEAR(pnorm, 1.0, 1e-9);
}

TEST(Key, CarrierOverlapBehavesLikeRandomSigns) {
  const WatermarkKey k1 = make_key(1), again = make_key(1);
  EXPECT_TRUE(std::equal(k1.carrier().begin(), k1.carrier().end(), again.carrier().begin()));
  // Overlap of two independent +-1/sqrt(48) patterns: mean 0, sd 1/sqrt(48),
  // always a multiple of 2/48.
  std::vector<double> dots;
  for (int s = 0; s < 200; ++s) {
    const WatermarkKey a = make_key(1000 + 2 * s), b = make_key(1001 + 2 * s);
    double dot = 0.0;
    for (std::size_t k = 0; k < 320; ++k) dot += a.carrier()[k] * b.carrier()[k];
    EXPECT_NEAR(std::remainder(dot * 24.0, 1.0), 0.0, 1e-9);
    dots.push_back(dot);
  }
  double m = 0.0, v = 0.0;
  for (double d : dots) m += d / 200.0;
  for (double d : dots) v += (d - m) * (d - m) / 199.0;
  EXPECT_LT(std::abs(m), 4.0 / std::sqrt(48.0 * 200.0));
  EXPECT_NEAR(std::sqrt(v), 1.0 / std::sqrt(48.0), 0.03);
  const auto share = double(std::count_if(dots.begin(), dots.end(), [](double d) { return std::abs(d) < 0.2; })) / 200.0;
  // Exact share of |overlap| < 0.2, i.e. |sum of 48 signs| <= 8.
  double p = 0.0;
  for (int j = 20; j <= 28; ++j) p += std::exp(std::lgamma(49.0) - std::lgamma(j + 1.0) - std::lgamma(49.0 - j) - 48.0 * std::log(2.0));
  EXPECT_NEAR(share, p, 4.0 * std::sqrt(p * (1.0 - p) / 200.0));
}

TEST(Key, InvalidBandIsParameterError) {
  EXPECT_THROW(make_key(1, {320, 320, 0, 56}), ParameterError);
  EXPECT_THROW(make_key(1, {320, 320, 56, 56}), ParameterError);
  EXPECT_THROW(make_key(1, {320, 320, 8, 161}), ParameterError);
  EXPECT_THROW(make_key(1, {320, 0, 8, 56}), ParameterError);
  EXPECT_NO_THROW(make_key(1, {320, 160, 8, 160}));
}

TEST(Embed, ZeroStrengthIsIdentity) {
  const Signal s = synthesize(testutil::short_spec(1))[0];
  const EmbedResult r = embed(s, make_key(42), 0.0);
  EXPECT_EQ(r.marked, s);
  for (float v : r.delta.samples) EXPECT_EQ(v, 0.0f);
}

TEST(Embed, SilenceGetsEnergyFloorScaledCarrier) {
  const Signal z(std::vector<float>(3200, 0.0f), 16000);
  const double alpha = 0.05;
  const EmbedResult r = embed(z, make_key(42), alpha);
  for (std::size_t f = 0; f < 10; ++f) {
    const double e = energy(std::span(r.delta.samples).subspan(f * 320, 320));
    EXPECT_NEAR(std::sqrt(e), alpha * kEnergyFloor, 1e-10);
  }
}

TEST(Embed, TailShorterThanAFrameIsUntouched) {
  const Signal s = synthesize(testutil::short_spec(1, 0.05))[0];  // 800 samples, 2 frames + 160
  const EmbedResult r = embed(s, make_key(42), 0.1);
  for (std::size_t t = 640; t < s.size(); ++t) EXPECT_EQ(r.marked.samples[t], s.samples[t]);
  EXPECT_THROW(embed(Signal(std::vector<float>(100, 0.1f), 16000), make_key(42), 0.1), ParameterError);
  EXPECT_THROW(embed(s, make_key(42), -0.1), ParameterError);
}

TEST(Embed, SnrFollowsStrengthLaw) {
  const Signal s = synthesize(testutil::short_spec(1, 2.0))[0];
  const auto key = make_key(42);
  const auto snr = snr_db(s.samples, embed(s, key, 0.03).delta.samples);
  ASSERT_TRUE(snr.has_value());
  EXPECT_NEAR(*snr, 30.46, 0.01);
  for (double alpha : {0.005, 0.02, 0.08, 0.16}) {
    const auto v = snr_db(s.samples, embed(s, key, alpha).delta.samples);
    EXPECT_NEAR(*v, -20.0 * std::log10(alpha), 0.1) << alpha;
  }
  EXPECT_FALSE(snr_db(s.samples, std::vector<float>(s.size(), 0.0f)).has_value());
}

TEST(Embed, DeltaScalesLinearlyAndAddsToSignal) {
  const Signal s = synthesize(testutil::short_spec(1, 0.5, 3))[0];
  const auto key = make_key(7);
  const EmbedResult a = embed(s, key, 0.02), b = embed(s, key, 0.04);
  for (std::size_t t = 0; t < s.size(); ++t) {
    EXPECT_NEAR(b.delta.samples[t], 2.0f * a.delta.samples[t], 1e-7);
    if (a.clamped == 0) EXPECT_NEAR(a.marked.samples[t], s.samples[t] + a.delta.samples[t], 1e-7);
  }
}

TEST(Embed, OutputStaysInRange) {
  const Signal loud(std::vector<float>(640, 0.99f), 16000);
  const EmbedResult r = embed(loud, make_key(42), 0.5);
  EXPECT_TRUE(r.marked.in_range());
  EXPECT_GT(r.clamped, 0u);
}

TEST(Detect, SelfTemplateScoresAtLogisticOfMargin) {
  const auto key = make_key(42);
  std::vector<float> x;
  for (int f = 0; f < 5; ++f)
    for (double v : key.pattern()) x.push_back(float(0.5 * v));
  const LogisticMap map{12.0, 2.0};
  const ScoreTrack tr = detect(Signal(x, 16000), key, false, map);
  ASSERT_EQ(tr.frame_scores.size(), 5u);
  for (double sc : tr.frame_scores) EXPECT_NEAR(sc, 1.0 / (1.0 + std::exp(-(12.0 - 2.0))), 1e-6);
  EXPECT_EQ(tr.scores.size(), x.size());
}

TEST(Detect, WhiteNoiseCorrelationCentresOnZero) {
  const auto key = make_key(42);
  std::vector<double> means;
  for (std::uint64_t seed = 0; seed < 100; ++seed) means.push_back(mean(frame_correlations(white_noise(16000, seed), key)));
  // Each frame correlation has sd 1/sqrt(320); 50 frames per signal, 100 signals.
  EXPECT_LT(std::abs(mean(means)), 4.0 / std::sqrt(320.0 * 5000.0));
}

TEST(Detect, CorrelationRisesWithStrength) {
  const auto corpus = synthesize(testutil::short_spec(5, 1.0, 11));
  const auto key = make_key(42);
  double prev = -1.0;
  for (double alpha : {0.0, 0.01, 0.04, 0.16}) {
    double m = 0.0;
    for (const auto& s : corpus) m += mean(frame_correlations(embed(s, key, alpha).marked, key));
    EXPECT_GT(m, prev) << alpha;
    prev = m;
  }
}

TEST(Detect, WrongKeyRespondsOnlyThroughCarrierOverlap) {
  // A wrong key sees the mark scaled by the overlap of the two carriers,
  // which is of order 1/sqrt(band width) and averages out over keys.
  const auto s = synthesize(testutil::short_spec(1, 2.0, 12))[0];
  const double alpha = 0.16;
  const WatermarkKey key = make_key(1);
  const Signal m = embed(s, key, alpha).marked;
  const double own = mean(frame_correlations(m, key)) - mean(frame_correlations(s, key));
  EXPECT_NEAR(own, alpha / std::sqrt(1.0 + alpha * alpha), 0.01);
  double mean_abs = 0.0;
  for (int seed = 2; seed < 42; ++seed) {
    const WatermarkKey other = make_key(seed);
    double overlap = 0.0;
    for (std::size_t k = 0; k < 320; ++k) overlap += key.carrier()[k] * other.carrier()[k];
    const double resp = mean(frame_correlations(m, other)) - mean(frame_correlations(s, other));
    EXPECT_NEAR(resp, alpha * overlap, 0.01) << seed;
    mean_abs += std::abs(resp) / 40.0;
  }
  EXPECT_LT(mean_abs, 0.2 * own);
}

TEST(Detect, SyncSearchRecoversShift) {
  const auto key = make_key(42);
  const Signal s = synthesize(testutil::short_spec(1, 1.0, 13))[0];
  const Signal m = embed(s, key, 0.16).marked;
  std::vector<float> shifted(160, 0.0f);
  shifted.insert(shifted.end(), m.samples.begin(), m.samples.end());
  const LogisticMap map{12.0, 0.0};
  const ScoreTrack aligned = detect(Signal(shifted, 16000), key, true, map);
  const ScoreTrack blind = detect(Signal(shifted, 16000), key, false, map);
  EXPECT_EQ(aligned.offset, 160);
  EXPECT_GT(mean(aligned.frame_scores), mean(blind.frame_scores));
}

TEST(Augment, ModesProduceConsistentMasks) {
  const auto key = make_key(42);
  const Signal s = synthesize(testutil::short_spec(1, 1.0, 14))[0];
  const EmbedResult e = embed(s, key, 0.05);

  const Augmented pad = augment(e.marked, s, e.delta, AugmentMode::zero_pad, 3);
  EXPECT_EQ(pad.signal.size(), pad.mask.size());
  EXPECT_EQ(std::size_t(std::count(pad.mask.begin(), pad.mask.end(), 1)), s.size());

  const Augmented rep = augment(e.marked, s, e.delta, AugmentMode::replace_interval, 3);
  const auto kept = double(std::count(rep.mask.begin(), rep.mask.end(), 1)) / double(s.size());
  EXPECT_GE(kept, 0.4 - 1e-3);
  EXPECT_LE(kept, 0.8 + 1e-3);
  for (std::size_t t = 0; t < s.size(); ++t)
    EXPECT_EQ(rep.signal.samples[t], rep.mask[t] ? e.marked.samples[t] : s.samples[t]);

  const Augmented drop = augment(e.marked, s, e.delta, AugmentMode::drop_delta, 3);
  for (std::size_t t = 0; t < s.size(); ++t) EXPECT_NEAR(drop.signal.samples[t], s.samples[t], 1e-6);
  EXPECT_EQ(std::count(drop.mask.begin(), drop.mask.end(), 1), 0);

  EXPECT_THROW(augment(e.marked, Signal(std::vector<float>(10), 16000), e.delta, AugmentMode::drop_delta, 3),
               ParameterError);
}

TEST(Calibration, ThresholdMeetsFprQuantile) {
  std::vector<double> neg(200);
  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = double(i) / 200.0;
  const double tau = threshold_at_fpr(neg, 0.01);
  EXPECT_EQ(std::count_if(neg.begin(), neg.end(), [&](double v) { return v > tau; }), 2);
  EXPECT_DOUBLE_EQ(tau, neg[197]);
  EXPECT_LT(threshold_at_fpr(neg, 1.0), neg.front());
}

TEST(Calibration, AlphaGridIsGeometric) {
  const auto g = alpha_grid(0.005, 0.16, 16);
  ASSERT_EQ(g.size(), 16u);
  EXPECT_DOUBLE_EQ(g.front(), 0.005);
  EXPECT_NEAR(g.back(), 0.16, 1e-15);
  for (std::size_t i = 2; i < g.size(); ++i) EXPECT_NEAR(g[i] / g[i - 1], g[1] / g[0], 1e-12);
}

TEST(Calibration, PicksSmallestFeasibleGridPoint) {
  const auto train = synthesize(testutil::short_spec(6, 1.0, 20));
  const auto holdout = synthesize(testutil::short_spec(40, 1.0, 21));
  const auto key = make_key(42);
  const Channel identity = [](const Signal& s) { return s; };
  const CalibrationTargets targets{0.9, 0.05, 10.0};
  const auto grid = alpha_grid(0.005, 0.16, 8);
  const CalibrationResult res = calibrate(train, holdout, key, identity, targets, grid);

  // Oracle: rebuild every grid point's TPR/FPR from mean frame scores.
  std::size_t expected = grid.size();
  for (std::size_t gi = 0; gi < grid.size() && expected == grid.size(); ++gi) {
    const double alpha = grid[gi];
    std::vector<std::vector<double>> prho;
    double rsum = 0.0;
    int rcount = 0;
    for (std::size_t i = 0; i < holdout.size(); ++i) {
      prho.push_back(frame_correlations(embed(holdout[i], key, alpha).marked, key));
      if (i % 2 == 0)  // midpoint follows the channel-passed half
        for (double r : prho.back()) rsum += r, ++rcount;
    }
    const LogisticMap map{12.0, 6.0 * rsum / rcount};
    auto score = [&](const std::vector<double>& r) {
      double s = 0.0;
      for (double v : r) s += map(v);
      return s / double(r.size());
    };
    std::vector<double> neg, pos;
    for (const auto& h : holdout) neg.push_back(score(frame_correlations(h, key)));
    for (const auto& r : prho) pos.push_back(score(r));
    std::sort(neg.rbegin(), neg.rend());
    const double tau = neg[std::size_t(0.05 * double(neg.size()))];  // 2 of 40 may exceed
    const double tpr = double(std::count_if(pos.begin(), pos.end(), [&](double v) { return v > tau; })) / double(pos.size());
    const double snr = -20.0 * std::log10(alpha);
    if (tpr >= 0.9 && snr >= 10.0) expected = gi;
  }
  ASSERT_LT(expected, grid.size());
  EXPECT_DOUBLE_EQ(res.watermarker.alpha, grid[expected]);
  EXPECT_EQ(res.sweep.size(), expected + 1);
  EXPECT_TRUE(res.sweep.back().feasible);
  for (std::size_t i = 0; i + 1 < res.sweep.size(); ++i) EXPECT_FALSE(res.sweep[i].feasible);
  EXPECT_LE(res.sweep.back().fpr, 0.05);
}

TEST(Calibration, ChannelAucGatesFeasibility) {
  const auto train = synthesize(testutil::short_spec(2, 1.0, 20));
  const auto holdout = synthesize(testutil::short_spec(10, 1.0, 21));
  // A channel that erases everything leaves channel-passed positives tied with
  // every negative; the unpassed half alone reaches TPR 0.5.
  const Channel erase = [](const Signal& s) { return Signal(std::vector<float>(s.size(), 0.0f), s.sample_rate); };
  const auto grid = alpha_grid(0.005, 0.16, 4);
  const CalibrationResult res = calibrate(train, holdout, make_key(42), erase, {0.4, 0.05, 10.0, 0.0}, grid);
  EXPECT_DOUBLE_EQ(res.sweep.back().channel_auc, 0.5);
  try {
    calibrate(train, holdout, make_key(42), erase, {0.4, 0.05, 10.0, 0.9}, grid);
    FAIL();
  } catch (const CalibrationError& e) {
    EXPECT_NE(std::string(e.what()).find("channel auc=0.5"), std::string::npos) << e.what();
  }
}

TEST(Calibration, UnreachableTargetIsCalibrationError) {
  const auto train = synthesize(testutil::short_spec(2, 1.0, 20));
  const auto holdout = synthesize(testutil::short_spec(10, 1.0, 21));
  const Channel identity = [](const Signal& s) { return s; };
  try {
    calibrate(train, holdout, make_key(42), identity, {1.01, 0.01, 10.0}, alpha_grid(0.005, 0.16, 4));
    FAIL();
  } catch (const CalibrationError& e) {
    EXPECT_NE(std::string(e.what()).find("best achieved"), std::string::npos) << e.what();
  }
  // An SNR floor above every grid point is also infeasible.
  EXPECT_THROW(calibrate(train, holdout, make_key(42), identity, {0.5, 0.5, 60.0}, alpha_grid(0.005, 0.16, 4)),
               CalibrationError);
}
