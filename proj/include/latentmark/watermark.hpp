#pragma once

// Keyed spread-spectrum watermark in a DCT band: embedding, per-frame
// matched-filter detection, training-style augmentations and calibration of
// strength/threshold with the codec in the loop.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentmark/codec.hpp"
#include "latentmark/core.hpp"
#include "latentmark/dct.hpp"

namespace latentmark {

inline constexpr double kEnergyFloor = 1e-4;

struct KeyConfig {
  int frame_len = 320;
  int hop = 320;
  int band_lo = 8;
  int band_hi = 56;
};

class WatermarkKey {
 public:
  WatermarkKey() = default;

  std::int64_t seed() const noexcept { return seed_; }
  const KeyConfig& config() const noexcept { return config_; }
  int frame_len() const noexcept { return config_.frame_len; }
  int hop() const noexcept { return config_.hop; }

  /// Carrier in the DCT domain (frame_len coefficients, unit norm).
  std::span<const double> carrier() const noexcept { return carrier_; }
  /// The same carrier synthesized to a time-domain frame.
  std::span<const double> pattern() const noexcept { return pattern_; }

  friend WatermarkKey make_key(std::int64_t seed, const KeyConfig& config);

 private:
  std::int64_t seed_ = 0;
  KeyConfig config_;
  std::vector<double> carrier_;
  std::vector<double> pattern_;
};

inline WatermarkKey make_key(std::int64_t seed, const KeyConfig& config = {}) {
  const auto& c = config;
  if (c.frame_len < 2) throw ParameterError("make_key: frame_len must be >= 2");
  if (c.hop < 1 || c.hop > c.frame_len) throw ParameterError("make_key: hop must be in [1, frame_len]");
  if (!(1 <= c.band_lo && c.band_lo < c.band_hi && c.band_hi <= c.frame_len / 2))
    throw ParameterError("make_key: band [" + std::to_string(c.band_lo) + ", " + std::to_string(c.band_hi) +
                         ") must satisfy 1 <= lo < hi <= frame_len/2");
  WatermarkKey key;
  key.seed_ = seed;
  key.config_ = config;
  key.carrier_.assign(std::size_t(c.frame_len), 0.0);
  Rng rng = make_rng(std::uint64_t(seed), 0x574B4559u);
  const double amp = 1.0 / std::sqrt(double(c.band_hi - c.band_lo));
  for (int k = c.band_lo; k < c.band_hi; ++k) key.carrier_[std::size_t(k)] = (rng() >> 63) ? amp : -amp;
  key.pattern_.assign(std::size_t(c.frame_len), 0.0);
  dct_basis(std::size_t(c.frame_len))->inverse<double, double>(key.carrier_, key.pattern_);
  return key;
}

/// Frame correlation -> score mapping, score = logistic(gain * rho - bias).
struct LogisticMap {
  double gain = 12.0;
  double bias = 0.0;

  double operator()(double rho) const { return logistic(gain * rho - bias); }
};

struct CalibratedWatermarker {
  WatermarkKey key;
  double alpha = 0.0;
  double tau = 0.5;
  LogisticMap map;
  double snr_floor_db = 0.0;
};

// ---------------------------------------------------------------------------
// Embedding

struct EmbedResult {
  Signal marked;
  Signal delta;                // unclamped additive watermark
  std::size_t clamped = 0;     // samples clipped to [-1, 1]
};

inline EmbedResult embed(const Signal& signal, const WatermarkKey& key, double alpha) {
  const int flen = key.frame_len();
  if (signal.size() < std::size_t(flen))
    throw ParameterError("embed: signal of " + std::to_string(signal.size()) + " samples is shorter than one frame (" +
                         std::to_string(flen) + ")");
  require(alpha >= 0.0, "embed: alpha must be >= 0");
  EmbedResult res;
  res.delta = Signal(std::vector<float>(signal.size(), 0.0f), signal.sample_rate);
  res.marked = signal;
  const auto pattern = key.pattern();
  // Orthonormal transform: ||X_f|| = ||x_f|| and the carrier maps to `pattern`.
  for (std::size_t start = 0; start + std::size_t(flen) <= signal.size(); start += std::size_t(flen)) {
    std::span<const float> frame(signal.samples.data() + start, std::size_t(flen));
    const double beta = alpha * std::max(std::sqrt(energy(frame)), kEnergyFloor);
    for (int t = 0; t < flen; ++t) {
      const float d = float(beta * pattern[std::size_t(t)]);
      res.delta.samples[start + std::size_t(t)] = d;
      res.marked.samples[start + std::size_t(t)] = signal.samples[start + std::size_t(t)] + d;
    }
  }
  res.clamped = clamp_in_place(res.marked.samples);
  return res;
}

inline EmbedResult embed(const Signal& signal, const CalibratedWatermarker& wm) {
  return embed(signal, wm.key, wm.alpha);
}

/// 10 log10(||s||^2 / ||delta||^2); nullopt when either energy is zero.
inline std::optional<double> snr_db(std::span<const float> signal, std::span<const float> delta) {
  const double es = energy(signal), ed = energy(delta);
  if (es <= 0.0 || ed <= 0.0) return std::nullopt;
  return 10.0 * std::log10(es / ed);
}

// ---------------------------------------------------------------------------
// Detection

/// Normalized frame correlations <X_f / max(||X_f||, eps), carrier> for frames
/// starting at offset + f * hop.
inline std::vector<double> frame_correlations(const Signal& signal, const WatermarkKey& key, int offset = 0) {
  const auto flen = std::size_t(key.frame_len()), hop = std::size_t(key.hop());
  std::vector<double> rho;
  const auto pattern = key.pattern();
  for (std::size_t start = std::size_t(offset); start + flen <= signal.size(); start += hop) {
    double dot = 0.0, e = 0.0;
    const float* x = signal.samples.data() + start;
    for (std::size_t t = 0; t < flen; ++t) {
      dot += double(x[t]) * pattern[t];
      e += double(x[t]) * x[t];
    }
    rho.push_back(dot / std::max(std::sqrt(e), kEnergyFloor));
  }
  return rho;
}

/// Per-sample scores, replicated from frame scores.
struct ScoreTrack {
  std::vector<float> scores;
  std::vector<double> frame_scores;
  int offset = 0;  // sample position of the first frame
  int hop = 0;
};

namespace detail {

inline ScoreTrack expand_scores(std::vector<double> frame_scores, std::size_t length, int offset, int hop) {
  ScoreTrack track;
  track.offset = offset;
  track.hop = hop;
  track.scores.resize(length);
  const std::size_t nf = frame_scores.size();
  for (std::size_t t = 0; t < length; ++t) {
    std::size_t f = t < std::size_t(offset) ? 0 : (t - std::size_t(offset)) / std::size_t(hop);
    f = std::min(f, nf - 1);
    track.scores[t] = float(frame_scores[f]);
  }
  track.frame_scores = std::move(frame_scores);
  return track;
}

}  // namespace detail

inline ScoreTrack detect(const Signal& signal, const WatermarkKey& key, bool sync_search, const LogisticMap& map) {
  if (signal.size() < std::size_t(key.frame_len()))
    throw ParameterError("detect: signal of " + std::to_string(signal.size()) + " samples is shorter than one frame (" +
                         std::to_string(key.frame_len()) + ")");
  const int hop = key.hop();
  std::vector<int> offsets{0};
  if (sync_search) offsets = {0, hop / 4, hop / 2, 3 * hop / 4};
  std::vector<double> best;
  double best_mean = -1.0;
  int best_offset = 0;
  for (int off : offsets) {
    if (std::size_t(off) + std::size_t(key.frame_len()) > signal.size()) continue;
    std::vector<double> rho = frame_correlations(signal, key, off);
    double mean = 0.0;
    for (double& r : rho) {
      r = map(r);
      mean += r;
    }
    mean /= double(rho.size());
    if (mean > best_mean) {
      best_mean = mean;
      best = std::move(rho);
      best_offset = off;
    }
  }
  return detail::expand_scores(std::move(best), signal.size(), best_offset, hop);
}

inline ScoreTrack detect(const Signal& signal, const CalibratedWatermarker& wm, bool sync_search) {
  return detect(signal, wm.key, sync_search, wm.map);
}

// ---------------------------------------------------------------------------
// Augmentations

enum class AugmentMode { zero_pad, replace_interval, drop_delta };

struct Augmented {
  Signal signal;
  std::vector<std::uint8_t> mask;  // 1 where the output carries the watermark
};

/// Overwrite [start, start + length) of `watermarked` with `clean`.
inline Augmented replace_interval(const Signal& watermarked, const Signal& clean, std::size_t start, std::size_t length) {
  require(watermarked.size() == clean.size(), "augment: watermarked and clean lengths differ");
  require(start + length <= watermarked.size(), "augment: interval exceeds signal");
  Augmented out{watermarked, std::vector<std::uint8_t>(watermarked.size(), 1)};
  for (std::size_t t = start; t < start + length; ++t) {
    out.signal.samples[t] = clean.samples[t];
    out.mask[t] = 0;
  }
  return out;
}

inline Augmented augment(const Signal& watermarked, const Signal& clean, const Signal& delta, AugmentMode mode,
                         std::uint64_t rng_seed) {
  const std::size_t n = watermarked.size();
  if (clean.size() != n || delta.size() != n)
    throw ParameterError("augment: watermarked, clean and delta must have equal length (" + std::to_string(n) + ", " +
                         std::to_string(clean.size()) + ", " + std::to_string(delta.size()) + ")");
  Rng rng = make_rng(rng_seed, 0x41554Du);
  switch (mode) {
    case AugmentMode::zero_pad: {
      const auto pre = std::size_t(uniform_int(rng, 0, std::int64_t(n / 4)));
      const auto post = std::size_t(uniform_int(rng, 0, std::int64_t(n / 4)));
      Augmented out;
      out.signal.sample_rate = watermarked.sample_rate;
      out.signal.samples.assign(pre, 0.0f);
      out.signal.samples.insert(out.signal.samples.end(), watermarked.samples.begin(), watermarked.samples.end());
      out.signal.samples.resize(pre + n + post, 0.0f);
      out.mask.assign(pre + n + post, 0);
      std::fill(out.mask.begin() + std::ptrdiff_t(pre), out.mask.begin() + std::ptrdiff_t(pre + n), 1);
      return out;
    }
    case AugmentMode::replace_interval: {
      const auto length = std::size_t(std::llround(uniform(rng, 0.2, 0.6) * double(n)));
      const auto start = std::size_t(uniform_int(rng, 0, std::int64_t(n - length)));
      return replace_interval(watermarked, clean, start, length);
    }
    case AugmentMode::drop_delta: {
      Augmented out{watermarked, std::vector<std::uint8_t>(n, 0)};
      for (std::size_t t = 0; t < n; ++t)
        out.signal.samples[t] = float(double(watermarked.samples[t]) - double(delta.samples[t]));
      clamp_in_place(out.signal.samples);
      return out;
    }
  }
  throw ParameterError("augment: unknown mode");
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationTargets {
  double tpr_min = 0.95;
  double fpr_max = 0.01;
  double snr_floor_db = 10.0;
  // Separation of channel-passed positives from negatives; 0 disables.
  double channel_auc_min = 0.0;
};

/// Geometric grid of `points` values from `lo` to `hi` inclusive.
inline std::vector<double> alpha_grid(double lo = 0.005, double hi = 0.16, int points = 16) {
  require(lo > 0.0 && hi >= lo && points >= 1, "alpha_grid: need 0 < lo <= hi and points >= 1");
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i)
    g[std::size_t(i)] = points == 1 ? lo : lo * std::pow(hi / lo, double(i) / double(points - 1));
  return g;
}

/// Threshold such that at most floor(fpr_max * n) negatives score strictly above it.
inline double threshold_at_fpr(std::vector<double> negatives, double fpr_max) {
  require(!negatives.empty(), "threshold_at_fpr: no negatives");
  std::sort(negatives.begin(), negatives.end(), std::greater<>());
  const auto allowed = std::size_t(std::floor(fpr_max * double(negatives.size()) + 1e-9));
  if (allowed >= negatives.size()) return negatives.back() - 1e-12;
  return negatives[allowed];
}

/// One row of the calibration sweep.
struct CalibrationPoint {
  double alpha = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
  double min_snr_db = 0.0;
  double rho0 = 0.0;
  double tau = 0.0;
  double channel_auc = 0.0;
  bool feasible = false;
};

using Channel = std::function<Signal(const Signal&)>;

namespace detail {

inline double mean_score(const std::vector<double>& rho, const LogisticMap& map) {
  double s = 0.0;
  for (double r : rho) s += map(r);
  return rho.empty() ? 0.0 : s / double(rho.size());
}

/// Probability that a positive outscores a negative, ties counted half.
inline double pair_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) return 0.0;
  double wins = 0.0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return wins / (double(pos.size()) * double(neg.size()));
}

}  // namespace detail

struct CalibrationResult {
  CalibratedWatermarker watermarker;
  std::vector<CalibrationPoint> sweep;
};

/// Pick the smallest grid strength whose detection meets the targets when half
/// of the watermarked holdout passes through `channel` and negatives are clean
/// items passed through `channel`. The channel AUC compares only the
/// channel-passed positives against the negatives.
inline CalibrationResult calibrate(std::span<const Signal> train, std::span<const Signal> holdout, const WatermarkKey& key,
                                   const Channel& channel, const CalibrationTargets& targets,
                                   const std::vector<double>& grid = alpha_grid(), double gain = 12.0) {
  require(!train.empty() && !holdout.empty(), "calibrate: train and holdout corpora must be non-empty");
  require(!grid.empty(), "calibrate: empty alpha grid");
  const auto flen = std::size_t(key.frame_len());

  // Strength-independent pieces: frame energies for the SNR check, negative
  // correlations.
  std::vector<std::vector<double>> frame_norms;
  std::vector<double> train_energy;
  for (const Signal& s : train) {
    std::vector<double> norms;
    for (std::size_t st = 0; st + flen <= s.size(); st += flen)
      norms.push_back(std::max(std::sqrt(energy(std::span(s.samples).subspan(st, flen))), kEnergyFloor));
    frame_norms.push_back(std::move(norms));
    train_energy.push_back(energy(s.samples));
  }
  std::vector<std::vector<double>> neg_rho;
  for (const Signal& s : holdout) neg_rho.push_back(frame_correlations(channel(s), key));

  CalibrationResult result;
  std::optional<CalibrationPoint> chosen;
  for (double alpha : grid) {
    CalibrationPoint pt;
    pt.alpha = alpha;
    pt.min_snr_db = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < train.size(); ++i) {
      double ed = 0.0;
      for (double nrm : frame_norms[i]) ed += alpha * alpha * nrm * nrm;
      const double snr = (ed > 0.0 && train_energy[i] > 0.0) ? 10.0 * std::log10(train_energy[i] / ed)
                                                              : std::numeric_limits<double>::infinity();
      pt.min_snr_db = std::min(pt.min_snr_db, snr);
    }

    std::vector<std::vector<double>> pos_rho;
    double rho_sum = 0.0;
    std::size_t rho_count = 0;
    for (std::size_t i = 0; i < holdout.size(); ++i) {
      Signal marked = embed(holdout[i], key, alpha).marked;
      if (i % 2 == 0) marked = channel(marked);
      pos_rho.push_back(frame_correlations(marked, key));
      if (i % 2 != 0) continue;
      // The logistic midpoint follows the channel-passed class, which is what
      // deployed detection sees; the unpassed half would pull it far above.
      for (double r : pos_rho.back()) rho_sum += r;
      rho_count += pos_rho.back().size();
    }
    pt.rho0 = rho_count ? rho_sum / double(rho_count) : 0.0;
    const LogisticMap map{gain, 0.5 * gain * pt.rho0};
    std::vector<double> pos, neg, channel_pos;
    for (std::size_t i = 0; i < pos_rho.size(); ++i) {
      pos.push_back(detail::mean_score(pos_rho[i], map));
      if (i % 2 == 0) channel_pos.push_back(pos.back());
    }
    for (const auto& r : neg_rho) neg.push_back(detail::mean_score(r, map));
    pt.channel_auc = detail::pair_auc(channel_pos, neg);
    pt.tau = threshold_at_fpr(neg, targets.fpr_max);
    pt.tpr = double(std::count_if(pos.begin(), pos.end(), [&](double s) { return s > pt.tau; })) / double(pos.size());
    pt.fpr = double(std::count_if(neg.begin(), neg.end(), [&](double s) { return s > pt.tau; })) / double(neg.size());
    pt.feasible = pt.tpr >= targets.tpr_min && pt.fpr <= targets.fpr_max && pt.min_snr_db >= targets.snr_floor_db &&
                  pt.channel_auc >= targets.channel_auc_min;
    result.sweep.push_back(pt);
    if (pt.feasible) {
      chosen = pt;
      break;
    }
  }

  if (!chosen) {
    // Report the point closest to the TPR target among SNR-admissible ones.
    const CalibrationPoint* best = &result.sweep.front();
    for (const auto& p : result.sweep)
      if (p.min_snr_db >= targets.snr_floor_db && p.tpr > best->tpr) best = &p;
    throw CalibrationError("calibrate: no alpha on the grid meets tpr>=" + std::to_string(targets.tpr_min) +
                           " at fpr<=" + std::to_string(targets.fpr_max) + " with snr>=" +
                           std::to_string(targets.snr_floor_db) + " dB and channel auc>=" +
                           std::to_string(targets.channel_auc_min) + "; best achieved alpha=" +
                           std::to_string(best->alpha) + " tpr=" + std::to_string(best->tpr) + " fpr=" +
                           std::to_string(best->fpr) + " snr=" + std::to_string(best->min_snr_db) +
                           " dB channel auc=" + std::to_string(best->channel_auc));
  }
  auto& wm = result.watermarker;
  wm.key = key;
  wm.alpha = chosen->alpha;
  wm.tau = chosen->tau;
  wm.map = LogisticMap{gain, 0.5 * gain * chosen->rho0};
  wm.snr_floor_db = targets.snr_floor_db;
  return result;
}

inline CalibrationResult calibrate(std::span<const Signal> train, std::span<const Signal> holdout, const WatermarkKey& key,
                                   const Codec& codec, const CalibrationTargets& targets,
                                   const std::vector<double>& grid = alpha_grid(), double gain = 12.0) {
  return calibrate(train, holdout, key, Channel([&codec](const Signal& s) { return roundtrip(s, codec); }), targets,
                   grid, gain);
}

}  // namespace latentmark
