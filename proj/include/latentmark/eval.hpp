#pragma once

// Detection, localization, robustness edits and the Frechet quality proxy.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <string>
#include <unsupported/Eigen/FFT>
#include <vector>

#include "latentmark/codec.hpp"
#include "latentmark/core.hpp"
#include "latentmark/watermark.hpp"

namespace latentmark {

// ---------------------------------------------------------------------------
// Detection metrics

inline double score_global(const ScoreTrack& track) {
  if (track.scores.empty()) throw ParameterError("score_global: empty score track");
  double s = 0.0;
  for (float v : track.scores) s += v;
  return s / double(track.scores.size());
}

struct DetectionReport {
  double auc = 0.0;
  double best_acc = 0.0;
  double best_tau = 0.0;
  std::map<double, double> tpr_at;  // fpr target -> tpr
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

/// Fraction of scores strictly above `tau`.
inline double rate_above(const std::vector<double>& scores, double tau) {
  if (scores.empty()) return 0.0;
  return double(std::count_if(scores.begin(), scores.end(), [tau](double s) { return s > tau; })) /
         double(scores.size());
}

/// ROC summary. Scores above the threshold are flagged positive.
inline DetectionReport roc(const std::vector<double>& pos, const std::vector<double>& neg,
                           const std::vector<double>& fpr_targets = {1e-2, 1e-3}) {
  if (pos.empty() || neg.empty()) throw ParameterError("roc: both classes need at least one score");
  DetectionReport r;
  r.n_pos = pos.size();
  r.n_neg = neg.size();

  // AUC by rank: for each positive, count negatives below and tied.
  std::vector<double> sn = neg;
  std::sort(sn.begin(), sn.end());
  double wins = 0.0;
  for (double p : pos) {
    const auto lo = std::lower_bound(sn.begin(), sn.end(), p);
    const auto hi = std::upper_bound(lo, sn.end(), p);
    wins += double(lo - sn.begin()) + 0.5 * double(hi - lo);
  }
  r.auc = wins / (double(pos.size()) * double(neg.size()));

  // Best accuracy over thresholds at midpoints of consecutive distinct scores
  // plus one below and one above all scores.
  std::vector<std::pair<double, int>> all;
  all.reserve(pos.size() + neg.size());
  for (double p : pos) all.emplace_back(p, 1);
  for (double n : neg) all.emplace_back(n, 0);
  std::sort(all.begin(), all.end());
  const double total = double(all.size());
  // Threshold below everything: all flagged positive.
  std::size_t tp = pos.size(), tn = 0;
  r.best_acc = double(tp) / total;
  r.best_tau = all.front().first - 1.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) {
      if (all[j].second) --tp;
      else ++tn;
      ++j;
    }
    const double tau = j < all.size() ? 0.5 * (all[i].first + all[j].first) : all[i].first + 1.0;
    const double acc = double(tp + tn) / total;
    if (acc > r.best_acc) {
      r.best_acc = acc;
      r.best_tau = tau;
    }
    i = j;
  }

  // TPR at the most permissive threshold whose empirical FPR stays within target.
  for (double f : fpr_targets) r.tpr_at[f] = rate_above(pos, threshold_at_fpr(neg, f));
  return r;
}

// ---------------------------------------------------------------------------
// Localization

struct LocalizationSample {
  Signal signal;
  std::vector<std::uint8_t> truth_mask;
};

struct LocalizationResult {
  double iou = 0.0;
  double sl_acc = 0.0;
};

/// Per-sample IoU and agreement between a predicted and a true mask.
inline LocalizationResult mask_agreement(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  if (pred.size() != truth.size())
    throw ParameterError("localization: mask lengths differ (" + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()) + ")");
  std::size_t inter = 0, uni = 0, agree = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    const bool p = pred[t] != 0, y = truth[t] != 0;
    inter += p && y;
    uni += p || y;
    agree += p == y;
  }
  LocalizationResult r;
  r.iou = uni == 0 ? 1.0 : double(inter) / double(uni);
  r.sl_acc = pred.empty() ? 1.0 : double(agree) / double(pred.size());
  return r;
}

inline LocalizationResult localization_eval(const std::vector<LocalizationSample>& samples,
                                            const CalibratedWatermarker& wm, double tau = 0.5,
                                            bool sync_search = false) {
  if (samples.empty()) throw ParameterError("localization_eval: no samples");
  LocalizationResult acc;
  std::vector<std::uint8_t> pred;
  for (const auto& s : samples) {
    if (s.truth_mask.size() != s.signal.size()) throw ParameterError("localization_eval: mask length != signal length");
    const ScoreTrack track = detect(s.signal, wm, sync_search);
    pred.resize(track.scores.size());
    for (std::size_t t = 0; t < pred.size(); ++t) pred[t] = track.scores[t] > tau;
    const auto r = mask_agreement(pred, s.truth_mask);
    acc.iou += r.iou;
    acc.sl_acc += r.sl_acc;
  }
  acc.iou /= double(samples.size());
  acc.sl_acc /= double(samples.size());
  return acc;
}

// ---------------------------------------------------------------------------
// Edits

enum class EditKind { white_noise, pink_noise, lowpass, highpass, resample, echo, requant };

inline const std::vector<EditKind>& all_edit_kinds() {
  static const std::vector<EditKind> kinds{EditKind::white_noise, EditKind::pink_noise, EditKind::lowpass,
                                           EditKind::highpass,    EditKind::resample,   EditKind::echo,
                                           EditKind::requant};
  return kinds;
}

inline const char* to_string(EditKind k) {
  switch (k) {
    case EditKind::white_noise: return "white_noise";
    case EditKind::pink_noise: return "pink_noise";
    case EditKind::lowpass: return "lowpass";
    case EditKind::highpass: return "highpass";
    case EditKind::resample: return "resample";
    case EditKind::echo: return "echo";
    case EditKind::requant: return "requant";
  }
  return "?";
}

inline EditKind edit_kind_from_string(const std::string& s) {
  for (EditKind k : all_edit_kinds())
    if (s == to_string(k)) return k;
  throw ParameterError("edit: unknown kind '" + s + "'");
}

struct EditSpec {
  EditKind kind = EditKind::white_noise;
  double snr_db = 20.0;            // white_noise, pink_noise
  double cutoff_fraction = 0.25;   // lowpass, highpass; fraction of Nyquist
  double rate_fraction = 0.75;     // resample; target rate / original rate
  double delay_s = 0.1;            // echo
  double decay = 0.3;              // echo
  const Codec* codec = nullptr;    // requant: the foreign codec
  std::uint64_t seed = 0;

  void validate() const {
    switch (kind) {
      case EditKind::lowpass:
      case EditKind::highpass:
        if (!(cutoff_fraction > 0.0 && cutoff_fraction < 1.0))
          throw ParameterError("edit: cutoff_fraction must be in (0, 1), got " + std::to_string(cutoff_fraction));
        break;
      case EditKind::resample:
        if (!(rate_fraction > 0.0 && rate_fraction <= 1.0))
          throw ParameterError("edit: rate_fraction must be in (0, 1], got " + std::to_string(rate_fraction));
        break;
      case EditKind::echo:
        if (!(decay >= 0.0 && decay < 1.0)) throw ParameterError("edit: decay must be in [0, 1), got " + std::to_string(decay));
        if (!(delay_s >= 0.0)) throw ParameterError("edit: delay_s must be >= 0");
        break;
      case EditKind::requant:
        if (!codec) throw ParameterError("edit: requant needs a codec");
        break;
      default:
        if (!std::isfinite(snr_db)) throw ParameterError("edit: snr_db must be finite");
    }
  }
};

namespace detail {

/// Add `noise` scaled so that 10 log10(E_signal / E_noise) = snr_db.
inline Signal add_scaled_noise(const Signal& s, const std::vector<double>& noise, double snr_db) {
  double es = 0.0, en = 0.0;
  for (float v : s.samples) es += double(v) * v;
  for (double v : noise) en += v * v;
  Signal out = s;
  if (es <= 0.0 || en <= 0.0) return out;
  const double g = std::sqrt(es / (en * std::pow(10.0, snr_db / 10.0)));
  for (std::size_t t = 0; t < out.size(); ++t) out.samples[t] = float(double(s.samples[t]) + g * noise[t]);
  clamp_in_place(out.samples);
  return out;
}

/// 63-tap Hamming-windowed sinc lowpass, unit DC gain; cutoff as a fraction of Nyquist.
inline std::vector<double> lowpass_taps(double cutoff_fraction, int taps = 63) {
  std::vector<double> h(static_cast<std::size_t>(taps));
  const int mid = taps / 2;
  double sum = 0.0;
  for (int i = 0; i < taps; ++i) {
    const double m = i - mid;
    const double sinc = m == 0 ? cutoff_fraction : std::sin(std::numbers::pi * cutoff_fraction * m) / (std::numbers::pi * m);
    const double w = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (taps - 1));
    h[std::size_t(i)] = sinc * w;
    sum += h[std::size_t(i)];
  }
  for (double& v : h) v /= sum;
  return h;
}

/// Spectral inversion of the lowpass.
inline std::vector<double> highpass_taps(double cutoff_fraction, int taps = 63) {
  auto h = lowpass_taps(cutoff_fraction, taps);
  for (double& v : h) v = -v;
  h[std::size_t(taps / 2)] += 1.0;
  return h;
}

/// Centred FIR filtering (no group delay), zero outside the signal.
inline Signal fir_same(const Signal& s, const std::vector<double>& h) {
  Signal out = s;
  const auto n = std::ptrdiff_t(s.size());
  const auto mid = std::ptrdiff_t(h.size() / 2);
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    double acc = 0.0;
    for (std::ptrdiff_t k = 0; k < std::ptrdiff_t(h.size()); ++k) {
      const std::ptrdiff_t idx = t + mid - k;
      if (idx >= 0 && idx < n) acc += h[std::size_t(k)] * s.samples[std::size_t(idx)];
    }
    out.samples[std::size_t(t)] = float(acc);
  }
  clamp_in_place(out.samples);
  return out;
}

/// Linear interpolation of `x` at `m` evenly spaced points spanning the same duration.
inline std::vector<float> linear_resample(const std::vector<float>& x, std::size_t m) {
  std::vector<float> y(m);
  if (x.empty() || m == 0) return y;
  const double step = double(x.size()) / double(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double pos = double(i) * step;
    const auto i0 = std::min(std::size_t(pos), x.size() - 1);
    const std::size_t i1 = std::min(i0 + 1, x.size() - 1);
    const double frac = pos - double(i0);
    y[i] = float((1.0 - frac) * x[i0] + frac * x[i1]);
  }
  return y;
}

inline double peak(const std::vector<float>& x) {
  double p = 0.0;
  for (float v : x) p = std::max(p, double(std::abs(v)));
  return p;
}

}  // namespace detail

inline Signal apply_edit(const Signal& s, const EditSpec& e) {
  e.validate();
  Rng rng = make_rng(e.seed, 0x45444954u, std::uint64_t(e.kind));
  switch (e.kind) {
    case EditKind::white_noise: {
      std::vector<double> noise(s.size());
      for (double& v : noise) v = gaussian(rng);
      return detail::add_scaled_noise(s, noise, e.snr_db);
    }
    case EditKind::pink_noise: {
      // Leaky cumulative sum of white noise: energy falls with frequency.
      std::vector<double> noise(s.size());
      double acc = 0.0, mean = 0.0;
      for (double& v : noise) {
        acc = 0.98 * acc + gaussian(rng);
        v = acc;
        mean += acc;
      }
      mean /= double(std::max<std::size_t>(noise.size(), 1));
      for (double& v : noise) v -= mean;
      return detail::add_scaled_noise(s, noise, e.snr_db);
    }
    case EditKind::lowpass: return detail::fir_same(s, detail::lowpass_taps(e.cutoff_fraction));
    case EditKind::highpass: return detail::fir_same(s, detail::highpass_taps(e.cutoff_fraction));
    case EditKind::resample: {
      const auto m = std::size_t(std::llround(double(s.size()) * e.rate_fraction));
      Signal out = s;
      out.samples = detail::linear_resample(detail::linear_resample(s.samples, m), s.size());
      clamp_in_place(out.samples);
      return out;
    }
    case EditKind::echo: {
      const auto d = std::size_t(std::llround(e.delay_s * s.sample_rate));
      Signal out = s;
      if (e.decay == 0.0) return out;
      for (std::size_t t = d; t < s.size(); ++t) out.samples[t] = float(double(s.samples[t]) + e.decay * s.samples[t - d]);
      const double before = detail::peak(s.samples), after = detail::peak(out.samples);
      if (after > 0.0)
        for (float& v : out.samples) v = float(double(v) * before / after);
      clamp_in_place(out.samples);
      return out;
    }
    case EditKind::requant: return roundtrip(s, *e.codec);
  }
  throw ParameterError("edit: unknown kind");
}

// ---------------------------------------------------------------------------
// Frechet distance on filterbank features

inline constexpr int kFadBands = 20;
inline constexpr int kFadFrame = 512;

/// Triangular filters with log-spaced centres from 20 Hz to Nyquist, as a
/// bands x (frame/2 + 1) weight matrix.
inline Eigen::MatrixXd fad_filterbank(int sample_rate, int frame = kFadFrame, int bands = kFadBands) {
  const int bins = frame / 2 + 1;
  const double lo = 20.0, hi = sample_rate / 2.0;
  std::vector<double> edges(static_cast<std::size_t>(bands + 2));
  for (int i = 0; i < bands + 2; ++i) edges[std::size_t(i)] = lo * std::pow(hi / lo, double(i) / double(bands + 1));
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(bands, bins);
  for (int b = 0; b < bands; ++b) {
    const double l = edges[std::size_t(b)], c = edges[std::size_t(b + 1)], r = edges[std::size_t(b + 2)];
    for (int k = 0; k < bins; ++k) {
      const double f = double(k) * sample_rate / frame;
      if (f > l && f < c) w(b, k) = (f - l) / (c - l);
      else if (f >= c && f < r) w(b, k) = (r - f) / (r - c);
    }
  }
  return w;
}

/// Log band energies of non-overlapping frames, one row per frame.
inline Eigen::MatrixXd fad_features(std::span<const Signal> signals) {
  constexpr double kLogFloor = 1e-10;
  std::size_t rows = 0;
  for (const auto& s : signals) rows += s.size() / kFadFrame;
  Eigen::MatrixXd feats(Eigen::Index(rows), kFadBands);
  if (rows == 0) return feats;
  const Eigen::MatrixXd bank = fad_filterbank(signals.front().sample_rate);
  Eigen::FFT<double> fft;
  std::vector<double> frame(kFadFrame);
  std::vector<std::complex<double>> spec;
  Eigen::VectorXd power(kFadFrame / 2 + 1);
  Eigen::Index r = 0;
  for (const auto& s : signals) {
    for (std::size_t st = 0; st + kFadFrame <= s.size(); st += kFadFrame) {
      for (int t = 0; t < kFadFrame; ++t) frame[std::size_t(t)] = s.samples[st + std::size_t(t)];
      fft.fwd(spec, frame);
      for (int k = 0; k <= kFadFrame / 2; ++k) power[k] = std::norm(spec[std::size_t(k)]);
      feats.row(r++) = ((bank * power).array() + kLogFloor).log().transpose();
    }
  }
  return feats;
}

/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) with the cross term computed
/// as tr(sqrt(A S2 A)), A = sqrt(S1); negative eigenvalues clamp to zero.
inline double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& mu2,
                               const Eigen::MatrixXd& s2) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
  if (e1.info() != Eigen::Success) throw NumericError("frechet: eigendecomposition failed");
  const Eigen::VectorXd l1 = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd a = e1.eigenvectors() * l1.asDiagonal() * e1.eigenvectors().transpose();
  const Eigen::MatrixXd m = a * s2 * a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e2(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  if (e2.info() != Eigen::Success) throw NumericError("frechet: eigendecomposition failed");
  const double cross = e2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

/// Frechet distance between Gaussian fits of two feature sets (rows are observations).
inline double frechet_features(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::Index need = 2 * a.cols();
  if (a.rows() < need || b.rows() < need)
    throw DataInsufficiencyError("fad: need at least " + std::to_string(need) + " frames per set, got " +
                                 std::to_string(a.rows()) + " and " + std::to_string(b.rows()));
  auto fit = [](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = (c.transpose() * c) / double(x.rows() - 1);
  };
  Eigen::VectorXd m1, m2;
  Eigen::MatrixXd c1, c2;
  fit(a, m1, c1);
  fit(b, m2, c2);
  return frechet_distance(m1, c1, m2, c2);
}

inline double fad_proxy(std::span<const Signal> ref, std::span<const Signal> gen) {
  return frechet_features(fad_features(ref), fad_features(gen));
}

}  // namespace latentmark
