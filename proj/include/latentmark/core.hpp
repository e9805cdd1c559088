#pragma once

// Shared value types, error hierarchy and seeded randomness.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace latentmark {

// Every failure carries a category so the CLI can map it to an exit code.
enum class ErrorKind {
  parameter,
  io,
  format,
  data_insufficiency,
  corruption,
  numeric,
  calibration,
  config,
  dependency,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define LATENTMARK_DEFINE_ERROR(Name, Kind)                                     \
  class Name : public Error {                                                  \
   public:                                                                     \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

LATENTMARK_DEFINE_ERROR(ParameterError, parameter)
LATENTMARK_DEFINE_ERROR(IoError, io)
LATENTMARK_DEFINE_ERROR(FormatError, format)
LATENTMARK_DEFINE_ERROR(DataInsufficiencyError, data_insufficiency)
LATENTMARK_DEFINE_ERROR(CorruptionError, corruption)
LATENTMARK_DEFINE_ERROR(NumericError, numeric)
LATENTMARK_DEFINE_ERROR(CalibrationError, calibration)
LATENTMARK_DEFINE_ERROR(ConfigError, config)
LATENTMARK_DEFINE_ERROR(DependencyError, dependency)

#undef LATENTMARK_DEFINE_ERROR

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ParameterError(what);
}

/// Mono waveform. Samples are expected in [-1, 1]; pass the samples through
/// `clamp_in_place` after any operation that may overshoot.
struct Signal {
  std::vector<float> samples;
  int sample_rate = 16000;

  Signal() = default;
  Signal(std::vector<float> s, int rate) : samples(std::move(s)), sample_rate(rate) {}

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
  double duration_s() const noexcept { return double(samples.size()) / sample_rate; }

  bool in_range() const noexcept {
    return std::all_of(samples.begin(), samples.end(),
                       [](float x) { return x >= -1.0f && x <= 1.0f; });
  }

  friend bool operator==(const Signal&, const Signal&) = default;
};

/// Clamp every sample to [-1, 1]; returns the number of samples changed.
inline std::size_t clamp_in_place(std::vector<float>& s) {
  std::size_t n = 0;
  for (float& x : s) {
    if (x > 1.0f) {
      x = 1.0f;
      ++n;
    } else if (x < -1.0f) {
      x = -1.0f;
      ++n;
    }
  }
  return n;
}

inline double energy(std::span<const float> x) {
  double e = 0.0;
  for (float v : x) e += double(v) * v;
  return e;
}

// ---------------------------------------------------------------------------
// Randomness. std::mt19937_64 and std::seed_seq are fully specified by the
// standard; the distribution helpers below are written out so streams are
// identical across standard library implementations.

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::seed_seq seq{std::uint32_t(a), std::uint32_t(a >> 32), std::uint32_t(b),
                    std::uint32_t(b >> 32), std::uint32_t(c), std::uint32_t(c >> 32)};
  return Rng(seq);
}

/// Uniform in [0, 1).
inline double uniform01(Rng& rng) { return double(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [lo, hi].
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  const auto span = std::uint64_t(hi - lo) + 1;
  return lo + std::int64_t(rng() % span);
}

/// Standard normal via Box-Muller (one draw per call, second value discarded).
inline double gaussian(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace latentmark
