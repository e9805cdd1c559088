#pragma once

// Orthonormal type-II DCT over fixed-length frames, as a cached basis table.

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include "latentmark/core.hpp"

namespace latentmark {

class DctBasis {
 public:
  explicit DctBasis(std::size_t n) : n_(n), table_(n * n) {
    require(n >= 1, "dct: frame length must be positive");
    const double s0 = std::sqrt(1.0 / double(n));
    const double sk = std::sqrt(2.0 / double(n));
    for (std::size_t k = 0; k < n; ++k) {
      const double scale = k == 0 ? s0 : sk;
      for (std::size_t t = 0; t < n; ++t)
        table_[k * n + t] = scale * std::cos(std::numbers::pi * (double(t) + 0.5) * double(k) / double(n));
    }
  }

  std::size_t size() const noexcept { return n_; }

  /// Basis vector k sampled over the frame; row k of the analysis matrix.
  std::span<const double> row(std::size_t k) const { return {table_.data() + k * n_, n_}; }

  /// First `out.size()` coefficients of the frame.
  template <typename T, typename U>
  void forward(std::span<const T> frame, std::span<U> out) const {
    for (std::size_t k = 0; k < out.size(); ++k) {
      const double* b = table_.data() + k * n_;
      double acc = 0.0;
      for (std::size_t t = 0; t < n_; ++t) acc += b[t] * double(frame[t]);
      out[k] = U(acc);
    }
  }

  /// Synthesis from the leading coefficients; missing coefficients are zero.
  template <typename T, typename U>
  void inverse(std::span<const T> coeffs, std::span<U> frame) const {
    std::vector<double> acc(n_, 0.0);
    for (std::size_t k = 0; k < coeffs.size(); ++k) {
      const double c = double(coeffs[k]);
      if (c == 0.0) continue;
      const double* b = table_.data() + k * n_;
      for (std::size_t t = 0; t < n_; ++t) acc[t] += c * b[t];
    }
    for (std::size_t t = 0; t < n_; ++t) frame[t] = U(acc[t]);
  }

 private:
  std::size_t n_;
  std::vector<double> table_;
};

/// Process-wide cache; bases are immutable once built.
inline std::shared_ptr<const DctBasis> dct_basis(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::shared_ptr<const DctBasis>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[n];
  if (!slot) slot = std::make_shared<const DctBasis>(n);
  return slot;
}

}  // namespace latentmark
