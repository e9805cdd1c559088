#pragma once

// Lloyd k-means with seeded farthest-point initialization.

#include <Eigen/Core>
#include <limits>
#include <vector>

#include "latentmark/core.hpp"

namespace latentmark {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct KMeansResult {
  MatrixF centroids;              // k x d
  std::vector<int> assignment;    // per point
  double mse = 0.0;               // mean squared distance to nearest centroid
  int reseeded = 0;               // empty clusters re-seeded over all iterations
};

namespace detail {

inline double sq_dist(const float* a, const float* b, Eigen::Index d) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    const double v = double(a[i]) - double(b[i]);
    s += v * v;
  }
  return s;
}

/// Nearest centroid per row (lowest index on ties); distances returned up to
/// the per-row constant ||x||^2, which the caller adds back if it needs them.
inline void nearest_rows(const MatrixF& points, const MatrixF& centroids, std::vector<int>& best,
                         std::vector<float>* best_score = nullptr) {
  const Eigen::Index n = points.rows(), k = centroids.rows();
  best.assign(std::size_t(n), 0);
  if (best_score) best_score->assign(std::size_t(n), 0.0f);
  const Eigen::VectorXf half_norm = 0.5f * centroids.rowwise().squaredNorm().transpose();
  constexpr Eigen::Index block = 2048;
  MatrixF dots;
  for (Eigen::Index r0 = 0; r0 < n; r0 += block) {
    const Eigen::Index rows = std::min(block, n - r0);
    dots.noalias() = points.middleRows(r0, rows) * centroids.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      // argmin ||x-c||^2 == argmin (||c||^2/2 - <x,c>)
      float bv = std::numeric_limits<float>::infinity();
      int bi = 0;
      for (Eigen::Index c = 0; c < k; ++c) {
        const float v = half_norm[c] - dots(r, c);
        if (v < bv) {
          bv = v;
          bi = int(c);
        }
      }
      best[std::size_t(r0 + r)] = bi;
      if (best_score) (*best_score)[std::size_t(r0 + r)] = bv;
    }
  }
}

}  // namespace detail

/// Cluster the rows of `points` into `k` groups.
inline KMeansResult kmeans(const MatrixF& points, int k, int iterations, Rng& rng) {
  const Eigen::Index n = points.rows(), d = points.cols();
  require(k >= 1, "kmeans: k must be >= 1");
  if (n < k)
    throw DataInsufficiencyError("kmeans: need at least " + std::to_string(k) + " points, got " +
                                 std::to_string(n));
  KMeansResult res;
  res.centroids.resize(k, d);

  // Farthest-point seeding: random first centre, then greedily the point
  // farthest from all chosen centres.
  std::vector<double> min_d(std::size_t(n), std::numeric_limits<double>::infinity());
  Eigen::Index pick = Eigen::Index(uniform_int(rng, 0, n - 1));
  for (int c = 0; c < k; ++c) {
    res.centroids.row(c) = points.row(pick);
    const float* cp = res.centroids.row(c).data();
    Eigen::Index far = 0;
    double far_d = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double& m = min_d[std::size_t(i)];
      m = std::min(m, detail::sq_dist(points.row(i).data(), cp, d));
      if (m > far_d) {
        far_d = m;
        far = i;
      }
    }
    pick = far;
  }

  std::vector<double> sums(static_cast<std::size_t>(k * d));
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k));
  for (int it = 0; it < iterations; ++it) {
    detail::nearest_rows(points, res.centroids, res.assignment);
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = res.assignment[std::size_t(i)];
      ++counts[std::size_t(a)];
      const float* p = points.row(i).data();
      double* s = sums.data() + std::size_t(a) * std::size_t(d);
      for (Eigen::Index j = 0; j < d; ++j) s[j] += p[j];
    }
    bool any_empty = false;
    for (int c = 0; c < k; ++c) {
      if (counts[std::size_t(c)] == 0) {
        any_empty = true;
        continue;
      }
      for (Eigen::Index j = 0; j < d; ++j)
        res.centroids(c, j) = float(sums[std::size_t(c) * std::size_t(d) + std::size_t(j)] /
                                    double(counts[std::size_t(c)]));
    }
    if (!any_empty) continue;
    // Empty clusters take the point farthest from its current centre.
    std::vector<double> dist(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      dist[std::size_t(i)] =
          detail::sq_dist(points.row(i).data(), res.centroids.row(res.assignment[std::size_t(i)]).data(), d);
    for (int c = 0; c < k; ++c) {
      if (counts[std::size_t(c)] != 0) continue;
      const auto far = std::size_t(std::max_element(dist.begin(), dist.end()) - dist.begin());
      res.centroids.row(c) = points.row(Eigen::Index(far));
      dist[far] = 0.0;
      ++res.reseeded;
    }
  }

  detail::nearest_rows(points, res.centroids, res.assignment);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    total += detail::sq_dist(points.row(i).data(), res.centroids.row(res.assignment[std::size_t(i)]).data(), d);
  res.mse = n > 0 ? total / double(n) : 0.0;
  return res;
}

}  // namespace latentmark
