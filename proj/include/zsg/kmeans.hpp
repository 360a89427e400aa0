#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace zsg {

struct KMeansResult {
  std::vector<std::vector<double>> centers;
  std::vector<std::size_t> assignment;  // cluster index per point
  int iterations = 0;
  bool converged = false;
};

inline constexpr double kKMeansTolerance = 1e-6;

namespace detail {

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline std::size_t nearest_center(const std::vector<double>& p, const std::vector<std::vector<double>>& centers) {
  std::size_t best = 0;
  double best_d = squared_distance(p, centers[0]);
  for (std::size_t c = 1; c < centers.size(); ++c) {
    const double d = squared_distance(p, centers[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace detail

/// Lloyd's k-means. The first center is a seeded random point; each further
/// center is the point farthest from its nearest chosen center (lowest index
/// on ties). Iterates until every center moves less than 1e-6 or max_iter.
/// An empty cluster takes the point farthest from its own center among
/// clusters with more than one member. Fewer than k distinct points is a
/// configuration error.
inline KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, std::uint64_t seed,
                           int max_iter = 100) {
  require(k >= 1, ErrorClass::ConfigError, "kmeans: k must be >= 1");
  require(points.size() >= k, ErrorClass::ConfigError, "kmeans: k exceeds the number of points");
  const std::size_t dim = points[0].size();
  for (const auto& p : points) {
    require(p.size() == dim, ErrorClass::InvalidInput, "kmeans: points differ in width");
    for (double x : p) require(std::isfinite(x), ErrorClass::InvalidInput, "kmeans: non-finite coordinate");
  }
  const std::set<std::vector<double>> distinct(points.begin(), points.end());
  require(distinct.size() >= k, ErrorClass::ConfigError,
          "kmeans: only " + std::to_string(distinct.size()) + " distinct points for k=" + std::to_string(k));

  Rng rng(derive_seed(seed, 0x6b6d));
  KMeansResult r;
  r.centers.push_back(points[rng.below(points.size())]);
  std::vector<double> nearest(points.size(), std::numeric_limits<double>::infinity());
  while (r.centers.size() < k) {
    std::size_t far = 0;
    double far_d = -1;
    for (std::size_t i = 0; i < points.size(); ++i) {
      nearest[i] = std::min(nearest[i], detail::squared_distance(points[i], r.centers.back()));
      if (nearest[i] > far_d) {
        far_d = nearest[i];
        far = i;
      }
    }
    r.centers.push_back(points[far]);
  }

  r.assignment.assign(points.size(), 0);
  for (int it = 1; it <= max_iter; ++it) {
    r.iterations = it;
    for (std::size_t i = 0; i < points.size(); ++i) r.assignment[i] = detail::nearest_center(points[i], r.centers);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t a : r.assignment) ++count[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] > 0) continue;
      std::size_t steal = points.size();
      double steal_d = -1;
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (count[r.assignment[i]] <= 1) continue;
        const double d = detail::squared_distance(points[i], r.centers[r.assignment[i]]);
        if (d > steal_d) {
          steal_d = d;
          steal = i;
        }
      }
      if (steal == points.size()) break;
      --count[r.assignment[steal]];
      r.assignment[steal] = c;
      count[c] = 1;
    }
    std::vector<std::vector<double>> next(k, std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t d = 0; d < dim; ++d) next[r.assignment[i]][d] += points[i][d];
    double shift = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) {
        next[c] = r.centers[c];
        continue;
      }
      for (double& x : next[c]) x /= static_cast<double>(count[c]);
      shift = std::max(shift, std::sqrt(detail::squared_distance(next[c], r.centers[c])));
    }
    r.centers = std::move(next);
    if (shift < kKMeansTolerance) {
      r.converged = true;
      break;
    }
  }
  for (std::size_t i = 0; i < points.size(); ++i) r.assignment[i] = detail::nearest_center(points[i], r.centers);
  return r;
}

}  // namespace zsg
