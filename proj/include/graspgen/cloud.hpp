#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "graspgen/geom.hpp"

namespace graspgen::cloud {

using geom::Vec3;

// Points with optional per-point feature rows (C may be zero).
struct PointFeatureCloud {
  std::vector<Vec3> coordinates;
  std::vector<double> features;  // row-major N x C
  int feature_dim = 0;

  int size() const { return static_cast<int>(coordinates.size()); }

  void require_valid() const {
    if (feature_dim < 0) throw std::invalid_argument("PointFeatureCloud: negative feature dim");
    if (features.size() != static_cast<size_t>(size()) * feature_dim)
      throw std::invalid_argument("PointFeatureCloud: feature row count mismatch");
  }
};

inline Vec3 centroid(const std::vector<Vec3>& pts) {
  Vec3 c{0, 0, 0};
  for (const Vec3& p : pts) c += p;
  return c * (1.0 / static_cast<double>(pts.size()));
}

namespace detail {
inline bool lex_less(const Vec3& a, const Vec3& b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  return a.z < b.z;
}
}  // namespace detail

// Deterministic farthest-point sampling: starts at the point nearest the
// centroid, then repeatedly takes the max-min-distance point. Ties break
// lexicographically on coordinates, so the result is permutation invariant.
inline std::vector<int> fps_select(const std::vector<Vec3>& pts, int k) {
  const int n = static_cast<int>(pts.size());
  if (n == 0) throw std::invalid_argument("fps_select: empty cloud");
  k = std::min(k, n);
  const Vec3 c = centroid(pts);
  int start = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double d = norm(pts[i] - c);
    if (d < best || (d == best && detail::lex_less(pts[i], pts[start]))) {
      best = d;
      start = i;
    }
  }
  std::vector<int> chosen{start};
  std::vector<double> mind(n);
  for (int i = 0; i < n; ++i) mind[i] = norm(pts[i] - pts[start]);
  while (static_cast<int>(chosen.size()) < k) {
    int far = -1;
    double fd = -1.0;
    for (int i = 0; i < n; ++i) {
      if (mind[i] > fd || (mind[i] == fd && far >= 0 && detail::lex_less(pts[i], pts[far]))) {
        fd = mind[i];
        far = i;
      }
    }
    chosen.push_back(far);
    for (int i = 0; i < n; ++i) mind[i] = std::fmin(mind[i], norm(pts[i] - pts[far]));
  }
  return chosen;
}

// Indices of the k nearest neighbors of pts[query], excluding query itself.
inline std::vector<int> knn(const std::vector<Vec3>& pts, int query, int k) {
  std::vector<std::pair<double, int>> d;
  d.reserve(pts.size() - 1);
  for (int i = 0; i < static_cast<int>(pts.size()); ++i)
    if (i != query) d.push_back({norm(pts[i] - pts[query]), i});
  const int take = std::min<int>(k, static_cast<int>(d.size()));
  std::partial_sort(d.begin(), d.begin() + take, d.end());
  std::vector<int> out;
  for (int i = 0; i < take; ++i) out.push_back(d[i].second);
  return out;
}

// Neighbors of center within radius, nearest first, capped at max_count;
// the center index itself is always first.
inline std::vector<int> radius_neighbors(const std::vector<Vec3>& pts, int center, double radius,
                                         int max_count) {
  std::vector<std::pair<double, int>> d;
  for (int i = 0; i < static_cast<int>(pts.size()); ++i) {
    if (i == center) continue;
    const double dist = norm(pts[i] - pts[center]);
    if (dist <= radius) d.push_back({dist, i});
  }
  std::sort(d.begin(), d.end(), [&pts](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return detail::lex_less(pts[a.second], pts[b.second]);
  });
  std::vector<int> out{center};
  for (const auto& [dist, i] : d) {
    if (static_cast<int>(out.size()) >= max_count) break;
    out.push_back(i);
  }
  return out;
}

}  // namespace graspgen::cloud
