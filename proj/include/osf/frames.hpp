#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "osf/core.hpp"
#include "osf/scenegen.hpp"

namespace osf {

// Laplacian-variance sharpness: variance of the 3x3 Laplacian of the
// grayscale image over interior pixels. Higher = sharper.
inline double blur_score(const std::vector<double>& rgb, int h, int w) {
  if (h < 3 || w < 3) throw std::invalid_argument("blur_score: image must be at least 3x3");
  if (rgb.size() != static_cast<size_t>(h) * w * 3)
    throw std::invalid_argument("blur_score: buffer size mismatch");
  std::vector<double> gray(static_cast<size_t>(h) * w);
  for (size_t i = 0; i < gray.size(); ++i)
    gray[i] = 0.299 * rgb[i * 3] + 0.587 * rgb[i * 3 + 1] + 0.114 * rgb[i * 3 + 2];
  auto g = [&](int y, int x) { return gray[static_cast<size_t>(y) * w + x]; };
  double sum = 0.0, sum2 = 0.0;
  const int count = (h - 2) * (w - 2);
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      const double lap = g(y - 1, x) + g(y + 1, x) + g(y, x - 1) + g(y, x + 1) - 4.0 * g(y, x);
      sum += lap;
      sum2 += lap * lap;
    }
  }
  const double mean = sum / count;
  return sum2 / count - mean * mean;
}

// Drops the floor(fraction * N) lowest-scoring images; retained indices keep
// their original order. Among tied scores the lower index is retained first.
inline std::vector<int> filter_blurred(const std::vector<double>& scores, double fraction) {
  if (fraction < 0.0 || fraction >= 1.0)
    throw std::invalid_argument("filter_blurred: fraction must be in [0, 1)");
  const int n = static_cast<int>(scores.size());
  const int drop = static_cast<int>(std::floor(fraction * n));
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  // Drop priority: lowest score first; ties drop the higher index.
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
      return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)];
    return a > b;
  });
  std::vector<bool> dropped(scores.size(), false);
  for (int i = 0; i < drop; ++i) dropped[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;
  std::vector<int> retained;
  for (int i = 0; i < n; ++i)
    if (!dropped[static_cast<size_t>(i)]) retained.push_back(i);
  return retained;
}

// Pose-space distance: normalized translation plus weighted relative
// rotation angle. beta balances the two terms.
inline double pose_dissimilarity(const CameraPose& a, const CameraPose& b, double bounds_diag,
                                 double beta = 0.5) {
  if (bounds_diag <= 0.0) throw std::invalid_argument("pose_dissimilarity: bounds diagonal must be positive");
  return norm(a.position - b.position) / bounds_diag +
         beta * quat_angle(a.orientation, b.orientation) / kPi;
}

// Greedy farthest-point selection over pose dissimilarity. The pose nearest
// the position centroid anchors the first pick (it is not itself forced into
// the selection), then each step adds the pose with the largest
// min-dissimilarity to the selected set. Lowest index wins ties.
inline std::vector<int> select_frames(const std::vector<CameraPose>& poses, int k,
                                      double bounds_diag, double beta = 0.5) {
  const int n = static_cast<int>(poses.size());
  if (k < 1 || k > n) throw std::invalid_argument("select_frames: need 1 <= k <= N");
  Vec3 centroid;
  for (const CameraPose& p : poses) centroid += p.position;
  centroid = centroid / n;
  int anchor = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double d = norm(poses[static_cast<size_t>(i)].position - centroid);
    if (d < best) { best = d; anchor = i; }
  }
  // distance-to-anchor decides only the first pick; afterwards min_d tracks
  // the selected set alone
  std::vector<double> min_d(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    min_d[static_cast<size_t>(i)] = pose_dissimilarity(
        poses[static_cast<size_t>(i)], poses[static_cast<size_t>(anchor)], bounds_diag, beta);
  std::vector<int> selected;
  std::vector<bool> in_set(static_cast<size_t>(n), false);
  while (static_cast<int>(selected.size()) < k) {
    int pick = -1;
    double pick_d = -1.0;
    for (int i = 0; i < n; ++i) {
      if (in_set[static_cast<size_t>(i)]) continue;
      if (min_d[static_cast<size_t>(i)] > pick_d) {
        pick_d = min_d[static_cast<size_t>(i)];
        pick = i;
      }
    }
    selected.push_back(pick);
    in_set[static_cast<size_t>(pick)] = true;
    const bool first = selected.size() == 1;
    for (int i = 0; i < n; ++i) {
      if (in_set[static_cast<size_t>(i)]) continue;
      const double d = pose_dissimilarity(poses[static_cast<size_t>(i)],
                                          poses[static_cast<size_t>(pick)], bounds_diag, beta);
      min_d[static_cast<size_t>(i)] = first ? d : std::min(min_d[static_cast<size_t>(i)], d);
    }
  }
  return selected;
}

// Smallest pairwise dissimilarity within a selected subset.
inline double min_pairwise_dissimilarity(const std::vector<CameraPose>& poses,
                                         const std::vector<int>& subset, double bounds_diag,
                                         double beta = 0.5) {
  double m = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < subset.size(); ++i)
    for (size_t j = i + 1; j < subset.size(); ++j)
      m = std::min(m, pose_dissimilarity(poses[static_cast<size_t>(subset[i])],
                                         poses[static_cast<size_t>(subset[j])], bounds_diag, beta));
  return m;
}

}  // namespace osf
