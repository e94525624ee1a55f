#pragma once

// Brute-force references for matching and NMS. They deliberately use a
// different route (sort every candidate pair once, precomputed IoU matrix)
// from the production code.

#include <algorithm>
#include <cmath>
#include <random>
#include <tuple>
#include <vector>

#include "rundet/boxes.hpp"

namespace rundet::oracle {

// Random valid box; `snapped` puts corners on a 1/8 lattice so exact ties occur.
inline BoxCorners random_box(std::mt19937_64& rng, bool snapped = false) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x1 = u(rng), x2 = u(rng), y1 = u(rng), y2 = u(rng);
  if (snapped) {
    auto snap = [](double v) { return std::round(v * 8.0) / 8.0; };
    x1 = snap(x1), x2 = snap(x2), y1 = snap(y1), y2 = snap(y2);
  }
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  if (x2 - x1 < 1e-3) x2 = x1 + 0.125;
  if (y2 - y1 < 1e-3) y2 = y1 + 0.125;
  return {x1, y1, x2, y2};
}

inline MatchResult brute_force_match(const std::vector<BoxCorners>& defaults,
                                     const std::vector<BoxCorners>& gts, double threshold) {
  MatchResult r;
  r.default_to_gt.assign(defaults.size(), MatchResult::kBackground);
  r.gt_best_default.assign(gts.size(), -1);
  // (overlap, default, gt) sorted by descending overlap then ascending indices
  std::vector<std::tuple<double, int, int>> pairs;
  for (int d = 0; d < static_cast<int>(defaults.size()); ++d)
    for (int g = 0; g < static_cast<int>(gts.size()); ++g)
      pairs.emplace_back(iou(defaults[d], gts[g]), d, g);
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
    return std::get<2>(a) < std::get<2>(b);
  });
  std::vector<bool> claimed(defaults.size(), false);
  for (const auto& [ov, d, g] : pairs) {
    if (claimed[d] || r.gt_best_default[g] >= 0) continue;
    claimed[d] = true;
    r.gt_best_default[g] = d;
    r.default_to_gt[d] = g;
  }
  for (int d = 0; d < static_cast<int>(defaults.size()); ++d) {
    if (claimed[d]) continue;
    for (const auto& [ov, pd, g] : pairs) {  // first entry for d is its best gt
      if (pd != d) continue;
      if (ov >= threshold) r.default_to_gt[d] = g;
      break;
    }
  }
  return r;
}

inline std::vector<Detection> random_detections(std::mt19937_64& rng, int max_count, bool snapped) {
  std::uniform_int_distribution<int> count(0, max_count);
  std::uniform_int_distribution<int> cls(0, 2);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  std::vector<Detection> dets(count(rng));
  for (auto& d : dets) {
    d.class_id = cls(rng);
    d.score = snapped ? std::round(score(rng) * 4.0) / 4.0 : score(rng);
    // clustered boxes so suppression actually happens
    BoxCorners b = random_box(rng, snapped);
    d.box = {b.x1 * 0.5, b.y1 * 0.5, b.x1 * 0.5 + (b.x2 - b.x1) * 0.5 + 0.05,
             b.y1 * 0.5 + (b.y2 - b.y1) * 0.5 + 0.05};
  }
  return dets;
}

// Greedy NMS by explicit candidate-set elimination over a full IoU matrix.
inline std::vector<Detection> brute_force_nms(const std::vector<Detection>& dets, double thresh) {
  const std::size_t n = dets.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m[i][j] = iou(dets[i].box, dets[j].box);
  std::vector<bool> alive(n, true);
  std::vector<Detection> kept;
  while (true) {
    int best = -1;
    for (std::size_t i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      if (best < 0 || dets[i].score > dets[best].score) best = static_cast<int>(i);
    }
    if (best < 0) break;
    kept.push_back(dets[best]);
    alive[best] = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (alive[j] && dets[j].class_id == dets[best].class_id &&
          dets[j].image_id == dets[best].image_id && m[best][j] > thresh) {
        alive[j] = false;
      }
    }
  }
  return kept;
}

inline bool same_detections(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].class_id != b[i].class_id || a[i].score != b[i].score || !(a[i].box == b[i].box)) {
      return false;
    }
  }
  return true;
}

}  // namespace rundet::oracle
