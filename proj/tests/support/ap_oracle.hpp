#pragma once

// Brute-force average precision and random detection fixtures for it.

#include <algorithm>
#include <random>
#include <vector>

#include "rundet/evalkit.hpp"

namespace rundet::oracle {

// Exhaustive PR oracle: every cutoff k of the score-ordered list gives a
// (recall, precision) point; AP sums recall gains weighted by the best
// precision at any later cutoff.
inline double oracle_ap(std::vector<Detection> dets, const std::vector<GtBox>& gts, double thr) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<bool> taken(gts.size(), false);
  std::vector<int> tp;
  for (const auto& d : dets) {
    int best = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].image_id != d.image_id) continue;
      const double o = iou(d.box, gts[g].box);
      if (o > best_iou) best_iou = o, best = static_cast<int>(g);
    }
    const bool ok = best >= 0 && best_iou >= thr && !taken[static_cast<std::size_t>(best)];
    if (ok) taken[static_cast<std::size_t>(best)] = true;
    tp.push_back(ok);
  }
  const std::size_t n = tp.size();
  std::vector<double> prec(n), rec(n);
  int hits = 0;
  for (std::size_t k = 0; k < n; ++k) {
    hits += tp[k];
    prec[k] = static_cast<double>(hits) / (k + 1);
    rec[k] = static_cast<double>(hits) / gts.size();
  }
  double ap = 0, prev = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (rec[k] == prev) continue;
    double best = 0;
    for (std::size_t j = k; j < n; ++j) best = std::max(best, prec[j]);
    ap += (rec[k] - prev) * best;
    prev = rec[k];
  }
  return ap;
}

inline BoxCorners fixture_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0), s(0.05, 0.6);
  const double w = s(rng), h = s(rng), x = u(rng) * (1 - w), y = u(rng) * (1 - h);
  return {x, y, x + w, y + h};
}

inline BoxCorners jitter(const BoxCorners& b, std::mt19937_64& rng, double amount) {
  std::uniform_real_distribution<double> u(-amount, amount);
  BoxCorners j{b.x1 + u(rng), b.y1 + u(rng), b.x2 + u(rng), b.y2 + u(rng)};
  if (!j.valid()) return b;
  return j;
}

// Ground truth on a few images plus detections near and away from it.
inline void random_fixture(std::mt19937_64& rng, std::vector<Detection>& dets, std::vector<GtBox>& gts, int classes = 1) {
  std::uniform_int_distribution<int> ngt(1, 6), nextra(0, 6), cls(0, classes - 1);
  std::uniform_real_distribution<double> score(0.0, 1.0), coin(0.0, 1.0);
  dets.clear();
  gts.clear();
  for (int img = 0; img < 4; ++img) {
    for (int k = ngt(rng); k > 0; --k) {
      const GtBox g{img, cls(rng), fixture_box(rng)};
      gts.push_back(g);
      for (int copy = 0; copy < 2; ++copy)
        if (coin(rng) < 0.6) dets.push_back({img, g.class_id, score(rng), jitter(g.box, rng, 0.08)});
    }
    for (int k = nextra(rng); k > 0; --k) dets.push_back({img, cls(rng), score(rng), fixture_box(rng)});
  }
}

}  // namespace rundet::oracle
