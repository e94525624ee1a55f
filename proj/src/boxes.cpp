#include "rundet/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include "rundet/errors.hpp"

namespace rundet {

double BoxCorners::area() const {
  return valid() ? (x2 - x1) * (y2 - y1) : 0.0;
}

BoxCorners to_corners(const BoxCenter& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

BoxCenter to_center(const BoxCorners& b) {
  return {0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), b.x2 - b.x1, b.y2 - b.y1};
}

BoxCorners clip_unit(const BoxCorners& b) {
  auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {c(b.x1), c(b.y1), c(b.x2), c(b.y2)};
}

double intersection_area(const BoxCorners& a, const BoxCorners& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

double iou(const BoxCorners& a, const BoxCorners& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

double intersection_over_smaller(const BoxCorners& a, const BoxCorners& b) {
  const double smaller = std::min(a.area(), b.area());
  if (smaller <= 0.0) return 0.0;
  return intersection_area(a, b) / smaller;
}

// ---- default boxes -----------------------------------------------------------

DefaultBoxSet::DefaultBoxSet(std::vector<BoxCenter> boxes, std::vector<double> scales,
                             std::vector<GridSize> grids)
    : boxes_(std::move(boxes)), scales_(std::move(scales)), grids_(std::move(grids)) {
  corners_.reserve(boxes_.size());
  for (const auto& b : boxes_) corners_.push_back(to_corners(b));
  std::size_t cells = 0;
  for (const auto& g : grids_) cells += static_cast<std::size_t>(g.height) * g.width;
  if (cells == 0 || boxes_.size() % cells != 0) {
    throw ConfigError("default box count is not a multiple of the grid cell count");
  }
  per_location_ = static_cast<int>(boxes_.size() / cells);
  std::size_t offset = 0;
  for (const auto& g : grids_) {
    offsets_.push_back(offset);
    offset += static_cast<std::size_t>(g.height) * g.width * per_location_;
  }
}

DefaultBoxSet generate_default_boxes(std::span<const GridSize> grids, const PriorConfig& config) {
  const std::size_t k = grids.size();
  if (k < 2) throw ConfigError("default boxes need at least two prediction levels");
  std::vector<double> scales(k);
  for (std::size_t l = 0; l < k; ++l) {
    scales[l] = config.s_min + (config.s_max - config.s_min) * static_cast<double>(l) /
                                   static_cast<double>(k - 1);
  }
  const double ratios[] = {1.0, 2.0, 3.0, 1.0 / 2.0, 1.0 / 3.0};
  std::vector<BoxCenter> boxes;
  for (std::size_t l = 0; l < k; ++l) {
    const double s = scales[l];
    const double s_next = l + 1 < k ? scales[l + 1] : 1.0;
    const double s_extra = std::sqrt(s * s_next);
    const auto [gh, gw] = grids[l];
    for (int i = 0; i < gh; ++i) {
      for (int j = 0; j < gw; ++j) {
        const double cx = (j + 0.5) / gw, cy = (i + 0.5) / gh;
        for (double ar : ratios) {
          const double r = std::sqrt(ar);
          boxes.push_back({cx, cy, std::min(s * r, 1.0), std::min(s / r, 1.0)});
        }
        boxes.push_back({cx, cy, std::min(s_extra, 1.0), std::min(s_extra, 1.0)});
      }
    }
  }
  return DefaultBoxSet(std::move(boxes), std::move(scales),
                       std::vector<GridSize>(grids.begin(), grids.end()));
}

// ---- matching ----------------------------------------------------------------

std::size_t MatchResult::positives() const {
  return static_cast<std::size_t>(std::count_if(default_to_gt.begin(), default_to_gt.end(),
                                                [](int g) { return g != kBackground; }));
}

MatchResult match(std::span<const BoxCorners> defaults, std::span<const BoxCorners> gts,
                  double threshold) {
  MatchResult result;
  result.default_to_gt.assign(defaults.size(), MatchResult::kBackground);
  result.gt_best_default.assign(gts.size(), -1);
  if (gts.empty() || defaults.empty()) return result;

  const std::size_t nd = defaults.size(), ng = gts.size();
  std::vector<double> overlap(nd * ng);
  for (std::size_t d = 0; d < nd; ++d)
    for (std::size_t g = 0; g < ng; ++g) overlap[d * ng + g] = iou(defaults[d], gts[g]);

  // Bipartite: repeatedly take the highest remaining (default, gt) overlap.
  std::vector<bool> gt_done(ng, false), default_taken(nd, false);
  for (std::size_t round = 0; round < std::min(ng, nd); ++round) {
    double best = -1.0;
    std::size_t bd = 0, bg = 0;
    for (std::size_t d = 0; d < nd; ++d) {
      if (default_taken[d]) continue;
      for (std::size_t g = 0; g < ng; ++g) {
        if (gt_done[g]) continue;
        if (overlap[d * ng + g] > best) {
          best = overlap[d * ng + g];
          bd = d;
          bg = g;
        }
      }
    }
    default_taken[bd] = true;
    gt_done[bg] = true;
    result.default_to_gt[bd] = static_cast<int>(bg);
    result.gt_best_default[bg] = static_cast<int>(bd);
  }

  // Per-prediction: unclaimed defaults take their best gt above threshold.
  for (std::size_t d = 0; d < nd; ++d) {
    if (default_taken[d]) continue;
    double best = -1.0;
    std::size_t bg = 0;
    for (std::size_t g = 0; g < ng; ++g) {
      if (overlap[d * ng + g] > best) {
        best = overlap[d * ng + g];
        bg = g;
      }
    }
    if (best >= threshold) result.default_to_gt[d] = static_cast<int>(bg);
  }
  return result;
}

// ---- codec -------------------------------------------------------------------

Offsets encode(const BoxCenter& gt, const BoxCenter& prior, Variances v) {
  return {(gt.cx - prior.cx) / (prior.w * v.center), (gt.cy - prior.cy) / (prior.h * v.center),
          std::log(gt.w / prior.w) / v.size, std::log(gt.h / prior.h) / v.size};
}

BoxCenter decode(const Offsets& t, const BoxCenter& prior, Variances v) {
  return {prior.cx + t[0] * v.center * prior.w, prior.cy + t[1] * v.center * prior.h,
          prior.w * std::exp(t[2] * v.size), prior.h * std::exp(t[3] * v.size)};
}

// ---- detections --------------------------------------------------------------

std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold, int top_k) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  // kept indices per (image, class)
  std::map<std::pair<int, int>, std::vector<std::size_t>> kept;
  std::vector<std::size_t> survivors;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    auto& group = kept[{d.image_id, d.class_id}];
    if (top_k >= 0 && group.size() >= static_cast<std::size_t>(top_k)) continue;
    const bool suppressed = std::any_of(group.begin(), group.end(), [&](std::size_t k) {
      return iou(dets[k].box, d.box) > iou_threshold;
    });
    if (suppressed) continue;
    group.push_back(idx);
    survivors.push_back(idx);
  }
  std::vector<Detection> out;
  out.reserve(survivors.size());
  for (std::size_t idx : survivors) out.push_back(dets[idx]);
  return out;
}

ContainmentCount count_containment(std::span<const Detection> dets, double containment) {
  ContainmentCount c;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (dets[i].image_id != dets[j].image_id || dets[i].class_id != dets[j].class_id) continue;
      ++c.pairs;
      if (intersection_over_smaller(dets[i].box, dets[j].box) >= containment) ++c.contained;
    }
  }
  return c;
}

double box_in_box_rate(std::span<const Detection> dets, double containment) {
  const auto c = count_containment(dets, containment);
  return c.pairs == 0 ? 0.0 : static_cast<double>(c.contained) / static_cast<double>(c.pairs);
}

void write_detections(std::ostream& os, std::span<const Detection> dets) {
  const auto flags = os.flags();
  os << std::fixed << std::setprecision(6);
  for (const auto& d : dets) {
    os << d.image_id << ' ' << d.class_id << ' ' << d.score << ' ' << d.box.x1 << ' ' << d.box.y1
       << ' ' << d.box.x2 << ' ' << d.box.y2 << '\n';
  }
  os.flags(flags);
}

std::vector<Detection> read_detections(std::istream& is) {
  std::vector<Detection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Detection d;
    if (!(ls >> d.image_id >> d.class_id >> d.score >> d.box.x1 >> d.box.y1 >> d.box.x2 >>
          d.box.y2)) {
      throw IoError("malformed detection record at line " + std::to_string(lineno));
    }
    out.push_back(d);
  }
  return out;
}

}  // namespace rundet
