#pragma once

// Default boxes, overlap measures, matching, the offset codec and
// non-maximum suppression. Coordinates are fractions of the image size.

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

namespace rundet {

struct BoxCorners {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const;
  bool valid() const { return x1 < x2 && y1 < y2; }
  friend bool operator==(const BoxCorners&, const BoxCorners&) = default;
};

struct BoxCenter {
  double cx = 0, cy = 0, w = 0, h = 0;
  friend bool operator==(const BoxCenter&, const BoxCenter&) = default;
};

BoxCorners to_corners(const BoxCenter& b);
BoxCenter to_center(const BoxCorners& b);
BoxCorners clip_unit(const BoxCorners& b);

double intersection_area(const BoxCorners& a, const BoxCorners& b);
/// Intersection over union; 0 for disjoint boxes.
double iou(const BoxCorners& a, const BoxCorners& b);
/// Intersection over the smaller box's area.
double intersection_over_smaller(const BoxCorners& a, const BoxCorners& b);

// ---- default boxes -----------------------------------------------------------

struct PriorConfig {
  double s_min = 0.2;
  double s_max = 0.9;
};

/// Extent of one prediction level's feature grid.
struct GridSize {
  int height = 0, width = 0;
};

/// Default boxes in flattening order (level, row, column, anchor). Per
/// location the anchors are: aspect 1, 2, 3, 1/2, 1/3 at the level scale,
/// then aspect 1 at sqrt(s_l * s_{l+1}).
class DefaultBoxSet {
 public:
  static constexpr int kBoxesPerLocation = 6;

  DefaultBoxSet() = default;
  DefaultBoxSet(std::vector<BoxCenter> boxes, std::vector<double> scales,
                std::vector<GridSize> grids);

  std::size_t size() const { return boxes_.size(); }
  const BoxCenter& operator[](std::size_t i) const { return boxes_[i]; }
  std::span<const BoxCenter> boxes() const { return boxes_; }
  const std::vector<BoxCorners>& corners() const { return corners_; }
  const std::vector<double>& scales() const { return scales_; }
  const std::vector<GridSize>& grids() const { return grids_; }
  /// Index of the first anchor of `level`.
  std::size_t level_offset(std::size_t level) const { return offsets_[level]; }
  std::size_t level_count() const { return grids_.size(); }
  int boxes_per_location() const { return per_location_; }

 private:
  std::vector<BoxCenter> boxes_;
  std::vector<BoxCorners> corners_;
  std::vector<double> scales_;
  std::vector<GridSize> grids_;
  std::vector<std::size_t> offsets_;
  int per_location_ = kBoxesPerLocation;
};

/// s_l = s_min + (s_max - s_min)(l - 1)/(k - 1); widths s*sqrt(ar), heights
/// s/sqrt(ar), each capped at the image extent (centres stay on the grid).
/// Throws ConfigError for fewer than two levels.
DefaultBoxSet generate_default_boxes(std::span<const GridSize> grids, const PriorConfig& config = {});

// ---- matching ----------------------------------------------------------------

struct MatchResult {
  static constexpr int kBackground = -1;
  std::vector<int> default_to_gt;    // per default box: gt index or kBackground
  std::vector<int> gt_best_default;  // per gt: the default it claimed

  std::size_t positives() const;
};

/// Bipartite step (each gt claims its best remaining default, global
/// highest overlap first), then every unclaimed default takes its best gt
/// when IoU >= threshold. Ties go to the lowest default, then gt, index.
MatchResult match(std::span<const BoxCorners> defaults, std::span<const BoxCorners> gts,
                  double threshold = 0.5);

// ---- codec -------------------------------------------------------------------

struct Variances {
  double center = 0.1;
  double size = 0.2;
};

using Offsets = std::array<double, 4>;

Offsets encode(const BoxCenter& gt, const BoxCenter& prior, Variances v = {});
BoxCenter decode(const Offsets& t, const BoxCenter& prior, Variances v = {});

// ---- detections --------------------------------------------------------------

struct Detection {
  int image_id = 0;
  int class_id = 0;  // dataset class id, background excluded
  double score = 0;
  BoxCorners box;
};

struct NmsConfig {
  double iou_threshold = 0.45;
  double score_floor = 0.01;
  int top_k = 200;      // kept per class
  int pre_top_k = 400;  // candidates per class entering suppression
};

/// Greedy suppression per (image, class): visit by descending score (lower
/// index first on ties), drop any box with IoU > threshold against a kept box.
/// Returns kept detections sorted by descending score, stable.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold = 0.45,
                           int top_k = 200);

/// Fraction of same-image same-class detection pairs where the smaller box
/// lies essentially inside the larger (intersection / smaller area >=
/// containment). 0 when there is no such pair.
double box_in_box_rate(std::span<const Detection> dets, double containment = 0.9);

/// Number of contained pairs and candidate pairs behind box_in_box_rate.
struct ContainmentCount {
  std::size_t contained = 0;
  std::size_t pairs = 0;
};
ContainmentCount count_containment(std::span<const Detection> dets, double containment = 0.9);

/// `image_id class score x1 y1 x2 y2`, six decimals, one detection per line.
void write_detections(std::ostream& os, std::span<const Detection> dets);
/// Parses the dump format; throws IoError on a malformed line.
std::vector<Detection> read_detections(std::istream& is);

}  // namespace rundet
