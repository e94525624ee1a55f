#pragma once

// Detection metrics and throughput measurement.

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rundet/boxes.hpp"
#include "rundet/model.hpp"
#include "rundet/shapes.hpp"

namespace rundet {

struct GtBox {
  int image_id = 0;
  int class_id = 0;
  BoxCorners box;
};

std::vector<GtBox> ground_truth_of(std::span<const ShapesSample> samples);

/// All-point AP for one class. Detections are visited by descending score
/// (stable). Each is compared with the highest-IoU gt of its image and counts
/// as a true positive iff that IoU >= threshold and the gt is still
/// unmatched. nullopt when there is no ground truth.
std::optional<double> average_precision(std::span<const Detection> dets, std::span<const GtBox> gts,
                                        double iou_threshold = 0.5);

/// Area buckets in pixels on the canvas: S < 12^2, M < 30^2, L otherwise.
enum class SizeBucket { kSmall = 0, kMedium = 1, kLarge = 2 };
inline constexpr double kSmallArea = 144.0, kMediumArea = 900.0;
SizeBucket size_bucket(const BoxCorners& box, int image_size);
const char* bucket_name(SizeBucket b);

/// Mean over classes of per-bucket AP. Ground truth is filtered to the
/// bucket. A detection joins the bucket of its best same-class gt when that
/// overlap reaches the threshold, otherwise the bucket of its own area.
std::array<std::optional<double>, 3> size_bucketed_ap(std::span<const Detection> dets,
                                                      std::span<const GtBox> gts, int num_classes,
                                                      int image_size, double iou_threshold = 0.5);

struct EvalReport {
  std::vector<std::optional<double>> class_ap;
  double map = 0;
  std::array<std::optional<double>, 3> bucket_ap;
  double recall_at_100 = 0;
  std::vector<int> detections_per_image;  // histogram, last bin is "or more"
  double box_in_box = 0;
  std::size_t images = 0;
  std::size_t detections = 0;

  void write_text(std::ostream& os) const;
  /// key=value lines.
  void write_keyvalue(std::ostream& os) const;
};

struct EvalOptions {
  int num_classes = kShapeClasses;
  int image_size = 64;
  double iou_threshold = 0.5;
  double histogram_score = 0.5;  // detections counted per image at or above
  int histogram_bins = 11;
  double box_in_box_score = 0.5;
  double containment = 0.9;  // inner area fraction that counts as inside
};

EvalReport evaluate(std::span<const Detection> dets, std::span<const GtBox> gts, std::size_t images,
                    const EvalOptions& options = {});

/// Runs the detector over samples in batches (no graph) and returns every
/// detection, image ids taken from the samples.
std::vector<Detection> detect_all(const Detector& model, std::span<const ShapesSample> samples,
                                  int batch_size = 32);

/// Box-in-box rate restricted to detections scoring at least `min_score`.
double box_in_box_at(std::span<const Detection> dets, double min_score = 0.5, double containment = 0.9);

struct BenchReport {
  int batch = 0;
  int repeats = 0;
  double median_ms_per_image = 0;
  double p95_ms_per_image = 0;
  double images_per_second = 0;
  std::uint64_t macs_per_image = 0;
};

/// Times end-to-end detection (forward, decode, NMS) of `images` after
/// `warmup` untimed runs.
BenchReport benchmark(const Detector& model, const Tensor& images, int repeats, int warmup = 3);

/// Multiply-accumulates of one forward pass on a single image, summed over
/// the convolution nodes of the recorded graph.
std::uint64_t count_macs(const Detector& model);

}  // namespace rundet
