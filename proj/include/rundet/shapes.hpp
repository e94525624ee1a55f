#pragma once

// Synthetic detection data: filled shapes of three classes on a textured
// canvas. Images are stored as raw planar RGB bytes, one file per sample.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rundet/boxes.hpp"
#include "rundet/loss.hpp"
#include "rundet/tensor.hpp"

namespace rundet {

enum class ShapeClass : int { kCircle = 0, kSquare = 1, kTriangle = 2 };
inline constexpr int kShapeClasses = 3;
const char* shape_name(int class_id);

struct Annotation {
  int class_id = 0;  // 0..2, background excluded
  BoxCorners box;    // fractions of the image side
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct ShapesSample {
  int id = 0;
  int size = 64;
  std::vector<std::uint8_t> pixels;  // 3 x size x size, planar
  std::vector<Annotation> objects;

  std::uint8_t at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * size + y) * size + x];
  }
  std::uint64_t checksum() const;
};

/// One drawn shape in pixel units: a filled figure inside the square
/// [x, x + side) x [y, y + side).
struct ShapeInstance {
  int class_id = 0;
  int x = 0, y = 0, side = 0;
  std::array<std::uint8_t, 3> color{};
};

struct ShapesConfig {
  int image_size = 64;
  int max_objects = 4;  // at least one object per image
  // side ranges in pixels, drawn 40% / 40% / 20%
  int small_min = 7, small_max = 11;
  int medium_min = 13, medium_max = 28;
  int large_min = 32, large_max = 48;
  int gap = 2;  // minimum empty pixels between two objects' boxes
};

/// Deterministic in (seed, id); independent of every other sample.
ShapesSample generate_sample(std::uint64_t seed, int id, const ShapesConfig& config = {},
                             std::vector<ShapeInstance>* drawn = nullptr);

/// Pixel centres covered by `shape` (row-major size x size mask).
std::vector<bool> shape_mask(const ShapeInstance& shape, int size);

struct ManifestEntry {
  int id = 0;
  std::string image_file;  // relative to the dataset directory
  std::uint64_t checksum = 0;
};

/// Writes images/NNNNNN.rgb, annotations.txt and manifest.txt under `dir`.
/// Throws IoError when the directory cannot be written.
std::vector<ManifestEntry> generate_dataset(int n, std::uint64_t seed,
                                            const std::filesystem::path& dir,
                                            const ShapesConfig& config = {});

/// Manifest and annotations are read eagerly; pixels on demand.
class ShapesDataset {
 public:
  static ShapesDataset open(const std::filesystem::path& dir);

  std::size_t size() const { return entries_.size(); }
  int image_size() const { return image_size_; }
  const ManifestEntry& entry(std::size_t i) const { return entries_[i]; }
  const std::vector<Annotation>& annotations(std::size_t i) const { return annotations_[i]; }
  /// Reads and verifies one sample. IoError if the file is missing or
  /// short, CorruptionError (naming the sample) on checksum mismatch.
  ShapesSample load(std::size_t i) const;
  std::vector<ShapesSample> load_all() const;

 private:
  std::filesystem::path dir_;
  int image_size_ = 64;
  std::vector<ManifestEntry> entries_;
  std::vector<std::vector<Annotation>> annotations_;
};

struct AugmentConfig {
  double flip_probability = 0.5;
  double min_scale = 0.5;
  double max_scale = 1.0;
  int crop_tries = 50;
  double min_kept_area = 0.1;  // fraction of the object's area that must survive
};

ShapesSample flip_horizontal(const ShapesSample& s);
/// Square crop [x0, x0 + side) in pixel units, resampled bilinearly back to
/// full size. Objects are clipped and dropped below min_kept_area.
ShapesSample crop_resize(const ShapesSample& s, double x0, double y0, double side,
                         double min_kept_area = 0.1);
ShapesSample augment(const ShapesSample& s, std::mt19937_64& rng, const AugmentConfig& config = {});

/// B x 3 x S x S tensor with values pixel / 255 - 0.5.
Tensor to_batch(std::span<const ShapesSample* const> samples);
/// Dataset class ids mapped to confidence channels (id + 1).
std::vector<GroundTruth> to_ground_truth(const std::vector<Annotation>& objects);

}  // namespace rundet
