#pragma once

#include <filesystem>
#include <span>

#include "rundet/boxes.hpp"
#include "rundet/shapes.hpp"

namespace rundet {

/// Reads a square image as a sample without objects. `.ppm` files are binary
/// PPM (P6, maxval 255); anything else is raw planar RGB as stored in a
/// dataset's images/ directory, with the side inferred from the file size.
/// Throws IoError on unreadable or malformed input.
ShapesSample read_image(const std::filesystem::path& path);

/// Interleaved RGB raster.
struct Raster {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  void set(int x, int y, std::array<std::uint8_t, 3> c);
};

/// Nearest-neighbour upscale by an integer factor.
Raster to_raster(const ShapesSample& s, int scale = 1);
/// One-pixel rectangle outlines for boxes in unit coordinates, coloured by class.
void draw_detections(Raster& r, std::span<const Detection> dets);
void write_ppm(const std::filesystem::path& path, const Raster& r);

}  // namespace rundet
