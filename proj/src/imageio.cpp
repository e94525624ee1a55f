#include "rundet/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "rundet/errors.hpp"

namespace rundet {

namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Next whitespace-separated header token, skipping '#' comments.
int ppm_header_int(const std::vector<std::uint8_t>& b, std::size_t& pos, const std::string& name) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  long v = 0;
  const std::size_t start = pos;
  while (pos < b.size() && std::isdigit(b[pos]) && v < 1 << 20) v = v * 10 + (b[pos++] - '0');
  if (pos == start) throw IoError(name + ": malformed PPM header");
  return static_cast<int>(v);
}

}  // namespace

ShapesSample read_image(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const std::string name = path.string();
  ShapesSample s;
  if (path.extension() == ".ppm") {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw IoError(name + ": not a binary PPM");
    std::size_t pos = 2;
    const int w = ppm_header_int(bytes, pos, name);
    const int h = ppm_header_int(bytes, pos, name);
    const int maxval = ppm_header_int(bytes, pos, name);
    ++pos;  // single whitespace before the raster
    if (maxval != 255) throw IoError(name + ": only maxval 255 is supported");
    if (w != h || w <= 0) throw IoError(name + ": image must be square");
    const std::size_t n = static_cast<std::size_t>(w) * w;
    if (bytes.size() < pos + 3 * n) throw IoError(name + ": PPM raster is truncated");
    s.size = w;
    s.pixels.resize(3 * n);
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) s.pixels[c * n + i] = bytes[pos + 3 * i + c];
    return s;
  }
  const std::size_t n = bytes.size() / 3;
  const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (bytes.empty() || bytes.size() % 3 != 0 || static_cast<std::size_t>(side) * side != n) {
    throw IoError(name + ": raw image size " + std::to_string(bytes.size()) + " is not 3 x S x S");
  }
  s.size = side;
  s.pixels = bytes;
  return s;
}

void Raster::set(int x, int y, std::array<std::uint8_t, 3> c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  std::copy(c.begin(), c.end(), rgb.begin() + 3 * (static_cast<std::ptrdiff_t>(y) * width + x));
}

Raster to_raster(const ShapesSample& s, int scale) {
  if (scale < 1) throw ContractError("raster scale must be >= 1");
  Raster r;
  r.width = r.height = s.size * scale;
  r.rgb.resize(3 * static_cast<std::size_t>(r.width) * r.height);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      r.set(x, y, {s.at(0, y / scale, x / scale), s.at(1, y / scale, x / scale), s.at(2, y / scale, x / scale)});
  return r;
}

void draw_detections(Raster& r, std::span<const Detection> dets) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 3> kColours{{{255, 255, 0}, {0, 255, 255}, {255, 0, 255}}};
  for (const Detection& d : dets) {
    const auto colour = kColours[static_cast<std::size_t>(d.class_id) % kColours.size()];
    auto px = [](double u, int extent) { return std::clamp(static_cast<int>(std::lround(u * extent)), 0, extent - 1); };
    const int x1 = px(d.box.x1, r.width), x2 = px(d.box.x2, r.width);
    const int y1 = px(d.box.y1, r.height), y2 = px(d.box.y2, r.height);
    for (int x = x1; x <= x2; ++x) r.set(x, y1, colour), r.set(x, y2, colour);
    for (int y = y1; y <= y2; ++y) r.set(x1, y, colour), r.set(x2, y, colour);
  }
}

void write_ppm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P6\n" << r.width << ' ' << r.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(r.rgb.data()), static_cast<std::streamsize>(r.rgb.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace rundet
