#include "rundet/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "rundet/errors.hpp"

namespace rundet {

namespace fs = std::filesystem;

const char* shape_name(int class_id) {
  switch (class_id) {
    case 0: return "circle";
    case 1: return "square";
    case 2: return "triangle";
  }
  return "?";
}

std::uint64_t ShapesSample::checksum() const {
  return std::accumulate(pixels.begin(), pixels.end(), std::uint64_t{0});
}

std::vector<bool> shape_mask(const ShapeInstance& s, int size) {
  std::vector<bool> mask(static_cast<std::size_t>(size) * size, false);
  const double cx = s.x + 0.5 * s.side, cy = s.y + 0.5 * s.side, r = 0.5 * s.side;
  for (int y = std::max(0, s.y); y < std::min(size, s.y + s.side); ++y) {
    for (int x = std::max(0, s.x); x < std::min(size, s.x + s.side); ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      switch (static_cast<ShapeClass>(s.class_id)) {
        case ShapeClass::kSquare: inside = true; break;
        case ShapeClass::kCircle: inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r; break;
        case ShapeClass::kTriangle: {
          // apex at the top centre, base along the bottom edge
          const double half = 0.5 * (py - s.y) + 0.25;
          inside = std::abs(px - cx) <= half;
          break;
        }
      }
      mask[static_cast<std::size_t>(y) * size + x] = inside;
    }
  }
  return mask;
}

namespace {

std::mt19937_64 sample_rng(std::uint64_t seed, int id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id), 0x5eedu};
  return std::mt19937_64(seq);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace

ShapesSample generate_sample(std::uint64_t seed, int id, const ShapesConfig& cfg,
                             std::vector<ShapeInstance>* drawn) {
  auto rng = sample_rng(seed, id);
  const int n = cfg.image_size;
  ShapesSample s;
  s.id = id;
  s.size = n;
  s.pixels.resize(3 * static_cast<std::size_t>(n) * n);

  // Background: dark base colour, a low-frequency ripple and pixel noise,
  // kept below 120 in every channel so shapes stay separable.
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double base[3];
  for (double& b : base) b = 20 + 70 * unit(rng);
  const double fx = 0.05 + 0.25 * unit(rng), fy = 0.05 + 0.25 * unit(rng), phase = 6.283 * unit(rng);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double ripple = 10.0 * std::sin(fx * x + fy * y + phase);
      for (int c = 0; c < 3; ++c) {
        const double v = base[c] + ripple + uniform_int(rng, -8, 8);
        s.pixels[(static_cast<std::size_t>(c) * n + y) * n + x] =
            static_cast<std::uint8_t>(std::clamp(v, 0.0, 119.0));
      }
    }
  }

  const int count = uniform_int(rng, 1, cfg.max_objects);
  std::vector<ShapeInstance> shapes;
  for (int k = 0; k < count; ++k) {
    ShapeInstance inst;
    inst.class_id = uniform_int(rng, 0, kShapeClasses - 1);
    const double bucket = unit(rng);
    if (bucket < 0.4) inst.side = uniform_int(rng, cfg.small_min, cfg.small_max);
    else if (bucket < 0.8) inst.side = uniform_int(rng, cfg.medium_min, cfg.medium_max);
    else inst.side = uniform_int(rng, cfg.large_min, cfg.large_max);
    inst.side = std::min(inst.side, n);
    for (auto& ch : inst.color) ch = static_cast<std::uint8_t>(uniform_int(rng, 0, 255));
    inst.color[static_cast<std::size_t>(uniform_int(rng, 0, 2))] =
        static_cast<std::uint8_t>(uniform_int(rng, 160, 255));
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      inst.x = uniform_int(rng, 0, n - inst.side);
      inst.y = uniform_int(rng, 0, n - inst.side);
      placed = std::none_of(shapes.begin(), shapes.end(), [&](const ShapeInstance& o) {
        return inst.x < o.x + o.side + cfg.gap && o.x < inst.x + inst.side + cfg.gap &&
               inst.y < o.y + o.side + cfg.gap && o.y < inst.y + inst.side + cfg.gap;
      });
    }
    if (placed) shapes.push_back(inst);
  }

  for (const auto& inst : shapes) {
    const auto mask = shape_mask(inst, n);
    for (std::size_t p = 0; p < mask.size(); ++p) {
      if (!mask[p]) continue;
      for (std::size_t c = 0; c < 3; ++c) s.pixels[c * n * n + p] = inst.color[c];
    }
    const double inv = 1.0 / n;
    s.objects.push_back({inst.class_id,
                         {inst.x * inv, inst.y * inv, (inst.x + inst.side) * inv, (inst.y + inst.side) * inv}});
  }
  if (drawn) *drawn = shapes;
  return s;
}

namespace {

std::string image_name(int id) {
  std::ostringstream os;
  os << "images/" << std::setw(6) << std::setfill('0') << id << ".rgb";
  return os.str();
}

std::ofstream open_out(const fs::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream f(p, mode);
  if (!f) throw IoError("cannot write " + p.string());
  return f;
}

}  // namespace

std::vector<ManifestEntry> generate_dataset(int n, std::uint64_t seed, const fs::path& dir,
                                            const ShapesConfig& config) {
  if (n < 1) throw ConfigError("dataset size must be at least 1");
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());

  std::vector<ManifestEntry> entries;
  auto ann = open_out(dir / "annotations.txt");
  ann << std::fixed << std::setprecision(6);
  for (int id = 0; id < n; ++id) {
    const ShapesSample s = generate_sample(seed, id, config);
    ManifestEntry e{id, image_name(id), s.checksum()};
    auto img = open_out(dir / e.image_file, std::ios::out | std::ios::binary);
    img.write(reinterpret_cast<const char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size()));
    if (!img) throw IoError("short write to " + (dir / e.image_file).string());
    for (const auto& o : s.objects) {
      ann << id << ' ' << o.class_id << ' ' << o.box.x1 << ' ' << o.box.y1 << ' ' << o.box.x2 << ' '
          << o.box.y2 << '\n';
    }
    entries.push_back(e);
  }
  auto man = open_out(dir / "manifest.txt");
  man << "# shapes image_size=" << config.image_size << " seed=" << seed << '\n';
  for (const auto& e : entries) man << e.id << ' ' << e.image_file << ' ' << e.checksum << '\n';
  if (!ann || !man) throw IoError("failed writing dataset index files in " + dir.string());
  return entries;
}

ShapesDataset ShapesDataset::open(const fs::path& dir) {
  ShapesDataset d;
  d.dir_ = dir;
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw IoError("cannot read " + (dir / "manifest.txt").string());
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("image_size=");
      if (pos != std::string::npos) d.image_size_ = std::stoi(line.substr(pos + 11));
      continue;
    }
    std::istringstream is(line);
    ManifestEntry e;
    if (!(is >> e.id >> e.image_file >> e.checksum)) throw IoError("bad manifest line: " + line);
    if (e.id != static_cast<int>(d.entries_.size())) {
      throw IoError("manifest ids must be 0..n-1 in order, got " + std::to_string(e.id));
    }
    d.entries_.push_back(e);
  }
  d.annotations_.resize(d.entries_.size());
  std::ifstream ann(dir / "annotations.txt");
  if (!ann) throw IoError("cannot read " + (dir / "annotations.txt").string());
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    int id = 0;
    Annotation a;
    if (!(is >> id >> a.class_id >> a.box.x1 >> a.box.y1 >> a.box.x2 >> a.box.y2) || id < 0 ||
        id >= static_cast<int>(d.entries_.size()) || a.class_id < 0 || a.class_id >= kShapeClasses) {
      throw IoError("bad annotation line: " + line);
    }
    d.annotations_[static_cast<std::size_t>(id)].push_back(a);
  }
  return d;
}

ShapesSample ShapesDataset::load(std::size_t i) const {
  const ManifestEntry& e = entries_.at(i);
  ShapesSample s;
  s.id = e.id;
  s.size = image_size_;
  s.pixels.resize(3 * static_cast<std::size_t>(image_size_) * image_size_);
  std::ifstream f(dir_ / e.image_file, std::ios::binary);
  if (!f) throw IoError("sample " + std::to_string(e.id) + ": cannot read " + (dir_ / e.image_file).string());
  f.read(reinterpret_cast<char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(s.pixels.size())) {
    throw IoError("sample " + std::to_string(e.id) + ": image file is truncated");
  }
  if (s.checksum() != e.checksum) {
    throw CorruptionError("sample " + std::to_string(e.id) + ": checksum " + std::to_string(s.checksum()) +
                          " does not match manifest " + std::to_string(e.checksum));
  }
  s.objects = annotations_[i];
  return s;
}

std::vector<ShapesSample> ShapesDataset::load_all() const {
  std::vector<ShapesSample> out;
  out.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) out.push_back(load(i));
  return out;
}

// ---- augmentation -------------------------------------------------------------

ShapesSample flip_horizontal(const ShapesSample& s) {
  ShapesSample out = s;
  const int n = s.size;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        out.pixels[(static_cast<std::size_t>(c) * n + y) * n + x] = s.at(c, y, n - 1 - x);
      }
  for (auto& o : out.objects) {
    const double x1 = o.box.x1;
    o.box.x1 = 1.0 - o.box.x2;
    o.box.x2 = 1.0 - x1;
  }
  return out;
}

ShapesSample crop_resize(const ShapesSample& s, double x0, double y0, double side, double min_kept_area) {
  ShapesSample out = s;
  const int n = s.size;
  const double step = side / n;
  for (int y = 0; y < n; ++y) {
    const double sy = std::clamp(y0 + (y + 0.5) * step - 0.5, 0.0, n - 1.0);
    const int iy = std::min(static_cast<int>(sy), n - 2 < 0 ? 0 : n - 2);
    const double fy = sy - iy;
    for (int x = 0; x < n; ++x) {
      const double sx = std::clamp(x0 + (x + 0.5) * step - 0.5, 0.0, n - 1.0);
      const int ix = std::min(static_cast<int>(sx), n - 2 < 0 ? 0 : n - 2);
      const double fx = sx - ix;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * s.at(c, iy, ix) + fx * s.at(c, iy, ix + 1)) +
                         fy * ((1 - fx) * s.at(c, iy + 1, ix) + fx * s.at(c, iy + 1, ix + 1));
        out.pixels[(static_cast<std::size_t>(c) * n + y) * n + x] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  out.objects.clear();
  const double u0 = x0 / n, v0 = y0 / n, scale = n / side;
  for (const auto& o : s.objects) {
    const BoxCorners moved{(o.box.x1 - u0) * scale, (o.box.y1 - v0) * scale, (o.box.x2 - u0) * scale,
                           (o.box.y2 - v0) * scale};
    const BoxCorners clipped = clip_unit(moved);
    if (!clipped.valid() || clipped.area() < min_kept_area * moved.area()) continue;
    out.objects.push_back({o.class_id, clipped});
  }
  return out;
}

ShapesSample augment(const ShapesSample& s, std::mt19937_64& rng, const AugmentConfig& cfg) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ShapesSample cur = unit(rng) < cfg.flip_probability ? flip_horizontal(s) : s;
  const int n = cur.size;
  for (int attempt = 0; attempt < cfg.crop_tries; ++attempt) {
    const double side = n * (cfg.min_scale + (cfg.max_scale - cfg.min_scale) * unit(rng));
    const double x0 = (n - side) * unit(rng), y0 = (n - side) * unit(rng);
    const double u0 = x0 / n, v0 = y0 / n, u1 = (x0 + side) / n, v1 = (y0 + side) / n;
    const bool keeps_centre = std::any_of(cur.objects.begin(), cur.objects.end(), [&](const Annotation& o) {
      const double cx = 0.5 * (o.box.x1 + o.box.x2), cy = 0.5 * (o.box.y1 + o.box.y2);
      return cx > u0 && cx < u1 && cy > v0 && cy < v1;
    });
    if (!keeps_centre) continue;
    ShapesSample cropped = crop_resize(cur, x0, y0, side, cfg.min_kept_area);
    if (!cropped.objects.empty()) return cropped;
  }
  return cur;
}

Tensor to_batch(std::span<const ShapesSample* const> samples) {
  if (samples.empty()) throw ContractError("empty batch");
  const int n = samples[0]->size;
  Tensor t = Tensor::zeros({static_cast<int>(samples.size()), 3, n, n});
  auto d = t.mutable_data();
  const std::size_t per = 3 * static_cast<std::size_t>(n) * n;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    if (samples[b]->size != n) throw DimensionError("batch mixes image sizes");
    for (std::size_t i = 0; i < per; ++i) d[b * per + i] = samples[b]->pixels[i] / 255.0 - 0.5;
  }
  return t;
}

std::vector<GroundTruth> to_ground_truth(const std::vector<Annotation>& objects) {
  std::vector<GroundTruth> out;
  out.reserve(objects.size());
  for (const auto& o : objects) out.push_back({o.box, o.class_id + 1});
  return out;
}

}  // namespace rundet
