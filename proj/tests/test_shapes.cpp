#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "rundet/errors.hpp"
#include "rundet/shapes.hpp"

using namespace rundet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("rundet_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("shapes: generation is a pure function of seed and id") {
  TempDir a("det_a"), b("det_b");
  generate_dataset(2, 0, a.path);
  generate_dataset(2, 0, b.path);
  for (const char* f : {"manifest.txt", "annotations.txt", "images/000000.rgb", "images/000001.rgb"}) {
    CHECK(read_bytes(a.path / f) == read_bytes(b.path / f));
  }
  // a sample does not depend on how many others were generated
  const auto s = generate_sample(0, 1);
  CHECK(s.pixels == read_bytes(a.path / "images/000001.rgb"));
  CHECK(generate_sample(1, 1).pixels != s.pixels);
}

TEST_CASE("shapes: boxes are tight around the drawn pixels") {
  for (int id = 0; id < 200; ++id) {
    std::vector<ShapeInstance> drawn;
    const auto s = generate_sample(3, id, {}, &drawn);
    REQUIRE(drawn.size() == s.objects.size());
    REQUIRE(!drawn.empty());
    for (std::size_t k = 0; k < drawn.size(); ++k) {
      const auto& inst = drawn[k];
      // scan for the object's exact colour inside its box
      int x1 = 1 << 20, y1 = 1 << 20, x2 = -1, y2 = -1;
      for (int y = inst.y; y < inst.y + inst.side; ++y)
        for (int x = inst.x; x < inst.x + inst.side; ++x) {
          if (s.at(0, y, x) == inst.color[0] && s.at(1, y, x) == inst.color[1] &&
              s.at(2, y, x) == inst.color[2]) {
            x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x + 1), y2 = std::max(y2, y + 1);
          }
        }
      const auto& box = s.objects[k].box;
      const double n = s.size;
      CHECK(std::abs(x1 - box.x1 * n) <= 1.0);
      CHECK(std::abs(y1 - box.y1 * n) <= 1.0);
      CHECK(std::abs(x2 - box.x2 * n) <= 1.0);
      CHECK(std::abs(y2 - box.y2 * n) <= 1.0);
      CHECK(s.objects[k].class_id == inst.class_id);
      // shape colours always stand out from the background
      CHECK(*std::max_element(inst.color.begin(), inst.color.end()) >= 150);
    }
    // boxes never overlap
    for (std::size_t i = 0; i < s.objects.size(); ++i)
      for (std::size_t j = i + 1; j < s.objects.size(); ++j) CHECK(iou(s.objects[i].box, s.objects[j].box) == 0.0);
  }
}

TEST_CASE("shapes: classes are balanced within five percent") {
  std::array<int, kShapeClasses> hist{};
  int total = 0;
  for (int id = 0; id < 3000; ++id) {
    for (const auto& o : generate_sample(11, id).objects) {
      ++hist[static_cast<std::size_t>(o.class_id)];
      ++total;
    }
  }
  for (int c : hist) CHECK(std::abs(static_cast<double>(c) / total - 1.0 / 3.0) < 0.05);
}

TEST_CASE("shapes: dataset round trip and integrity errors") {
  TempDir dir("rt");
  const auto entries = generate_dataset(5, 7, dir.path);
  const auto ds = ShapesDataset::open(dir.path);
  REQUIRE(ds.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto s = ds.load(i);
    const auto ref = generate_sample(7, static_cast<int>(i));
    CHECK(s.pixels == ref.pixels);
    CHECK(s.checksum() == entries[i].checksum);
    REQUIRE(s.objects.size() == ref.objects.size());
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      CHECK(s.objects[k].class_id == ref.objects[k].class_id);
      CHECK(s.objects[k].box.x1 == doctest::Approx(ref.objects[k].box.x1).epsilon(1e-6));
      CHECK(s.objects[k].box.y2 == doctest::Approx(ref.objects[k].box.y2).epsilon(1e-6));
    }
  }

  // flip one byte: the checksum catches it and names the sample
  {
    std::fstream f(dir.path / "images/000003.rgb", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    char c = static_cast<char>(ds.load(3).pixels[100] ^ 1);
    f.write(&c, 1);
  }
  try {
    (void)ds.load(3);
    FAIL("expected CorruptionError");
  } catch (const CorruptionError& e) {
    CHECK(std::string(e.what()).find("sample 3") != std::string::npos);
  }

  fs::remove(dir.path / "images/000002.rgb");
  CHECK_THROWS_AS((void)ds.load(2), IoError);
  fs::resize_file(dir.path / "images/000001.rgb", 10);
  CHECK_THROWS_AS((void)ds.load(1), IoError);
  CHECK_THROWS_AS(ShapesDataset::open(dir.path / "missing"), IoError);
}

TEST_CASE("shapes: flips and crops transform boxes consistently") {
  const auto s = generate_sample(5, 2);
  const auto twice = flip_horizontal(flip_horizontal(s));
  CHECK(twice.pixels == s.pixels);
  CHECK(twice.objects.size() == s.objects.size());
  for (std::size_t k = 0; k < s.objects.size(); ++k) {
    CHECK(twice.objects[k].box.x1 == doctest::Approx(s.objects[k].box.x1));
    CHECK(twice.objects[k].box.x2 == doctest::Approx(s.objects[k].box.x2));
  }

  ShapesSample one = s;
  one.objects = {{0, {0.1, 0.2, 0.3, 0.4}}};
  const auto f = flip_horizontal(one);
  CHECK(f.objects[0].box.x1 == doctest::Approx(0.7));
  CHECK(f.objects[0].box.x2 == doctest::Approx(0.9));
  CHECK(f.objects[0].box.y1 == doctest::Approx(0.2));

  const auto full = crop_resize(s, 0, 0, s.size);
  CHECK(full.pixels == s.pixels);
  CHECK(full.objects == s.objects);

  // top-left quadrant scaled up: coordinates double
  const auto quarter = crop_resize(one, 0, 0, s.size / 2.0);
  REQUIRE(quarter.objects.size() == 1);
  CHECK(quarter.objects[0].box.x1 == doctest::Approx(0.2));
  CHECK(quarter.objects[0].box.y2 == doctest::Approx(0.8));
  // an object left almost entirely outside the crop is dropped
  one.objects = {{1, {0.45, 0.1, 0.95, 0.3}}};
  CHECK(crop_resize(one, 0, 0, s.size / 2.0).objects.empty());
}

TEST_CASE("shapes: augmented samples keep valid boxes") {
  std::mt19937_64 rng(4);
  for (int id = 0; id < 100; ++id) {
    const auto s = generate_sample(8, id);
    const auto a = augment(s, rng);
    CHECK(a.pixels.size() == s.pixels.size());
    CHECK(!a.objects.empty());
    for (const auto& o : a.objects) {
      CHECK(o.box.valid());
      CHECK(o.box.x1 >= 0.0);
      CHECK(o.box.y1 >= 0.0);
      CHECK(o.box.x2 <= 1.0);
      CHECK(o.box.y2 <= 1.0);
    }
  }
}

TEST_CASE("shapes: batching normalises pixels and shifts labels") {
  const auto a = generate_sample(1, 0), b = generate_sample(1, 1);
  const std::array<const ShapesSample*, 2> ptrs{&a, &b};
  const Tensor t = to_batch(ptrs);
  CHECK(t.shape() == Shape{2, 3, 64, 64});
  CHECK(t.data()[0] == doctest::Approx(a.pixels[0] / 255.0 - 0.5));
  CHECK(t.data()[3 * 64 * 64 + 5] == doctest::Approx(b.pixels[5] / 255.0 - 0.5));
  const auto gt = to_ground_truth(a.objects);
  for (std::size_t k = 0; k < gt.size(); ++k) CHECK(gt[k].label == a.objects[k].class_id + 1);
}
