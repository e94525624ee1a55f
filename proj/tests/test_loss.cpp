#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "rundet/errors.hpp"
#include "rundet/loss.hpp"
#include "rundet/model.hpp"
#include "rundet/ops.hpp"
#include "support/testing.hpp"
#include "support/tiny.hpp"

using namespace rundet;

namespace {

// Two 1x1 levels with four anchors each, all centred on the image.
DefaultBoxSet toy_defaults() {
  std::vector<BoxCenter> boxes{{0.5, 0.5, 0.4, 0.4}, {0.5, 0.5, 0.8, 0.4}, {0.5, 0.5, 0.4, 0.8},
                               {0.5, 0.5, 0.2, 0.2}, {0.5, 0.5, 0.6, 0.6}, {0.5, 0.5, 1.0, 1.0},
                               {0.5, 0.5, 0.3, 0.6}, {0.5, 0.5, 0.6, 0.3}};
  return DefaultBoxSet(std::move(boxes), {0.4, 0.6}, {{1, 1}, {1, 1}});
}

// Raw maps for the toy set; `loc(anchor, coord)` and `logit(anchor, class)`.
template <class Loc, class Logit>
RawPredictions toy_predictions(int classes, Loc loc, Logit logit) {
  RawPredictions p;
  p.num_classes = classes;
  p.boxes_per_location = 4;
  for (int l = 0; l < 2; ++l) {
    std::vector<double> lv, cv;
    for (int a = 0; a < 4; ++a)
      for (int c = 0; c < 4; ++c) lv.push_back(loc(l * 4 + a, c));
    for (int a = 0; a < 4; ++a)
      for (int k = 0; k < classes; ++k) cv.push_back(logit(l * 4 + a, k));
    p.loc.push_back(Tensor::from({1, 16, 1, 1}, lv, true));
    p.conf.push_back(Tensor::from({1, 4 * classes, 1, 1}, cv, true));
  }
  return p;
}

// Independent background CE read straight from the maps.
double oracle_bg_ce(const RawPredictions& p, std::size_t image, std::size_t anchor) {
  const int na = p.boxes_per_location, k = p.num_classes;
  for (std::size_t l = 0; l < p.conf.size(); ++l) {
    const int h = p.conf[l].shape()[2], w = p.conf[l].shape()[3];
    const std::size_t n = static_cast<std::size_t>(h * w * na);
    if (anchor >= n) {
      anchor -= n;
      continue;
    }
    const int cell = static_cast<int>(anchor) / na, a = static_cast<int>(anchor) % na;
    const int y = cell / w, x = cell % w;
    std::vector<double> z;
    for (int c = 0; c < k; ++c) {
      const std::size_t idx = ((image * (na * k) + a * k + c) * h + y) * w + x;
      z.push_back(p.conf[l].data()[idx]);
    }
    double s = 0;
    for (double v : z) s += std::exp(v);
    return std::log(s) - z[0];
  }
  return NAN;
}

}  // namespace

TEST_CASE("multibox loss: hand-evaluated eight-anchor fixture") {
  const auto defaults = toy_defaults();
  const auto preds = toy_predictions(
      3, [](int a, int c) { return 0.1 * (a + 1) * (c - 1.5); },
      [](int a, int k) { return ((a * 3 + k * 7) % 5) * 0.5 - 1.0; });
  const std::vector<std::vector<GroundTruth>> objects{{{{0.36, 0.36, 0.64, 0.64}, 2}}};
  const auto targets = build_targets(defaults, objects);
  const auto r = multibox_loss(preds, defaults, targets);
  CHECK(r.positives == 1);
  CHECK(r.negatives == 3);
  // two anchors tie at the top, three more tie next; lower index wins
  CHECK(r.mined[0] == std::vector<std::size_t>{0, 2, 5});
  CHECK(r.loc_sum == doctest::Approx(1.76472236621213).epsilon(1e-13));
  CHECK(r.conf_sum == doctest::Approx(7.383711318333434).epsilon(1e-13));
  CHECK(r.total.item() == doctest::Approx(9.148433684545564).epsilon(1e-13));
  CHECK(r.total.item() == doctest::Approx((r.loc_sum + r.conf_sum) / 1.0).epsilon(1e-15));
}

TEST_CASE("multibox loss: image without objects contributes nothing") {
  const auto defaults = toy_defaults();
  const auto preds = toy_predictions(3, [](int, int) { return 0.3; }, [](int a, int k) { return a - k; });
  const std::vector<std::vector<GroundTruth>> objects{{}};
  const auto r = multibox_loss(preds, defaults, build_targets(defaults, objects));
  CHECK(r.positives == 0);
  CHECK(r.negatives == 0);
  CHECK(r.total.item() == 0.0);
  backward(r.total);
  for (const auto& t : preds.conf)
    for (double g : t.grad()) CHECK(g == 0.0);
}

TEST_CASE("multibox loss: perfect predictions drive the loss to zero") {
  const auto defaults = toy_defaults();
  // five of the eight anchors overlap this box by at least one half
  const std::vector<std::vector<GroundTruth>> objects{{{{0.29, 0.29, 0.71, 0.71}, 1}}};
  const auto targets = build_targets(defaults, objects);
  const auto& m = targets[0].match.default_to_gt;
  const auto n_pos = static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](int g) { return g >= 0; }));
  REQUIRE(n_pos == 5);
  const BoxCenter gt = to_center(objects[0][0].box);
  auto loc = [&](int a, int c) { return encode(gt, defaults[static_cast<std::size_t>(a)])[c]; };
  double previous = INFINITY;
  for (double margin : {2.0, 5.0, 10.0, 20.0}) {
    // binary head: correct class leads by `margin`
    auto logit = [&](int a, int k) { return (m[a] >= 0) == (k == 1) ? margin : 0.0; };
    const auto r = multibox_loss(toy_predictions(2, loc, logit), defaults, targets);
    CHECK(r.loc_sum == doctest::Approx(0.0));
    CHECK(r.total.item() < previous);
    previous = r.total.item();
    if (margin == 10.0) CHECK(r.conf() < 1e-4);
  }
  CHECK(previous < 1e-8);
}

TEST_CASE("multibox loss: mining equals a sort oracle and respects the ratio") {
  std::mt19937_64 rng(91);
  Detector model(testing::tiny_config(ResblockMode::kThreeWay), 5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto objects = testing::random_objects(rng, 3, 2);
    NoGradGuard guard;
    const auto fwd = model.forward(testing::random_tensor({3, 3, 16, 16}, rng));
    const auto targets = build_targets(model.defaults(), objects);
    const auto r = multibox_loss(fwd.preds, model.defaults(), targets);
    CHECK(r.negatives <= 3 * r.positives);
    for (std::size_t b = 0; b < 3; ++b) {
      const auto& m = targets[b].match.default_to_gt;
      std::vector<std::pair<double, std::size_t>> pool;
      std::size_t n = 0;
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i] >= 0) ++n;
        else pool.emplace_back(-oracle_bg_ce(fwd.preds, b, i), i);
      }
      std::sort(pool.begin(), pool.end());
      std::vector<std::size_t> want;
      for (std::size_t j = 0; j < std::min(3 * n, pool.size()); ++j) want.push_back(pool[j].second);
      std::sort(want.begin(), want.end());
      CHECK(r.mined[b] == want);
    }
  }
}

TEST_CASE("multibox loss: location gradient only reaches positive anchors") {
  std::mt19937_64 rng(92);
  Detector model(testing::tiny_config(ResblockMode::kTwoWay), 6);
  const auto objects = testing::random_objects(rng, 2, 2);
  const auto fwd = model.forward(testing::random_tensor({2, 3, 16, 16}, rng));
  const auto targets = build_targets(model.defaults(), objects);
  backward(multibox_loss(fwd.preds, model.defaults(), targets).total);
  std::size_t nonzero = 0;
  for (std::size_t l = 0; l < fwd.preds.loc.size(); ++l) {
    const Tensor& loc = fwd.preds.loc[l];
    const int h = loc.shape()[2], w = loc.shape()[3];
    const auto g = loc.grad();
    for (int b = 0; b < 2; ++b)
      for (int a = 0; a < 6; ++a)
        for (int c = 0; c < 4; ++c)
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              const std::size_t anchor = model.defaults().level_offset(l) + (y * w + x) * 6 + a;
              const double v = g[(((b * 24) + a * 4 + c) * h + y) * w + x];
              if (targets[b].match.default_to_gt[anchor] < 0) CHECK(v == 0.0);
              nonzero += v != 0.0;
            }
  }
  CHECK(nonzero > 0);
}

TEST_CASE("multibox loss: consistent anchor permutation leaves the loss unchanged") {
  std::mt19937_64 rng(93);
  Detector model(testing::tiny_config(ResblockMode::kThreeWay), 7);
  const auto objects = testing::random_objects(rng, 2, 2);
  NoGradGuard guard;
  const auto fwd = model.forward(testing::random_tensor({2, 3, 16, 16}, rng));
  const auto& defaults = model.defaults();
  const auto targets = build_targets(defaults, objects);
  const auto base = multibox_loss(fwd.preds, defaults, targets);

  // shuffle the cells of level 0 in maps, default boxes and matches alike
  const int side = defaults.grids()[0].height;
  const int cells = side * side;
  std::vector<int> perm(static_cast<std::size_t>(cells));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<BoxCenter> boxes(defaults.boxes().begin(), defaults.boxes().end());
  auto targets_p = targets;
  for (int c = 0; c < cells; ++c)
    for (int a = 0; a < 6; ++a) {
      boxes[c * 6 + a] = defaults[static_cast<std::size_t>(perm[c] * 6 + a)];
      for (std::size_t b = 0; b < 2; ++b)
        targets_p[b].match.default_to_gt[c * 6 + a] = targets[b].match.default_to_gt[perm[c] * 6 + a];
    }
  const DefaultBoxSet defaults_p(boxes, defaults.scales(), defaults.grids());
  RawPredictions preds_p = fwd.preds;
  auto permute_map = [&](const Tensor& t) {
    const int ch = t.shape()[1];
    std::vector<double> v(t.numel());
    for (int b = 0; b < 2; ++b)
      for (int k = 0; k < ch; ++k)
        for (int c = 0; c < cells; ++c)
          v[(b * ch + k) * cells + c] = t.data()[(b * ch + k) * cells + perm[c]];
    return Tensor::from(t.shape(), v);
  };
  preds_p.loc[0] = permute_map(fwd.preds.loc[0]);
  preds_p.conf[0] = permute_map(fwd.preds.conf[0]);
  const auto moved = multibox_loss(preds_p, defaults_p, targets_p);
  CHECK(moved.positives == base.positives);
  CHECK(moved.negatives == base.negatives);
  CHECK(moved.total.item() == doctest::Approx(base.total.item()).epsilon(1e-12));
}

TEST_CASE("multibox loss: layout contract") {
  const auto defaults = toy_defaults();
  const auto preds = toy_predictions(3, [](int, int) { return 0.0; }, [](int, int) { return 0.0; });
  const std::vector<std::vector<GroundTruth>> two{{}, {}};
  CHECK_THROWS_AS(multibox_loss(preds, defaults, build_targets(defaults, two)), ContractError);
  const auto wide = generate_default_boxes(std::vector<GridSize>{{1, 1}, {1, 1}});
  const std::vector<std::vector<GroundTruth>> one{{}};
  CHECK_THROWS_AS(multibox_loss(preds, wide, build_targets(wide, one)), ContractError);
  const std::vector<std::vector<GroundTruth>> bad_label{{{{0.3, 0.3, 0.7, 0.7}, 3}}};
  CHECK_THROWS_AS(multibox_loss(preds, defaults, build_targets(defaults, bad_label)), IndexError);
}
