#include "rundet/heads.hpp"

#include <cmath>
#include <string>

#include "init.hpp"
#include "rundet/errors.hpp"
#include "rundet/ops.hpp"

namespace rundet {

std::size_t RawPredictions::anchor_count() const {
  std::size_t n = 0;
  for (const Tensor& t : loc) {
    n += static_cast<std::size_t>(t.shape()[2]) * t.shape()[3] * boxes_per_location;
  }
  return n;
}

std::size_t head_parameter_count(int depth, int boxes_per_location, int num_classes, HeadMode mode,
                                 int levels) {
  const std::size_t out = static_cast<std::size_t>(boxes_per_location) * (4 + num_classes + 1);
  const std::size_t one = out * depth * 9 + out;
  return mode == HeadMode::kUnified ? one : one * static_cast<std::size_t>(levels);
}

PredictionHead::PredictionHead(const HeadConfig& config, std::span<const int> level_depths,
                               ParamStore& params, std::uint64_t seed)
    : config_(config), levels_(level_depths.size()) {
  if (config_.num_classes < 1 || config_.boxes_per_location < 1) {
    throw ConfigError("head needs at least one class and one box per location");
  }
  if (level_depths.empty()) throw ConfigError("head needs at least one level");
  const int a = config_.boxes_per_location;
  const int c1 = config_.num_classes + 1;
  auto build = [&](const std::string& base, int depth) {
    Slot s;
    s.depth = depth;
    s.loc_w = params.add(base + "loc.w", Shape{a * 4, depth, 3, 3});
    s.loc_b = params.add(base + "loc.b", Shape{a * 4});
    s.conf_w = params.add(base + "conf.w", Shape{a * c1, depth, 3, 3});
    s.conf_b = params.add(base + "conf.b", Shape{a * c1});
    // linear outputs: unit-gain fan-in scaling
    const double sd = std::sqrt(1.0 / (depth * 9));
    detail::normal_init(s.loc_w, sd, seed, base + "loc.w");
    detail::normal_init(s.conf_w, sd, seed, base + "conf.w");
    return s;
  };
  if (config_.mode == HeadMode::kUnified) {
    for (int d : level_depths) {
      if (d != level_depths[0]) {
        throw ConfigError("unified head needs equal depths, got " + std::to_string(level_depths[0]) +
                          " and " + std::to_string(d));
      }
    }
    slots_.push_back(build("head.", level_depths[0]));
  } else {
    for (std::size_t l = 0; l < level_depths.size(); ++l) {
      slots_.push_back(build("head.l" + std::to_string(l + 1) + ".", level_depths[l]));
    }
  }
}

const PredictionHead::Slot& PredictionHead::slot_for(std::size_t level) const {
  if (level >= levels_) throw IndexError("head slot " + std::to_string(level) + " out of range");
  return config_.mode == HeadMode::kUnified ? slots_[0] : slots_[level];
}

std::pair<Tensor, Tensor> PredictionHead::predict_level(std::size_t slot, const Tensor& x) const {
  const Slot& s = slot_for(slot);
  if (x.shape().rank() != 4 || x.shape()[1] != s.depth) {
    throw ConfigError("head slot " + std::to_string(slot) + " expects depth " +
                      std::to_string(s.depth) + ", got " + x.shape().str());
  }
  return {conv2d(x, s.loc_w, s.loc_b, {1, 1}), conv2d(x, s.conf_w, s.conf_b, {1, 1})};
}

RawPredictions PredictionHead::predict(std::span<const Tensor> levels) const {
  if (levels.size() != levels_) {
    throw ConfigError("head built for " + std::to_string(levels_) + " levels, got " +
                      std::to_string(levels.size()));
  }
  RawPredictions out;
  out.num_classes = config_.num_classes + 1;
  out.boxes_per_location = config_.boxes_per_location;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    auto [loc, conf] = predict_level(l, levels[l]);
    out.loc.push_back(loc);
    out.conf.push_back(conf);
  }
  return out;
}

std::size_t PredictionHead::parameter_count() const {
  std::size_t n = 0;
  for (const Slot& s : slots_) {
    n += s.loc_w.numel() + s.loc_b.numel() + s.conf_w.numel() + s.conf_b.numel();
  }
  return n;
}

}  // namespace rundet
