#include "rundet/backbone.hpp"

#include <algorithm>
#include <string>

#include "init.hpp"
#include "rundet/errors.hpp"
#include "rundet/ops.hpp"

namespace rundet {

void BackboneConfig::validate() const {
  if (widths.empty()) throw ConfigError("backbone needs at least one stage");
  if (sources.size() < 2) throw ConfigError("backbone needs at least two source stages");
  if (input_size < 1) throw ConfigError("backbone input size must be positive");
  for (int w : widths) {
    if (w < 1) throw ConfigError("backbone stage widths must be positive");
  }
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const int s = sources[i];
    if (s < 1 || s > static_cast<int>(widths.size())) {
      throw ConfigError("backbone source stage " + std::to_string(s) + " out of range");
    }
    if (i > 0 && s <= sources[i - 1]) {
      throw ConfigError("backbone sources must be strictly increasing stages");
    }
  }
  const int last = sources.back();
  if ((input_size >> (last - 1)) < 1 || input_size % (1 << (last - 1)) != 0) {
    throw ConfigError("input size " + std::to_string(input_size) +
                      " cannot be halved down to stage " + std::to_string(last));
  }
}

std::vector<GridSize> BackboneConfig::source_grids() const {
  std::vector<GridSize> grids;
  for (int s : sources) {
    const int extent = input_size >> (s - 1);
    grids.push_back({extent, extent});
  }
  return grids;
}

std::vector<int> BackboneConfig::source_channels() const {
  std::vector<int> c;
  for (int s : sources) c.push_back(widths[static_cast<std::size_t>(s - 1)]);
  return c;
}

Backbone::Backbone(const BackboneConfig& config, ParamStore& params, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  int in_c = 3;
  for (std::size_t s = 0; s < config_.widths.size(); ++s) {
    const int out_c = config_.widths[s];
    const std::string base = "backbone.stage" + std::to_string(s + 1);
    Tensor w = params.add(base + ".w", Shape{out_c, in_c, 3, 3});
    detail::kaiming_init(w, in_c * 9, seed, base + ".w");
    weights_.push_back(w);
    biases_.push_back(params.add(base + ".b", Shape{out_c}));
    in_c = out_c;
  }
  if (config_.l2norm_first_source) {
    gamma_ = params.add("backbone.l2norm.gamma", Shape{config_.source_channels().front()});
    std::fill(gamma_.mutable_data().begin(), gamma_.mutable_data().end(), config_.l2norm_gamma);
  }
}

Tensor Backbone::stage(std::size_t index, const Tensor& x) const {
  Tensor in = index == 0 ? x : maxpool2d(x, 2, 2);
  return relu(conv2d(in, weights_[index], biases_[index], {1, 1}));
}

FeaturePyramid Backbone::forward_features(const Tensor& image) const {
  const Shape& s = image.shape();
  if (s.rank() != 4 || s[1] != 3 || s[2] != config_.input_size || s[3] != config_.input_size) {
    throw DimensionError("backbone expects B x 3 x " + std::to_string(config_.input_size) + " x " +
                         std::to_string(config_.input_size) + " input, got " + s.str());
  }
  FeaturePyramid pyramid;
  Tensor x = image;
  std::size_t next_source = 0;
  const auto last = static_cast<std::size_t>(config_.sources.back());
  for (std::size_t st = 0; st < last; ++st) {
    x = stage(st, x);
    if (static_cast<int>(st + 1) == config_.sources[next_source]) {
      pyramid.trunk.push_back(x);
      Tensor level = x;
      if (next_source == 0 && config_.l2norm_first_source) level = l2norm_channels(x, gamma_);
      pyramid.levels.push_back(level);
      ++next_source;
    }
  }
  return pyramid;
}

Tensor Backbone::extend(const Tensor& trunk_source, std::size_t level) const {
  if (level + 1 >= config_.sources.size()) {
    throw ContractError("no source level after " + std::to_string(level));
  }
  Tensor x = trunk_source;
  const auto from = static_cast<std::size_t>(config_.sources[level]);
  const auto to = static_cast<std::size_t>(config_.sources[level + 1]);
  for (std::size_t st = from; st < to; ++st) x = stage(st, x);
  return x;
}

}  // namespace rundet
