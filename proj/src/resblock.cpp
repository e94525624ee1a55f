#include "rundet/resblock.hpp"

#include <algorithm>
#include <limits>
#include <string>
#include <unordered_map>

#include "init.hpp"
#include "rundet/errors.hpp"
#include "rundet/ops.hpp"

namespace rundet {

const char* mode_name(ResblockMode mode) {
  switch (mode) {
    case ResblockMode::kNone: return "baseline";
    case ResblockMode::kTwoWay: return "2way";
    case ResblockMode::kThreeWay: return "3way";
  }
  return "?";
}

void ResblockConfig::validate() const {
  if (depth < 2 || depth % 2 != 0) throw ConfigError("resblock depth must be even and >= 2");
  if (!branch1 && !branch2) throw ConfigError("resblock needs branch1 or branch2 enabled");
}

namespace {

std::string level_name(const char* branch, std::size_t level, const char* part) {
  return std::string(branch) + ".l" + std::to_string(level + 1) + part;
}

}  // namespace

ResidualBlocks::ResidualBlocks(const ResblockConfig& config, std::span<const int> channels,
                               std::span<const GridSize> grids, ParamStore& params,
                               std::uint64_t seed)
    : config_(config), channels_(channels.begin(), channels.end()), grids_(grids.begin(), grids.end()) {
  config_.validate();
  if (config_.mode == ResblockMode::kNone) throw ConfigError("residual blocks need a 2way/3way mode");
  if (channels_.size() != grids_.size() || channels_.empty()) {
    throw ConfigError("resblock: channel and grid lists disagree");
  }
  const int d = config_.depth;
  auto make = [&](const std::string& base, Shape wshape, int fan_in, bool zero) {
    Conv c{params.add(base + ".w", wshape), params.add(base + ".b", Shape{wshape[0]})};
    if (!zero) detail::kaiming_init(c.w, fan_in, seed, base + ".w");
    return c;
  };
  const std::size_t k = channels_.size();
  for (std::size_t l = 0; l < k; ++l) {
    const int c = channels_[l];
    if (config_.branch1) b1_.push_back(make(level_name("branch1", l, ""), Shape{d, c, 1, 1}, c, false));
    if (config_.branch2) {
      b2_reduce_.push_back(make(level_name("branch2", l, ".reduce"), Shape{d / 2, c, 1, 1}, c, false));
      b2_context_.push_back(
          make(level_name("branch2", l, ".context"), Shape{d, d / 2, 3, 3}, d / 2 * 9, false));
    }
  }
  if (config_.mode == ResblockMode::kThreeWay && config_.branch3) {
    if (k < 2) throw ConfigError("3-way blocks need at least two source levels");
    for (std::size_t l = 0; l + 1 < k; ++l) {
      if (grids_[l + 1].height * 2 != grids_[l].height || grids_[l + 1].width * 2 != grids_[l].width) {
        throw ConfigError("branch3 deconvolution of level " + std::to_string(l + 2) +
                          " does not reach the size of level " + std::to_string(l + 1));
      }
      const int cn = channels_[l + 1];
      // deconv weight layout is in x out x K x K; the bias has `out` entries
      const std::string base = level_name("branch3", l, ".deconv");
      Conv up{params.add(base + ".w", Shape{cn, d, 2, 2}), params.add(base + ".b", Shape{d})};
      detail::kaiming_init(up.w, cn, seed, base + ".w");
      b3_deconv_.push_back(up);
      // zero init: a fresh branch3 leaves the 2-way function unchanged
      b3_conv_.push_back(make(level_name("branch3", l, ".conv"), Shape{d, d, 3, 3}, d * 9, true));
    }
  }
}

Tensor ResidualBlocks::branch1(std::size_t level, const Tensor& x) const {
  if (b1_.empty()) throw ContractError("branch1 is disabled");
  const Conv& c = b1_.at(level);
  return relu(conv2d(x, c.w, c.b, {1, 0}).set_label("branch1"));
}

Tensor ResidualBlocks::branch2(std::size_t level, const Tensor& x) const {
  if (b2_reduce_.empty()) throw ContractError("branch2 is disabled");
  const Conv& r = b2_reduce_.at(level);
  const Conv& c = b2_context_.at(level);
  Tensor h = relu(conv2d(x, r.w, r.b, {1, 0}).set_label("branch2"));
  return relu(conv2d(h, c.w, c.b, {1, 1}).set_label("branch2"));
}

Tensor ResidualBlocks::branch3(std::size_t level, const Tensor& next) const {
  if (b3_deconv_.empty()) throw ContractError("branch3 is not configured");
  const Conv& up = b3_deconv_.at(level);
  const Conv& c = b3_conv_.at(level);
  Tensor h = relu(deconv2d(next, up.w, up.b, {2, 0}).set_label("branch3"));
  return conv2d(h, c.w, c.b, {1, 1}).set_label("branch3");
}

Tensor ResidualBlocks::two_way_level(std::size_t level, const Tensor& x) const {
  if (!config_.branch1) return branch2(level, x);
  if (!config_.branch2) return branch1(level, x);
  return add(branch1(level, x), branch2(level, x));
}

void ResidualBlocks::check_pyramid(const FeaturePyramid& pyramid) const {
  if (pyramid.size() != channels_.size()) {
    throw DimensionError("resblock expects " + std::to_string(channels_.size()) + " levels, got " +
                         std::to_string(pyramid.size()));
  }
}

ResidualPyramid ResidualBlocks::two_way_forward(const FeaturePyramid& pyramid) const {
  check_pyramid(pyramid);
  ResidualPyramid out;
  out.mode = ResblockMode::kTwoWay;
  for (std::size_t l = 0; l < pyramid.size(); ++l) {
    Tensor x = two_way_level(l, pyramid.levels[l]);
    out.levels.push_back(config_.post_relu ? relu(x) : x);
  }
  return out;
}

ResidualPyramid ResidualBlocks::three_way_forward(const FeaturePyramid& pyramid) const {
  check_pyramid(pyramid);
  if (b3_deconv_.empty()) throw ContractError("three_way_forward needs branch3 parameters");
  ResidualPyramid out;
  out.mode = ResblockMode::kThreeWay;
  const std::size_t k = pyramid.size();
  for (std::size_t l = 0; l < k; ++l) {
    Tensor x = two_way_level(l, pyramid.levels[l]);
    if (l + 1 < k) x = add(x, branch3(l, pyramid.levels[l + 1]));
    out.levels.push_back(config_.post_relu ? relu(x) : x);
  }
  return out;
}

ResidualPyramid ResidualBlocks::forward(const FeaturePyramid& pyramid) const {
  if (config_.mode == ResblockMode::kThreeWay && config_.branch3) return three_way_forward(pyramid);
  return two_way_forward(pyramid);
}

std::vector<SourcePathReport> decoupling_check(std::span<const Tensor> sources, const Tensor& loss) {
  using Count = std::uint64_t;
  constexpr Count kMax = std::numeric_limits<Count>::max();
  auto sat_add = [](Count a, Count b) { return a > kMax - b ? kMax : a + b; };

  // Post-order over the recorded graph: inputs appear before their users.
  std::vector<Tensor> order;
  std::unordered_map<const void*, std::size_t> seen;
  std::vector<std::pair<Tensor, std::size_t>> stack{{loss, 0}};
  seen.emplace(loss.id(), 0);
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (next < t.inputs().size()) {
      const Tensor in = t.inputs()[next++];
      if (seen.emplace(in.id(), 0).second) stack.emplace_back(in, 0);
    } else {
      order.push_back(t);
      stack.pop_back();
    }
  }

  std::unordered_map<const void*, Count> all, direct;
  auto is_branch = [](const Tensor& t) { return t.label().rfind("branch", 0) == 0; };
  all[loss.id()] = 1;
  direct[loss.id()] = is_branch(loss) ? 0 : 1;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Count a = all[it->id()];
    const Count d = is_branch(*it) ? 0 : direct[it->id()];
    for (const Tensor& in : it->inputs()) {
      all[in.id()] = sat_add(all[in.id()], a);
      direct[in.id()] = sat_add(direct[in.id()], d);
    }
  }

  std::vector<SourcePathReport> reports;
  for (const Tensor& s : sources) {
    SourcePathReport r;
    if (auto f = all.find(s.id()); f != all.end()) r.total_paths = f->second;
    if (auto f = direct.find(s.id()); f != direct.end()) r.direct_paths = f->second;
    const auto g = s.grad();
    r.received_gradient = std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
    reports.push_back(r);
  }
  return reports;
}

}  // namespace rundet
