#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rundet/backbone.hpp"
#include "rundet/tensor.hpp"

namespace rundet {

enum class ResblockMode { kNone, kTwoWay, kThreeWay };

const char* mode_name(ResblockMode mode);

/// Output depth used at full (300/512 px) scale.
inline constexpr int kFullScaleDepth = 256;

struct ResblockConfig {
  ResblockMode mode = ResblockMode::kThreeWay;
  int depth = 32;
  bool branch1 = true;
  bool branch2 = true;
  bool branch3 = true;  // ignored unless mode is kThreeWay
  bool post_relu = false;

  void validate() const;
};

struct ResidualPyramid {
  std::vector<Tensor> levels;
  ResblockMode mode = ResblockMode::kTwoWay;

  std::size_t size() const { return levels.size(); }
};

/// Per-level residual feature blocks. Branch conv outputs carry the labels
/// "branch1", "branch2", "branch3" for graph audits.
class ResidualBlocks {
 public:
  /// `channels` and `grids` describe the backbone sources.
  ResidualBlocks(const ResblockConfig& config, std::span<const int> channels,
                 std::span<const GridSize> grids, ParamStore& params, std::uint64_t seed);

  ResidualPyramid two_way_forward(const FeaturePyramid& pyramid) const;
  ResidualPyramid three_way_forward(const FeaturePyramid& pyramid) const;
  /// Dispatches on the configured mode (kNone is not valid here).
  ResidualPyramid forward(const FeaturePyramid& pyramid) const;

  Tensor branch1(std::size_t level, const Tensor& x) const;
  Tensor branch2(std::size_t level, const Tensor& x) const;
  /// `next` is the backbone feature of level + 1.
  Tensor branch3(std::size_t level, const Tensor& next) const;

  const ResblockConfig& config() const { return config_; }
  std::size_t levels() const { return channels_.size(); }

 private:
  Tensor two_way_level(std::size_t level, const Tensor& x) const;
  void check_pyramid(const FeaturePyramid& pyramid) const;

  ResblockConfig config_;
  std::vector<int> channels_;
  std::vector<GridSize> grids_;
  struct Conv {
    Tensor w, b;
  };
  std::vector<Conv> b1_, b2_reduce_, b2_context_, b3_deconv_, b3_conv_;
};

/// Structural gradient-path audit for one source tensor.
struct SourcePathReport {
  std::uint64_t total_paths = 0;
  std::uint64_t direct_paths = 0;  // paths that cross no branch-labelled node
  bool received_gradient = false;

  bool decoupled() const { return total_paths > 0 && direct_paths == 0; }
};

/// Counts every loss-to-source path in the recorded graph and those among
/// them that avoid all nodes labelled "branch*". Counts saturate at 2^64-1.
std::vector<SourcePathReport> decoupling_check(std::span<const Tensor> sources, const Tensor& loss);

}  // namespace rundet
