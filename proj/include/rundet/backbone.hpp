#pragma once

#include <cstdint>
#include <vector>

#include "rundet/boxes.hpp"
#include "rundet/tensor.hpp"

namespace rundet {

/// Desk-scale stand-in for the classification trunk. Stage 1 is a 3x3
/// conv + ReLU at input resolution; every later stage is 2x2 max-pool, 3x3
/// conv (pad 1) and ReLU, so stage s runs at input_size / 2^(s-1).
struct BackboneConfig {
  int input_size = 64;
  std::vector<int> widths{16, 32, 32, 32, 32, 32};
  std::vector<int> sources{3, 4, 5, 6};  // 1-based stage indices
  bool l2norm_first_source = true;
  double l2norm_gamma = 20.0;

  /// Throws ConfigError unless sources are increasing, in range and k >= 2.
  void validate() const;
  std::vector<GridSize> source_grids() const;
  std::vector<int> source_channels() const;
};

/// Source feature maps in ascending stage order. `levels` are what the
/// prediction side consumes (first one L2-normalised when configured);
/// `trunk` holds the raw stage outputs that feed the next stage.
struct FeaturePyramid {
  std::vector<Tensor> levels;
  std::vector<Tensor> trunk;

  std::size_t size() const { return levels.size(); }
};

class Backbone {
 public:
  Backbone(const BackboneConfig& config, ParamStore& params, std::uint64_t seed);

  /// image: B x 3 x S x S with S == input_size.
  FeaturePyramid forward_features(const Tensor& image) const;

  /// Recomputes the raw trunk output of source `level + 1` from the raw
  /// trunk output of source `level` (the stages strictly between them).
  Tensor extend(const Tensor& trunk_source, std::size_t level) const;

  const BackboneConfig& config() const { return config_; }

 private:
  Tensor stage(std::size_t index, const Tensor& x) const;  // 0-based stage

  BackboneConfig config_;
  std::vector<Tensor> weights_, biases_;
  Tensor gamma_;
};

}  // namespace rundet
