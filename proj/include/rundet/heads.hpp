#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rundet/tensor.hpp"

namespace rundet {

enum class HeadMode { kUnified, kSeparate };

struct HeadConfig {
  HeadMode mode = HeadMode::kUnified;
  int num_classes = 3;  // foreground classes; channel 0 is background
  int boxes_per_location = 6;
};

/// Per level: loc is B x (A*4) x H x W, conf is B x (A*(C+1)) x H x W.
/// Flattened anchor order is (level, row, column, anchor).
struct RawPredictions {
  std::vector<Tensor> loc;
  std::vector<Tensor> conf;
  int num_classes = 0;  // including background
  int boxes_per_location = 0;

  std::size_t batch() const { return loc.empty() ? 0 : static_cast<std::size_t>(loc[0].shape()[0]); }
  /// Anchors per image across all levels.
  std::size_t anchor_count() const;
};

/// 3x3 conv prediction module. The A*4 location and A*(C+1) confidence
/// outputs are produced by two kernels, which is one conv with its output
/// channels split in two.
class PredictionHead {
 public:
  PredictionHead(const HeadConfig& config, std::span<const int> level_depths, ParamStore& params,
                 std::uint64_t seed);

  RawPredictions predict(std::span<const Tensor> levels) const;

  /// Runs the parameter set that serves `slot` on an arbitrary input.
  std::pair<Tensor, Tensor> predict_level(std::size_t slot, const Tensor& x) const;

  std::size_t parameter_count() const;
  const HeadConfig& config() const { return config_; }

 private:
  struct Slot {
    Tensor loc_w, loc_b, conf_w, conf_b;
    int depth = 0;
  };
  const Slot& slot_for(std::size_t level) const;

  HeadConfig config_;
  std::size_t levels_ = 0;
  std::vector<Slot> slots_;
};

/// Weights plus biases of one head set times the number of sets.
std::size_t head_parameter_count(int depth, int boxes_per_location, int num_classes, HeadMode mode,
                                 int levels);

}  // namespace rundet
