#pragma once

#include <span>
#include <vector>

#include "rundet/boxes.hpp"
#include "rundet/heads.hpp"
#include "rundet/tensor.hpp"

namespace rundet {

/// One annotated object. `label` is the confidence-channel index (1..C);
/// channel 0 is background.
struct GroundTruth {
  BoxCorners box;
  int label = 1;
};

struct ImageTargets {
  std::vector<GroundTruth> objects;
  MatchResult match;  // over the same DefaultBoxSet as the predictions
};

/// Matches every image's objects against the default boxes.
std::vector<ImageTargets> build_targets(const DefaultBoxSet& defaults,
                                        std::span<const std::vector<GroundTruth>> objects,
                                        double threshold = 0.5);

struct MultiboxLossConfig {
  double neg_pos_ratio = 3.0;
  Variances variances;
};

struct MultiboxLossReport {
  Tensor total;           // (loc_sum + conf_sum) / max(N, 1)
  double loc_sum = 0;     // unnormalised smooth-L1 sum over positives
  double conf_sum = 0;    // unnormalised CE over positives and mined negatives
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::vector<std::vector<std::size_t>> mined;  // per image, ascending anchor index

  double normalizer() const { return positives > 0 ? static_cast<double>(positives) : 1.0; }
  double loc() const { return loc_sum / normalizer(); }
  double conf() const { return conf_sum / normalizer(); }
};

/// SSD objective with hard negative mining: per image, the top
/// ratio * N_i non-positive anchors by background cross-entropy (lower
/// anchor index first on ties) join the confidence term.
MultiboxLossReport multibox_loss(const RawPredictions& preds, const DefaultBoxSet& defaults,
                                 std::span<const ImageTargets> targets,
                                 const MultiboxLossConfig& config = {});

/// Per-anchor background cross-entropy -log softmax(conf)[0], flattened in
/// (image, level, row, column, anchor) order. No graph is recorded.
std::vector<double> background_ce(const RawPredictions& preds);

/// Softmax probabilities for one anchor of one image.
void anchor_softmax(const RawPredictions& preds, std::size_t image, std::size_t anchor,
                    std::span<double> probs);

}  // namespace rundet
