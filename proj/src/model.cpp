#include "rundet/model.hpp"

#include <algorithm>
#include <array>

#include "rundet/errors.hpp"
#include "rundet/loss.hpp"

namespace rundet {

Detector::Detector(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  backbone_ = std::make_unique<Backbone>(config_.backbone, params_, seed);
  const auto channels = config_.backbone.source_channels();
  const auto grids = config_.backbone.source_grids();
  std::vector<int> depths = channels;
  if (config_.resblock.mode != ResblockMode::kNone) {
    blocks_ = std::make_unique<ResidualBlocks>(config_.resblock, channels, grids, params_, seed);
    depths.assign(channels.size(), config_.resblock.depth);
  }
  if (config_.head.boxes_per_location != DefaultBoxSet::kBoxesPerLocation) {
    throw ConfigError("head boxes per location must match the default box layout");
  }
  head_ = std::make_unique<PredictionHead>(config_.head, depths, params_, seed);
  defaults_ = generate_default_boxes(grids, config_.priors);
}

Detector::Forward Detector::forward(const Tensor& images) const {
  Forward f;
  f.features = backbone_->forward_features(images);
  if (blocks_) {
    f.head_inputs = blocks_->forward(f.features).levels;
  } else {
    f.head_inputs = f.features.levels;
  }
  f.preds = head_->predict(f.head_inputs);
  return f;
}

std::vector<Detection> Detector::postprocess(const RawPredictions& preds, int first_image_id) const {
  const std::size_t anchors = defaults_.size();
  if (preds.anchor_count() != anchors) throw ContractError("predictions do not match default boxes");
  const int k = preds.num_classes;
  const NmsConfig& nc = config_.nms;
  std::vector<Detection> out;
  std::vector<double> probs(static_cast<std::size_t>(k));
  std::vector<std::vector<Detection>> per_class(static_cast<std::size_t>(k));
  for (std::size_t b = 0; b < preds.batch(); ++b) {
    for (auto& v : per_class) v.clear();
    const int image_id = first_image_id + static_cast<int>(b);
    for (std::size_t i = 0; i < anchors; ++i) {
      anchor_softmax(preds, b, i, probs);
      bool any = false;
      for (int c = 1; c < k; ++c) any |= probs[c] > nc.score_floor;
      if (!any) continue;
      // read the four offsets of anchor i
      std::size_t level = 0;
      while (level + 1 < defaults_.level_count() && i >= defaults_.level_offset(level + 1)) ++level;
      const std::size_t j = i - defaults_.level_offset(level);
      const int na = preds.boxes_per_location;
      const Tensor& loc = preds.loc[level];
      const std::size_t plane = static_cast<std::size_t>(loc.shape()[2]) * loc.shape()[3];
      const std::size_t pos = j / na, a = j % na;
      const double* base = loc.data().data() + (b * na * 4 + a * 4) * plane + pos;
      const Offsets t{base[0], base[plane], base[2 * plane], base[3 * plane]};
      const BoxCorners box = clip_unit(to_corners(decode(t, defaults_[i], config_.variances)));
      if (!box.valid()) continue;
      for (int c = 1; c < k; ++c) {
        if (probs[c] > nc.score_floor) per_class[c].push_back({image_id, c - 1, probs[c], box});
      }
    }
    for (auto& cand : per_class) {
      if (cand.empty()) continue;
      if (static_cast<int>(cand.size()) > nc.pre_top_k) {
        std::stable_sort(cand.begin(), cand.end(),
                         [](const Detection& x, const Detection& y) { return x.score > y.score; });
        cand.resize(static_cast<std::size_t>(nc.pre_top_k));
      }
      const auto kept = nms(cand, nc.iou_threshold, nc.top_k);
      out.insert(out.end(), kept.begin(), kept.end());
    }
  }
  return out;
}

std::vector<Detection> Detector::detect(const Tensor& images, int first_image_id) const {
  NoGradGuard guard;
  return postprocess(forward(images).preds, first_image_id);
}

}  // namespace rundet
