#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "rundet/backbone.hpp"
#include "rundet/boxes.hpp"
#include "rundet/heads.hpp"
#include "rundet/resblock.hpp"
#include "rundet/tensor.hpp"

namespace rundet {

struct ModelConfig {
  BackboneConfig backbone;
  ResblockConfig resblock;
  HeadConfig head;
  PriorConfig priors;
  Variances variances;
  double match_threshold = 0.5;
  NmsConfig nms;
};

/// Backbone -> optional residual blocks -> prediction head, plus the default
/// boxes and post-processing that turn raw maps into detections. With
/// resblock mode kNone the head reads the backbone sources directly.
class Detector {
 public:
  Detector(const ModelConfig& config, std::uint64_t seed);
  Detector(const Detector&) = delete;
  Detector& operator=(const Detector&) = delete;

  struct Forward {
    FeaturePyramid features;
    std::vector<Tensor> head_inputs;
    RawPredictions preds;
  };
  Forward forward(const Tensor& images) const;

  /// Softmax, score floor, decode, clip and per-class NMS for every image in
  /// the batch. Detection class ids are 0-based foreground ids.
  std::vector<Detection> postprocess(const RawPredictions& preds, int first_image_id = 0) const;
  /// forward + postprocess without recording a graph.
  std::vector<Detection> detect(const Tensor& images, int first_image_id = 0) const;

  const ModelConfig& config() const { return config_; }
  ResblockMode mode() const { return config_.resblock.mode; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const DefaultBoxSet& defaults() const { return defaults_; }
  const Backbone& backbone() const { return *backbone_; }
  const ResidualBlocks* blocks() const { return blocks_.get(); }
  const PredictionHead& head() const { return *head_; }

 private:
  ModelConfig config_;
  ParamStore params_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<ResidualBlocks> blocks_;
  std::unique_ptr<PredictionHead> head_;
  DefaultBoxSet defaults_;
};

}  // namespace rundet
