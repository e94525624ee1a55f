#pragma once

// The baseline / 2-way / 3-way comparison on generated shapes data: each
// seed generates its own split, trains the three variants and evaluates them
// on the held-out images.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rundet/evalkit.hpp"
#include "rundet/model.hpp"
#include "rundet/pipeline.hpp"

namespace rundet {

enum class Variant { kBaseline = 0, kTwoWay = 1, kThreeWay = 2 };
inline constexpr int kVariants = 3;
const char* variant_name(Variant v);

/// Baseline: no residual blocks, one head per source. 2-way / 3-way: blocks
/// plus the unified head. Everything else is taken from `base`.
ModelConfig variant_config(const ModelConfig& base, Variant v);

struct AblationConfig {
  ModelConfig model;
  int train_images = 3000;
  int test_images = 500;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int stage1_iterations = 1500;  // baseline and 2-way
  int stage2_iterations = 700;   // 3-way fine-tuning
  double base_lr = 1e-3;
  int batch_size = 16;
  SgdOptions sgd;
  bool augment = true;
};

struct VariantRun {
  EvalReport report;
  Checkpoint checkpoint;
  std::vector<LogRow> log;
  double train_seconds = 0;
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<VariantRun> runs;  // indexed by Variant
  /// Stage-1 parameters that stage 2 must leave untouched, compared bitwise.
  bool frozen_intact = false;
};

struct AblationSummary {
  std::vector<SeedRun> seeds;
  std::vector<double> mean_map;       // per variant
  std::vector<double> mean_small_ap;  // per variant, seeds with small objects
  std::vector<double> mean_box_in_box;

  void write_text(std::ostream& os) const;
};

using ProgressSink = std::function<void(const std::string&)>;

/// Train and test images for `seed`: ids 0..train-1 and train..train+test-1
/// of one generated set.
void ablation_split(std::uint64_t seed, int train, int test, std::vector<ShapesSample>& train_out,
                    std::vector<ShapesSample>& test_out);

SeedRun run_ablation_seed(const AblationConfig& config, std::uint64_t seed, const ProgressSink& progress = {});
AblationSummary run_ablation(const AblationConfig& config, const ProgressSink& progress = {});

}  // namespace rundet
