#pragma once

// Experiment configuration file: INI-style sections with key = value lines.
//
//   [resblock]
//   mode = 2way
//   # comment
//
// Every key has a default, so an empty file is a valid config. Unknown
// sections, unknown keys and duplicates are rejected with the line number.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rundet/evalkit.hpp"
#include "rundet/model.hpp"
#include "rundet/pipeline.hpp"

namespace rundet {

struct ExperimentConfig {
  ModelConfig model;
  MultiboxLossConfig loss;  // variances mirror model.variances

  // schedule
  double base_lr = 1e-3;
  int iterations = 6000;         // stage 1 / end-to-end
  int stage2_iterations = 2000;  // 3-way fine-tuning
  int batch_size = 32;
  SgdOptions sgd;
  int checkpoint_every = 1000;  // 0: final checkpoint only
  std::uint64_t seed = 0;       // initialisation and training order

  // data
  bool augment = true;
  AugmentConfig augmentation;

  // eval
  EvalOptions eval;
  int eval_batch = 32;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  TrainConfig stage1_train() const;
  TrainConfig stage2_train() const;

  /// Every key with its resolved value, in the same format `parse` reads.
  std::string to_text() const;
};

/// Throws ConfigError; `origin` prefixes messages (usually the file name).
ExperimentConfig parse_config(std::string_view text, const std::string& origin = "config");
/// Throws IoError when the file is unreadable, ConfigError when invalid.
ExperimentConfig load_config(const std::filesystem::path& path);

struct ConfigKeyDoc {
  std::string section, key, default_value, doc;
};
/// All recognised keys with defaults and a one-line description.
std::vector<ConfigKeyDoc> config_reference();

}  // namespace rundet
