#pragma once

// Training: learning-rate schedule, the two-stage 2-way -> 3-way protocol and
// binary checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rundet/errors.hpp"
#include "rundet/loss.hpp"
#include "rundet/model.hpp"
#include "rundet/optim.hpp"
#include "rundet/shapes.hpp"

namespace rundet {

/// Step schedule over 1-based iterations: lr(t) = base * decay^k where k is
/// the number of milestones already passed (m < t). Iteration m + 1 is the
/// first to run at the lower rate.
struct Schedule {
  double base_lr = 1e-3;
  std::vector<int> milestones;
  double decay = 0.1;
  int total_iterations = 0;
  int batch_size = 32;

  void validate() const;
  double lr_at(int iteration) const;
};

/// Desk-scale defaults: 6k iterations with drops at 4k/5k for end-to-end
/// training, 2k with drops at 4/6 and 6/7 of the run for fine-tuning.
Schedule stage1_schedule(int total = 6000, double base_lr = 1e-3, int batch_size = 32);
Schedule stage2_schedule(int total = 2000, double base_lr = 1e-3, int batch_size = 32);

enum class StageTag : std::uint8_t { kBaseline = 0, kTwoWay = 1, kThreeWay = 2 };
const char* stage_name(StageTag tag);
StageTag stage_for(ResblockMode mode);

// ---- checkpoints -------------------------------------------------------------

class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
/// A blob is missing, unexpected, or has the wrong extents for this model.
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct Blob {
  std::string name;
  std::vector<int> extents;
  std::vector<double> data;
  friend bool operator==(const Blob&, const Blob&) = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t version = kVersion;
  StageTag stage = StageTag::kTwoWay;
  std::uint64_t iteration = 0;
  std::vector<Blob> blobs;  // parameters, then "rng.state" if present

  const Blob* find(const std::string& name) const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr const char* kRngBlob = "rng.state";

Checkpoint capture(const ParamStore& params, StageTag stage, std::uint64_t iteration,
                   const std::mt19937_64* rng = nullptr);
/// Copies blobs into `params`. Every blob is validated before anything is
/// written. Parameters for which `may_be_absent(name)` holds keep their
/// current values when the checkpoint lacks them.
void restore(const Checkpoint& ckpt, ParamStore& params,
             const std::function<bool(const std::string&)>& may_be_absent = {});
/// Restores the generator saved by capture; false if none was stored.
bool restore_rng(const Checkpoint& ckpt, std::mt19937_64& rng);

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);
/// Written through a temporary file and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- training ----------------------------------------------------------------

struct TrainConfig {
  Schedule schedule = stage1_schedule();
  SgdOptions sgd;
  MultiboxLossConfig loss;
  bool augment = true;
  AugmentConfig augmentation;
  std::uint64_t seed = 0;
};

struct LogRow {
  int iteration = 0;
  double lr = 0, loc = 0, conf = 0, total = 0;
};
/// `iteration lr loc conf total` with full precision.
std::string format_log_row(const LogRow& row);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRow> log;
};

using LogSink = std::function<void(const LogRow&)>;

/// Trains every parameter of `model` on `data`. Throws NumericalError when the
/// loss turns non-finite.
TrainResult train_end_to_end(Detector& model, const std::vector<ShapesSample>& data,
                             const TrainConfig& config, const LogSink& sink = {});
/// Stage 1: end-to-end training of a 2-way model.
TrainResult train_stage1_2way(Detector& model, const std::vector<ShapesSample>& data,
                              const TrainConfig& config, const LogSink& sink = {});
/// Stage 2: loads a 2-way checkpoint into the 3-way `model`, freezes all but
/// branch3.* and head.*, then fine-tunes. ContractError on a stage mismatch.
TrainResult train_stage2_3way(const Checkpoint& stage1, Detector& model,
                              const std::vector<ShapesSample>& data, const TrainConfig& config,
                              const LogSink& sink = {});

/// Name filter for parameters trained in stage 2.
bool stage2_trainable(const std::string& name);

}  // namespace rundet
