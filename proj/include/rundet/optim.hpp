#pragma once

#include <unordered_map>
#include <vector>

#include "rundet/tensor.hpp"

namespace rundet {

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + grad + weight_decay * w
///   w <- w - lr * v
/// Frozen parameters are skipped entirely (value and velocity).
class Sgd {
 public:
  explicit Sgd(SgdOptions options = {}) : options_(options) {}

  void step(ParamStore& params, double lr);
  void step(std::span<Param> params, double lr);

  const SgdOptions& options() const { return options_; }

 private:
  SgdOptions options_;
  std::unordered_map<std::string, std::vector<double>> velocity_;
};

}  // namespace rundet
