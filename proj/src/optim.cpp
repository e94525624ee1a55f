#include "rundet/optim.hpp"

namespace rundet {

void Sgd::step(ParamStore& params, double lr) { step(std::span<Param>(params.params()), lr); }

void Sgd::step(std::span<Param> params, double lr) {
  for (Param& p : params) {
    if (p.frozen()) continue;
    auto w = p.tensor().mutable_data();
    const auto g = p.tensor().grad();
    auto& v = velocity_[p.name()];
    if (v.size() != w.size()) v.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = options_.momentum * v[i] + g[i] + options_.weight_decay * w[i];
      w[i] -= lr * v[i];
    }
  }
}

}  // namespace rundet
