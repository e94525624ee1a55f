#include <cmath>
#include <string>

#include "rundet/errors.hpp"
#include "rundet/ops.hpp"

namespace rundet {
namespace {

// Address of every softmax row: offset of class 0 plus the stride between classes.
struct RowLayout {
  std::vector<std::size_t> offsets;
  std::size_t class_stride = 1;
};

RowLayout layout_rows(const Shape& shape, int num_classes) {
  if (num_classes < 1) throw DimensionError("softmax_ce needs at least one class");
  RowLayout layout;
  if (shape.rank() == 1 || shape.rank() == 2) {
    const std::size_t n = shape.numel();
    if (n % static_cast<std::size_t>(num_classes) != 0 ||
        (shape.rank() == 2 && shape[1] != num_classes)) {
      throw DimensionError("softmax_ce logits " + shape.str() + " are not rows of " +
                           std::to_string(num_classes));
    }
    for (std::size_t r = 0; r < n / num_classes; ++r) layout.offsets.push_back(r * num_classes);
    return layout;
  }
  if (shape.rank() != 4 || shape[1] % num_classes != 0) {
    throw DimensionError("softmax_ce logits " + shape.str() + " do not hold groups of " +
                         std::to_string(num_classes) + " classes");
  }
  const int batch = shape[0], groups = shape[1] / num_classes, h = shape[2], w = shape[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  layout.class_stride = plane;
  layout.offsets.reserve(static_cast<std::size_t>(batch) * plane * groups);
  for (int b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      for (int g = 0; g < groups; ++g) {
        layout.offsets.push_back((static_cast<std::size_t>(b) * shape[1] +
                                  static_cast<std::size_t>(g) * num_classes) * plane + p);
      }
    }
  }
  return layout;
}

}  // namespace

std::size_t softmax_row_count(const Shape& logits, int num_classes) {
  return layout_rows(logits, num_classes).offsets.size();
}

Tensor softmax_ce(const Tensor& logits, std::span<const int> targets, int num_classes) {
  RowLayout layout = layout_rows(logits.shape(), num_classes);
  if (targets.size() != layout.offsets.size()) {
    throw DimensionError("softmax_ce has " + std::to_string(layout.offsets.size()) +
                         " rows but " + std::to_string(targets.size()) + " targets");
  }
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= num_classes || targets[r] < -1) {
      throw IndexError("softmax_ce target " + std::to_string(targets[r]) + " at row " +
                       std::to_string(r) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }

  Tensor y = make_result(OpKind::kSoftmaxCE, Shape{1}, {logits});
  const auto z = logits.data();
  const std::size_t cs = layout.class_stride;
  double total = 0.0;
  std::vector<std::size_t> active;
  std::vector<double> probs;  // softmax of active rows, kept for backward
  const bool keep = y.requires_grad();
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0) continue;
    const std::size_t o = layout.offsets[r];
    double zmax = z[o];
    for (int k = 1; k < num_classes; ++k) zmax = std::max(zmax, z[o + k * cs]);
    double sum = 0.0;
    for (int k = 0; k < num_classes; ++k) sum += std::exp(z[o + k * cs] - zmax);
    total += std::log(sum) - (z[o + targets[r] * cs] - zmax);
    if (keep) {
      active.push_back(r);
      for (int k = 0; k < num_classes; ++k) probs.push_back(std::exp(z[o + k * cs] - zmax) / sum);
    }
  }
  y.mutable_data()[0] = total;

  if (keep) {
    std::vector<int> active_targets;
    active_targets.reserve(active.size());
    for (std::size_t r : active) active_targets.push_back(targets[r]);
    detail::node_of(y).backward_fn = [logits, num_classes, cs, offsets = std::move(layout.offsets),
                                      active = std::move(active), probs = std::move(probs),
                                      active_targets = std::move(active_targets)](
                                         const detail::Node& self) {
      auto gz = detail::grad_of(logits);
      const double g = self.grad[0];
      for (std::size_t a = 0; a < active.size(); ++a) {
        const std::size_t o = offsets[active[a]];
        for (int k = 0; k < num_classes; ++k) {
          const double onehot = k == active_targets[a] ? 1.0 : 0.0;
          gz[o + k * cs] += g * (probs[a * num_classes + k] - onehot);
        }
      }
    };
  }
  return y;
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, std::span<const double> weights) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("smooth_l1 shape mismatch: " + pred.shape().str() + " vs " +
                         target.shape().str());
  }
  if (!weights.empty() && weights.size() != pred.numel()) {
    throw DimensionError("smooth_l1 weight count does not match " + pred.shape().str());
  }
  Tensor y = make_result(OpKind::kSmoothL1, Shape{1}, {pred, target});
  const auto p = pred.data();
  const auto t = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double wgt = weights.empty() ? 1.0 : weights[i];
    if (wgt == 0.0) continue;
    const double d = p[i] - t[i];
    const double ad = std::abs(d);
    total += wgt * (ad < 1.0 ? 0.5 * d * d : ad - 0.5);
  }
  y.mutable_data()[0] = total;

  if (y.requires_grad()) {
    std::vector<double> w(weights.begin(), weights.end());
    detail::node_of(y).backward_fn = [pred, target, w = std::move(w)](const detail::Node& self) {
      const auto p = pred.data();
      const auto t = target.data();
      const double g = self.grad[0];
      std::span<double> gp, gt;
      if (pred.requires_grad()) gp = detail::grad_of(pred);
      if (target.requires_grad()) gt = detail::grad_of(target);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double wgt = w.empty() ? 1.0 : w[i];
        if (wgt == 0.0) continue;
        const double d = p[i] - t[i];
        const double dd = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
        if (!gp.empty()) gp[i] += g * wgt * dd;
        if (!gt.empty()) gt[i] -= g * wgt * dd;
      }
    };
  }
  return y;
}

}  // namespace rundet
