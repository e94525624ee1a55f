#include <algorithm>
#include <cmath>

#include "rundet/errors.hpp"
#include "rundet/ops.hpp"

namespace rundet {

Tensor relu(const Tensor& x) {
  Tensor y = make_result(OpKind::kRelu, x.shape(), {x});
  const auto xd = x.data();
  auto yd = y.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  if (y.requires_grad()) {
    detail::node_of(y).backward_fn = [x](const detail::Node& self) {
      auto gx = detail::grad_of(x);
      const auto xd = x.data();
      for (std::size_t i = 0; i < xd.size(); ++i) {
        if (xd[i] > 0.0) gx[i] += self.grad[i];
      }
    };
  }
  return y;
}

Tensor l2norm_channels(const Tensor& x, const Tensor& gamma) {
  if (x.shape().rank() != 4) throw DimensionError("l2norm input must be 4-D");
  const int batch = x.shape()[0], chans = x.shape()[1];
  const int plane = x.shape()[2] * x.shape()[3];
  if (gamma.shape() != Shape{chans}) {
    throw DimensionError("l2norm gain shape " + gamma.shape().str() + " does not match " +
                         std::to_string(chans) + " channels");
  }
  Tensor y = make_result(OpKind::kL2Norm, x.shape(), {x, gamma});
  const auto xd = x.data();
  const auto gd = gamma.data();
  auto yd = y.mutable_data();
  // One inverse norm per (batch, position).
  std::vector<double> inv_norm(static_cast<std::size_t>(batch) * plane);
  for (int b = 0; b < batch; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * chans * plane;
    for (int p = 0; p < plane; ++p) {
      double ss = 0.0;
      for (int c = 0; c < chans; ++c) {
        const double v = xd[base + static_cast<std::size_t>(c) * plane + p];
        ss += v * v;
      }
      const double inv = 1.0 / std::sqrt(ss + kL2NormEpsilon);
      inv_norm[static_cast<std::size_t>(b) * plane + p] = inv;
      for (int c = 0; c < chans; ++c) {
        const std::size_t i = base + static_cast<std::size_t>(c) * plane + p;
        yd[i] = gd[c] * xd[i] * inv;
      }
    }
  }

  if (y.requires_grad()) {
    detail::node_of(y).backward_fn = [x, gamma, batch, chans, plane,
                                      inv_norm = std::move(inv_norm)](const detail::Node& self) {
      const auto xd = x.data();
      const auto gd = gamma.data();
      const auto& gy = self.grad;
      std::span<double> gx, gg;
      if (x.requires_grad()) gx = detail::grad_of(x);
      if (gamma.requires_grad()) gg = detail::grad_of(gamma);
      for (int b = 0; b < batch; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * chans * plane;
        for (int p = 0; p < plane; ++p) {
          const double inv = inv_norm[static_cast<std::size_t>(b) * plane + p];
          // h = dL/du with u = x / n; dx = h / n - x (h . x) / n^3
          double hx = 0.0;
          for (int c = 0; c < chans; ++c) {
            const std::size_t i = base + static_cast<std::size_t>(c) * plane + p;
            hx += gy[i] * gd[c] * xd[i];
            if (!gg.empty()) gg[c] += gy[i] * xd[i] * inv;
          }
          if (gx.empty()) continue;
          const double inv3 = inv * inv * inv;
          for (int c = 0; c < chans; ++c) {
            const std::size_t i = base + static_cast<std::size_t>(c) * plane + p;
            gx[i] += gy[i] * gd[c] * inv - xd[i] * hx * inv3;
          }
        }
      }
    };
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor y = make_result(OpKind::kAdd, a.shape(), {a, b});
  const auto ad = a.data();
  const auto bd = b.data();
  auto yd = y.mutable_data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = ad[i] + bd[i];
  if (y.requires_grad()) {
    detail::node_of(y).backward_fn = [a, b](const detail::Node& self) {
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = detail::grad_of(*t);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return y;
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_channels needs at least one input");
  const Shape& first = parts.front().shape();
  if (first.rank() != 4) throw DimensionError("concat_channels inputs must be 4-D");
  int chans = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.rank() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
      throw DimensionError("concat_channels extent mismatch: " + first.str() + " vs " + s.str());
    }
    chans += s[1];
  }
  const int batch = first[0];
  const std::size_t plane = static_cast<std::size_t>(first[2]) * first[3];
  Tensor y = make_result(OpKind::kConcatChannels, Shape{batch, chans, first[2], first[3]},
                         std::vector<Tensor>(parts.begin(), parts.end()));
  auto yd = y.mutable_data();
  for (int b = 0; b < batch; ++b) {
    std::size_t offset = static_cast<std::size_t>(b) * chans * plane;
    for (const Tensor& p : parts) {
      const std::size_t n = static_cast<std::size_t>(p.shape()[1]) * plane;
      const auto src = p.data().subspan(static_cast<std::size_t>(b) * n, n);
      std::copy(src.begin(), src.end(), yd.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += n;
    }
  }
  if (y.requires_grad()) {
    std::vector<Tensor> kept(parts.begin(), parts.end());
    detail::node_of(y).backward_fn = [kept, batch, chans, plane](const detail::Node& self) {
      for (int b = 0; b < batch; ++b) {
        std::size_t offset = static_cast<std::size_t>(b) * chans * plane;
        for (const Tensor& p : kept) {
          const std::size_t n = static_cast<std::size_t>(p.shape()[1]) * plane;
          if (p.requires_grad()) {
            auto g = detail::grad_of(p).subspan(static_cast<std::size_t>(b) * n, n);
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
          }
          offset += n;
        }
      }
    };
  }
  return y;
}

Tensor affine(const Tensor& x, double scale, double shift) {
  Tensor y = make_result(OpKind::kAffine, x.shape(), {x});
  const auto xd = x.data();
  auto yd = y.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = scale * xd[i] + shift;
  if (y.requires_grad()) {
    detail::node_of(y).backward_fn = [x, scale](const detail::Node& self) {
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += scale * self.grad[i];
    };
  }
  return y;
}

}  // namespace rundet
