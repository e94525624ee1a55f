// Convolution, transposed convolution and pooling kernels.
//
// Both convolutions lower to GEMM over an im2col buffer per batch item:
//   conv:   y_b = W[O, C*K*K] * col(x_b)            (col is C*K*K x Ho*Wo)
//   deconv: y_b = col2im(W[C, O*K*K]^T * x_b)       (x_b is C x H*W)
// so the deconv forward is literally the conv data-gradient and vice versa.

#include <Eigen/Core>
#include <algorithm>
#include <limits>

#include "rundet/errors.hpp"
#include "rundet/ops.hpp"

namespace rundet {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

struct Plane {
  int channels, height, width;
};

int conv_extent(int in, int k, ConvGeometry g) { return (in + 2 * g.pad - k) / g.stride + 1; }

// Scratch whose contents are always overwritten before use: skip the zero fill.
template <class T>
struct UninitAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  UninitAllocator() = default;
  template <class U>
  UninitAllocator(const UninitAllocator<U>&) noexcept {}
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};
using Scratch = std::vector<double, UninitAllocator<double>>;

// Output columns [lo, hi) whose input column ox*s - p + kx lies inside [0, in).
struct Span1 {
  int lo, hi;
};
Span1 valid_range(int out, int in, int k_off, ConvGeometry g) {
  const int shift = g.pad - k_off;  // ix = ox*s - shift
  int lo = shift > 0 ? (shift + g.stride - 1) / g.stride : 0;
  int hi = (in - 1 + shift) >= 0 ? (in - 1 + shift) / g.stride + 1 : 0;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// col[(c*K + ky)*K + kx, oy*Wo + ox] = x[c, oy*s - p + ky, ox*s - p + kx]
void im2col(const double* x, Plane in, int k, ConvGeometry g, int out_h, int out_w, double* col) {
  const int cols = out_h * out_w;
  for (int c = 0; c < in.channels; ++c) {
    const double* xc = x + static_cast<std::ptrdiff_t>(c) * in.height * in.width;
    for (int ky = 0; ky < k; ++ky) {
      const Span1 ry = valid_range(out_h, in.height, ky, g);
      for (int kx = 0; kx < k; ++kx) {
        const Span1 rx = valid_range(out_w, in.width, kx, g);
        double* row = col + static_cast<std::ptrdiff_t>((c * k + ky) * k + kx) * cols;
        std::fill(row, row + static_cast<std::ptrdiff_t>(ry.lo) * out_w, 0.0);
        for (int oy = ry.lo; oy < ry.hi; ++oy) {
          double* dst = row + oy * out_w;
          const double* src = xc + (oy * g.stride - g.pad + ky) * in.width;
          const int off = kx - g.pad;
          std::fill(dst, dst + rx.lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + rx.lo + off, src + rx.hi + off, dst + rx.lo);
          } else {
            for (int ox = rx.lo; ox < rx.hi; ++ox) dst[ox] = src[ox * g.stride + off];
          }
          std::fill(dst + rx.hi, dst + out_w, 0.0);
        }
        std::fill(row + static_cast<std::ptrdiff_t>(ry.hi) * out_w, row + cols, 0.0);
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image plane.
void col2im_add(const double* col, Plane out, int k, ConvGeometry g, int grid_h, int grid_w,
                double* x) {
  const int cols = grid_h * grid_w;
  for (int c = 0; c < out.channels; ++c) {
    double* xc = x + static_cast<std::ptrdiff_t>(c) * out.height * out.width;
    for (int ky = 0; ky < k; ++ky) {
      const Span1 ry = valid_range(grid_h, out.height, ky, g);
      for (int kx = 0; kx < k; ++kx) {
        const Span1 rx = valid_range(grid_w, out.width, kx, g);
        const double* row = col + static_cast<std::ptrdiff_t>((c * k + ky) * k + kx) * cols;
        for (int oy = ry.lo; oy < ry.hi; ++oy) {
          double* dst = xc + (oy * g.stride - g.pad + ky) * out.width;
          const double* src = row + oy * grid_w;
          const int off = kx - g.pad;
          if (g.stride == 1) {
            for (int ox = rx.lo; ox < rx.hi; ++ox) dst[ox + off] += src[ox];
          } else {
            for (int ox = rx.lo; ox < rx.hi; ++ox) dst[ox * g.stride + off] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(int k, ConvGeometry g) { return k == 1 && g.stride == 1 && g.pad == 0; }

void check_4d(const Tensor& t, const char* what) {
  if (t.shape().rank() != 4) {
    throw DimensionError(std::string(what) + " must be 4-D, got " + t.shape().str());
  }
}

void check_bias(const Tensor& bias, int channels) {
  if (bias.defined() && (bias.shape().rank() != 1 || bias.shape()[0] != channels)) {
    throw DimensionError("bias shape " + bias.shape().str() + " does not match " +
                         std::to_string(channels) + " output channels");
  }
}

void add_bias(const Tensor& bias, int channels, int plane, double* y) {
  if (!bias.defined()) return;
  const auto b = bias.data();
  for (int c = 0; c < channels; ++c) {
    double* yc = y + static_cast<std::ptrdiff_t>(c) * plane;
    const double v = b[c];
    for (int i = 0; i < plane; ++i) yc[i] += v;
  }
}

void accumulate_bias_grad(const Tensor& bias, int batch, int channels, int plane,
                          std::span<const double> gy) {
  if (!bias.defined() || !bias.requires_grad()) return;
  auto gb = detail::grad_of(bias);
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const double* g = gy.data() + (static_cast<std::ptrdiff_t>(b) * channels + c) * plane;
      double s = 0.0;
      for (int i = 0; i < plane; ++i) s += g[i];
      gb[c] += s;
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, ConvGeometry geom) {
  check_4d(x, "conv2d input");
  check_4d(w, "conv2d kernel");
  const int batch = x.shape()[0], in_c = x.shape()[1], in_h = x.shape()[2], in_w = x.shape()[3];
  const int out_c = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != in_c) {
    throw DimensionError("conv2d channel mismatch: input " + x.shape().str() + ", kernel " +
                         w.shape().str());
  }
  if (w.shape()[3] != k) throw DimensionError("conv2d kernel must be square");
  if (geom.stride < 1 || geom.pad < 0) throw DimensionError("conv2d stride must be >= 1");
  if (k > in_h + 2 * geom.pad || k > in_w + 2 * geom.pad) {
    throw DimensionError("conv2d kernel " + std::to_string(k) + " exceeds padded input " +
                         x.shape().str());
  }
  check_bias(bias, out_c);

  const int out_h = conv_extent(in_h, k, geom), out_w = conv_extent(in_w, k, geom);
  const int ckk = in_c * k * k, plane = out_h * out_w;
  const Plane in_plane{in_c, in_h, in_w};
  const bool pointwise = is_pointwise(k, geom);

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  Tensor y = make_result(OpKind::kConv2d, Shape{batch, out_c, out_h, out_w}, std::move(inputs));

  // Keep the lowered inputs for the weight gradient.
  const bool keep_cols = y.requires_grad() && w.requires_grad() && !pointwise;
  Scratch cols;
  if (keep_cols) cols.resize(static_cast<std::size_t>(batch) * ckk * plane);
  Scratch scratch(pointwise || keep_cols ? 0 : static_cast<std::size_t>(ckk) * plane);

  const ConstMatMap wm(w.data().data(), out_c, ckk);
  auto ydata = y.mutable_data();
  const double* xdata = x.data().data();
  const std::size_t x_stride = static_cast<std::size_t>(in_c) * in_h * in_w;
  for (int b = 0; b < batch; ++b) {
    const double* xb = xdata + b * x_stride;
    const double* col = xb;
    if (!pointwise) {
      double* buf = keep_cols ? cols.data() + static_cast<std::size_t>(b) * ckk * plane
                              : scratch.data();
      im2col(xb, in_plane, k, geom, out_h, out_w, buf);
      col = buf;
    }
    MatMap yb(ydata.data() + static_cast<std::size_t>(b) * out_c * plane, out_c, plane);
    yb.noalias() = wm * ConstMatMap(col, ckk, plane);
    add_bias(bias, out_c, plane, yb.data());
  }

  if (y.requires_grad()) {
    detail::node_of(y).backward_fn = [x, w, bias, geom, batch, in_plane, out_c, k, ckk, out_h,
                                      out_w, plane, pointwise,
                                      cols = std::move(cols)](const detail::Node& self) {
      const auto gy = std::span<const double>(self.grad);
      const std::size_t x_stride =
          static_cast<std::size_t>(in_plane.channels) * in_plane.height * in_plane.width;
      accumulate_bias_grad(bias, batch, out_c, plane, gy);
      const ConstMatMap wm(w.data().data(), out_c, ckk);
      Scratch dcol(pointwise ? 0 : static_cast<std::size_t>(ckk) * plane);
      for (int b = 0; b < batch; ++b) {
        const ConstMatMap gyb(gy.data() + static_cast<std::size_t>(b) * out_c * plane, out_c,
                              plane);
        if (w.requires_grad()) {
          MatMap gw(detail::grad_of(w).data(), out_c, ckk);
          const double* col = pointwise ? x.data().data() + b * x_stride
                                        : cols.data() + static_cast<std::size_t>(b) * ckk * plane;
          gw.noalias() += gyb * ConstMatMap(col, ckk, plane).transpose();
        }
        if (x.requires_grad()) {
          double* gxb = detail::grad_of(x).data() + b * x_stride;
          if (pointwise) {
            MatMap(gxb, ckk, plane).noalias() += wm.transpose() * gyb;
          } else {
            MatMap(dcol.data(), ckk, plane).noalias() = wm.transpose() * gyb;
            col2im_add(dcol.data(), in_plane, k, geom, out_h, out_w, gxb);
          }
        }
      }
    };
  }
  return y;
}

Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& bias, ConvGeometry geom) {
  check_4d(x, "deconv2d input");
  check_4d(w, "deconv2d kernel");
  const int batch = x.shape()[0], in_c = x.shape()[1], in_h = x.shape()[2], in_w = x.shape()[3];
  const int out_c = w.shape()[1], k = w.shape()[2];
  if (w.shape()[0] != in_c) {
    throw DimensionError("deconv2d channel mismatch: input " + x.shape().str() + ", kernel " +
                         w.shape().str());
  }
  if (w.shape()[3] != k) throw DimensionError("deconv2d kernel must be square");
  if (geom.stride < 1 || geom.pad < 0) throw DimensionError("deconv2d stride must be >= 1");
  const int out_h = (in_h - 1) * geom.stride - 2 * geom.pad + k;
  const int out_w = (in_w - 1) * geom.stride - 2 * geom.pad + k;
  if (out_h < 1 || out_w < 1) {
    throw DimensionError("deconv2d output size is non-positive for input " + x.shape().str());
  }
  check_bias(bias, out_c);

  const int okk = out_c * k * k, grid = in_h * in_w, plane = out_h * out_w;
  const Plane out_plane{out_c, out_h, out_w};

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  Tensor y = make_result(OpKind::kDeconv2d, Shape{batch, out_c, out_h, out_w}, std::move(inputs));

  const ConstMatMap wm(w.data().data(), in_c, okk);
  Scratch col(static_cast<std::size_t>(okk) * grid);
  auto ydata = y.mutable_data();
  for (int b = 0; b < batch; ++b) {
    const ConstMatMap xb(x.data().data() + static_cast<std::size_t>(b) * in_c * grid, in_c, grid);
    MatMap(col.data(), okk, grid).noalias() = wm.transpose() * xb;
    double* yb = ydata.data() + static_cast<std::size_t>(b) * out_c * plane;
    col2im_add(col.data(), out_plane, k, geom, in_h, in_w, yb);
    add_bias(bias, out_c, plane, yb);
  }

  if (y.requires_grad()) {
    detail::node_of(y).backward_fn = [x, w, bias, geom, batch, in_c, out_plane, k, okk, grid,
                                      in_h, in_w, plane](const detail::Node& self) {
      const auto gy = std::span<const double>(self.grad);
      accumulate_bias_grad(bias, batch, out_plane.channels, plane, gy);
      const ConstMatMap wm(w.data().data(), in_c, okk);
      Scratch gcol(static_cast<std::size_t>(okk) * grid);
      for (int b = 0; b < batch; ++b) {
        im2col(gy.data() + static_cast<std::size_t>(b) * out_plane.channels * plane, out_plane, k,
               geom, in_h, in_w, gcol.data());
        const ConstMatMap gc(gcol.data(), okk, grid);
        if (w.requires_grad()) {
          const ConstMatMap xb(x.data().data() + static_cast<std::size_t>(b) * in_c * grid, in_c,
                               grid);
          MatMap(detail::grad_of(w).data(), in_c, okk).noalias() += xb * gc.transpose();
        }
        if (x.requires_grad()) {
          MatMap(detail::grad_of(x).data() + static_cast<std::size_t>(b) * in_c * grid, in_c, grid)
              .noalias() += wm * gc;
        }
      }
    };
  }
  return y;
}

Tensor maxpool2d(const Tensor& x, int window, int stride) {
  check_4d(x, "maxpool2d input");
  const int batch = x.shape()[0], chans = x.shape()[1], in_h = x.shape()[2], in_w = x.shape()[3];
  if (window < 1 || stride < 1) throw DimensionError("maxpool2d window and stride must be >= 1");
  if (window > in_h || window > in_w) {
    throw DimensionError("maxpool2d window " + std::to_string(window) + " exceeds input " +
                         x.shape().str());
  }
  const int out_h = (in_h - window) / stride + 1, out_w = (in_w - window) / stride + 1;
  Tensor y = make_result(OpKind::kMaxPool2d, Shape{batch, chans, out_h, out_w}, {x});

  const auto xd = x.data();
  auto yd = y.mutable_data();
  std::vector<std::size_t> argmax(yd.size());
  std::size_t o = 0;
  for (int bc = 0; bc < batch * chans; ++bc) {
    const std::size_t base = static_cast<std::size_t>(bc) * in_h * in_w;
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = base + static_cast<std::size_t>(oy * stride) * in_w + ox * stride;
        for (int dy = 0; dy < window; ++dy) {
          for (int dx = 0; dx < window; ++dx) {
            const std::size_t idx =
                base + static_cast<std::size_t>(oy * stride + dy) * in_w + (ox * stride + dx);
            if (xd[idx] > best) {
              best = xd[idx];
              best_idx = idx;
            }
          }
        }
        yd[o] = best;
        argmax[o] = best_idx;
      }
    }
  }

  if (y.requires_grad()) {
    detail::node_of(y).backward_fn = [x, argmax = std::move(argmax)](const detail::Node& self) {
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[i];
    };
  }
  return y;
}

}  // namespace rundet
