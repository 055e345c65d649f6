// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Differentiable operators for the set U-Net: 4x4 convolutions (direct and
// transposed), batch norm, pointwise activations, set-axis reductions, and a
// few shape/arithmetic helpers. Everything is single-threaded with a fixed
// summation order, so results are bitwise reproducible.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <optional>

#include "dssdrv/tensor.hpp"

namespace dssdrv {

inline constexpr int kKernel = 4;

struct Pad4 {
  int top = 1, left = 1, bottom = 1, right = 1;
};

// Stride-1 "same" padding for an even kernel.
inline constexpr Pad4 kSamePad{1, 1, 2, 2};

namespace detail {

template <typename T>
T* input_grad(TensorNode<T>& node, std::size_t i) {
  auto& in = *node.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  std::int64_t channels, height, width;  // image side
  std::int64_t out_h, out_w;             // patch grid side
  int stride;
  Pad4 pad;
};

// col[(c*16 + ky*4 + kx), oy*out_w + ox] = img[c, oy*s - top + ky, ox*s - left + kx]
template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const std::int64_t grid = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const T* plane = img + c * g.height * g.width;
    for (int ky = 0; ky < kKernel; ++ky) {
      for (int kx = 0; kx < kKernel; ++kx) {
        T* row = col + ((c * kKernel + ky) * kKernel + kx) * grid;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad.top + ky;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + iy * g.width;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad.left + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-and-adds columns back onto the image.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const std::int64_t grid = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    T* plane = img + c * g.height * g.width;
    for (int ky = 0; ky < kKernel; ++ky) {
      for (int kx = 0; kx < kKernel; ++kx) {
        const T* row = col + ((c * kKernel + ky) * kKernel + kx) * grid;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad.top + ky;
          if (iy < 0 || iy >= g.height) continue;
          const T* src = row + oy * g.out_w;
          T* dst = plane + iy * g.width;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad.left + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void add_bias(T* out, const T* bias, std::int64_t batch, std::int64_t channels, std::int64_t plane) {
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < channels; ++c) {
      T* p = out + (n * channels + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) p[i] += bias[c];
    }
}

template <typename T>
void bias_grad(const T* gout, T* gbias, std::int64_t batch, std::int64_t channels, std::int64_t plane) {
  for (std::int64_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* p = gout + (n * channels + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
    }
    gbias[c] += static_cast<T>(acc);
  }
}

}  // namespace detail

// x [B,Cin,H,W], w [Cout,Cin,4,4], optional b [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                 int stride, Pad4 pad) {
  DSSDRV_CHECK(x.rank() == 4, ShapeError, "conv2d input must be [B,C,H,W], got ", shape_str(x.shape()));
  DSSDRV_CHECK(w.rank() == 4 && w.dim(2) == kKernel && w.dim(3) == kKernel, ShapeError,
               "conv2d weight must be [Cout,Cin,4,4], got ", shape_str(w.shape()));
  DSSDRV_CHECK(stride == 1 || stride == 2, ShapeError, "conv2d stride must be 1 or 2");
  DSSDRV_CHECK(x.dim(1) == w.dim(1), ShapeError, "conv2d channel mismatch: input ", shape_str(x.shape()),
               " weight ", shape_str(w.shape()));
  DSSDRV_CHECK(x.dim(2) >= 1 && x.dim(3) >= 1, ShapeError, "conv2d needs H,W >= 1");
  const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(0);
  const std::int64_t span_h = h + pad.top + pad.bottom - kKernel;
  const std::int64_t span_w = wd + pad.left + pad.right - kKernel;
  DSSDRV_CHECK(span_h >= 0 && span_w >= 0, ShapeError, "conv2d produces a non-positive output extent");
  const std::int64_t oh = span_h / stride + 1, ow = span_w / stride + 1;
  if (b) DSSDRV_CHECK(b->numel() == static_cast<std::size_t>(cout), ShapeError, "conv2d bias size mismatch");

  const detail::ConvGeom geom{cin, h, wd, oh, ow, stride, pad};
  const std::int64_t krows = cin * kKernel * kKernel, grid = oh * ow;
  std::vector<T> out(static_cast<std::size_t>(batch * cout * grid));
  std::vector<T> col(static_cast<std::size_t>(krows * grid));
  detail::CMapMat<T> wm(w.data().data(), cout, krows);
  for (std::int64_t n = 0; n < batch; ++n) {
    detail::im2col(x.data().data() + n * cin * h * wd, geom, col.data());
    detail::MapMat<T> om(out.data() + n * cout * grid, cout, grid);
    om.noalias() = wm * detail::CMapMat<T>(col.data(), krows, grid);
  }
  if (b) detail::add_bias(out.data(), b->data().data(), batch, cout, grid);

  std::vector<Tensor<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return make_result<T>(
      {batch, cout, oh, ow}, std::move(out), "conv2d", inputs,
      [geom, batch, cin, h, wd, cout, krows, grid, has_bias = b.has_value()](detail::TensorNode<T>& node) {
        const T* xd = node.inputs[0]->data.data();
        const T* wdata = node.inputs[1]->data.data();
        T* gx = detail::input_grad(node, 0);
        T* gw = detail::input_grad(node, 1);
        const T* gout = node.grad.data();
        std::vector<T> col(static_cast<std::size_t>(krows * grid));
        detail::CMapMat<T> wm(wdata, cout, krows);
        for (std::int64_t n = 0; n < batch; ++n) {
          detail::CMapMat<T> go(gout + n * cout * grid, cout, grid);
          if (gw) {
            detail::im2col(xd + n * cin * h * wd, geom, col.data());
            detail::MapMat<T>(gw, cout, krows).noalias() +=
                go * detail::CMapMat<T>(col.data(), krows, grid).transpose();
          }
          if (gx) {
            detail::MapMat<T>(col.data(), krows, grid).noalias() = wm.transpose() * go;
            detail::col2im(col.data(), geom, gx + n * cin * h * wd);
          }
        }
        if (has_bias) {
          if (T* gb = detail::input_grad(node, 2)) detail::bias_grad(gout, gb, batch, cout, grid);
        }
      });
}

// x [B,Cin,H,W], w [Cin,Cout,4,4] -> [B,Cout,(H-1)*s - top - bottom + 4, ...].
// With stride 2 and unit padding this is exact x2 upsampling; it is the
// adjoint of conv2d with the same weight array and geometry.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                           int stride = 2, Pad4 pad = Pad4{}) {
  DSSDRV_CHECK(x.rank() == 4 && x.numel() > 0, ShapeError, "conv_transpose2d input must be nonempty [B,C,H,W]");
  DSSDRV_CHECK(w.rank() == 4 && w.dim(2) == kKernel && w.dim(3) == kKernel, ShapeError,
               "conv_transpose2d weight must be [Cin,Cout,4,4], got ", shape_str(w.shape()));
  DSSDRV_CHECK(x.dim(1) == w.dim(0), ShapeError, "conv_transpose2d channel mismatch: input ",
               shape_str(x.shape()), " weight ", shape_str(w.shape()));
  const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(1);
  const std::int64_t oh = (h - 1) * stride - pad.top - pad.bottom + kKernel;
  const std::int64_t ow = (wd - 1) * stride - pad.left - pad.right + kKernel;
  DSSDRV_CHECK(oh >= 1 && ow >= 1, ShapeError, "conv_transpose2d produces a non-positive output extent");
  if (b) DSSDRV_CHECK(b->numel() == static_cast<std::size_t>(cout), ShapeError, "conv_transpose2d bias size mismatch");

  // Geometry seen from the output image: x's grid is the patch grid.
  const detail::ConvGeom geom{cout, oh, ow, h, wd, stride, pad};
  const std::int64_t krows = cout * kKernel * kKernel, grid = h * wd;
  std::vector<T> out(static_cast<std::size_t>(batch * cout * oh * ow), T(0));
  std::vector<T> col(static_cast<std::size_t>(krows * grid));
  detail::CMapMat<T> wm(w.data().data(), cin, krows);
  for (std::int64_t n = 0; n < batch; ++n) {
    detail::MapMat<T>(col.data(), krows, grid).noalias() =
        wm.transpose() * detail::CMapMat<T>(x.data().data() + n * cin * grid, cin, grid);
    detail::col2im(col.data(), geom, out.data() + n * cout * oh * ow);
  }
  if (b) detail::add_bias(out.data(), b->data().data(), batch, cout, oh * ow);

  std::vector<Tensor<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return make_result<T>(
      {batch, cout, oh, ow}, std::move(out), "conv_transpose2d", inputs,
      [geom, batch, cin, cout, oh, ow, krows, grid, has_bias = b.has_value()](detail::TensorNode<T>& node) {
        const T* xd = node.inputs[0]->data.data();
        const T* wdata = node.inputs[1]->data.data();
        T* gx = detail::input_grad(node, 0);
        T* gw = detail::input_grad(node, 1);
        const T* gout = node.grad.data();
        std::vector<T> col(static_cast<std::size_t>(krows * grid));
        detail::CMapMat<T> wm(wdata, cin, krows);
        for (std::int64_t n = 0; n < batch; ++n) {
          detail::im2col(gout + n * cout * oh * ow, geom, col.data());
          detail::CMapMat<T> cm(col.data(), krows, grid);
          if (gx) detail::MapMat<T>(gx + n * cin * grid, cin, grid).noalias() += wm * cm;
          if (gw) {
            detail::MapMat<T>(gw, cin, krows).noalias() +=
                detail::CMapMat<T>(xd + n * cin * grid, cin, grid) * cm.transpose();
          }
        }
        if (has_bias) {
          if (T* gb = detail::input_grad(node, 2)) detail::bias_grad(gout, gb, batch, cout, oh * ow);
        }
      });
}

// Running statistics of a batch-norm layer. Not part of the graph.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  BatchNormState() = default;
  explicit BatchNormState(std::int64_t channels)
      : running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}
};

enum class Mode { kTrain, kEval };

// x [N,C,H,W]; statistics per channel over (N,H,W).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Mode mode, double eps = 1e-5, double momentum = 0.1) {
  DSSDRV_CHECK(x.rank() == 4, ShapeError, "batch_norm input must be [N,C,H,W], got ", shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  DSSDRV_CHECK(gamma.numel() == static_cast<std::size_t>(c) && beta.numel() == static_cast<std::size_t>(c),
               ShapeError, "batch_norm affine parameters must have ", c, " entries");
  DSSDRV_CHECK(state.running_mean.size() == static_cast<std::size_t>(c) &&
                   state.running_var.size() == static_cast<std::size_t>(c),
               ShapeError, "batch_norm running stats must have ", c, " entries");
  const std::int64_t count = n * plane;
  DSSDRV_CHECK(count >= 1, ShapeError, "batch_norm needs at least one value per channel");

  const T* xd = x.data().data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = xd + (i * c + ch) * plane;
        for (std::int64_t j = 0; j < plane; ++j) acc += p[j];
      }
      mean = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = xd + (i * c + ch) * plane;
        for (std::int64_t j = 0; j < plane; ++j) {
          const double d = p[j] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      state.running_mean[ch] = static_cast<T>((1.0 - momentum) * state.running_mean[ch] + momentum * mean);
      state.running_var[ch] = static_cast<T>((1.0 - momentum) * state.running_var[ch] + momentum * unbiased);
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[ch] = static_cast<T>(is);
    const T g = gamma[ch], bt = beta[ch];
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t off = (i * c + ch) * plane;
      for (std::int64_t j = 0; j < plane; ++j) {
        const T xh = static_cast<T>((xd[off + j] - mean) * is);
        xhat[off + j] = xh;
        out[off + j] = g * xh + bt;
      }
    }
  }

  return make_result<T>(
      x.shape(), std::move(out), "batch_norm", {x, gamma, beta},
      [n, c, plane, count, mode, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::TensorNode<T>& node) {
        const T* gout = node.grad.data();
        const T* gam = node.inputs[1]->data.data();
        T* gx = detail::input_grad(node, 0);
        T* gg = detail::input_grad(node, 1);
        T* gb = detail::input_grad(node, 2);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t off = (i * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
              sum_g += gout[off + j];
              sum_gx += static_cast<double>(gout[off + j]) * xhat[off + j];
            }
          }
          if (gg) gg[ch] += static_cast<T>(sum_gx);
          if (gb) gb[ch] += static_cast<T>(sum_g);
          if (!gx) continue;
          const double scale = static_cast<double>(gam[ch]) * inv_std[ch];
          for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t off = (i * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
              if (mode == Mode::kTrain) {
                const double m = static_cast<double>(count);
                gx[off + j] += static_cast<T>(scale / m * (m * gout[off + j] - sum_g - xhat[off + j] * sum_gx));
              } else {
                gx[off + j] += static_cast<T>(scale * gout[off + j]);
              }
            }
          }
        }
      });
}

namespace detail {

template <typename T, typename Fwd, typename Deriv>
Tensor<T> pointwise(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result<T>(x.shape(), std::move(out), op, {x}, [deriv](TensorNode<T>& node) {
    T* gx = input_grad(node, 0);
    if (!gx) return;
    const auto& xin = node.inputs[0]->data;
    for (std::size_t i = 0; i < xin.size(); ++i) gx[i] += node.grad[i] * deriv(xin[i], node.data[i]);
  });
}

}  // namespace detail

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
  return detail::pointwise(
      x, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::pointwise(
      x, "relu", [](T v) { return v <= T(0) ? T(0) : v; }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::pointwise(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

enum class SetReduce { kSum, kMean, kMax };

// x [B,M,...] -> [B,1,...]; reduction over the set axis only.
// Max routes the gradient to the maximizer, ties going to the lowest index.
template <typename T>
Tensor<T> set_reduce(const Tensor<T>& x, SetReduce kind) {
  DSSDRV_CHECK(x.rank() >= 2, ShapeError, "set_reduce needs [B,M,...], got ", shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), m = x.dim(1);
  DSSDRV_CHECK(m >= 1, ShapeError, "set_reduce over an empty set");
  const std::int64_t inner = static_cast<std::int64_t>(x.numel()) / std::max<std::int64_t>(batch * m, 1);
  Shape out_shape = x.shape();
  out_shape[1] = 1;
  std::vector<T> out(static_cast<std::size_t>(batch * inner));
  std::vector<std::int32_t> argmax;
  const T* xd = x.data().data();
  if (kind == SetReduce::kMax) argmax.resize(out.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::size_t o = static_cast<std::size_t>(b * inner + i);
      if (kind == SetReduce::kMax) {
        T best = xd[(b * m) * inner + i];
        std::int32_t arg = 0;
        for (std::int64_t j = 1; j < m; ++j) {
          const T v = xd[(b * m + j) * inner + i];
          if (v > best) {
            best = v;
            arg = static_cast<std::int32_t>(j);
          }
        }
        out[o] = best;
        argmax[o] = arg;
      } else {
        T acc = T(0);
        for (std::int64_t j = 0; j < m; ++j) acc += xd[(b * m + j) * inner + i];
        out[o] = kind == SetReduce::kMean ? acc / static_cast<T>(m) : acc;
      }
    }
  }
  const char* name = kind == SetReduce::kMax ? "set_max" : (kind == SetReduce::kMean ? "set_mean" : "set_sum");
  return make_result<T>(
      std::move(out_shape), std::move(out), name, {x},
      [batch, m, inner, kind, argmax = std::move(argmax)](detail::TensorNode<T>& node) {
        T* gx = detail::input_grad(node, 0);
        if (!gx) return;
        const T scale = kind == SetReduce::kMean ? T(1) / static_cast<T>(m) : T(1);
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t i = 0; i < inner; ++i) {
            const std::size_t o = static_cast<std::size_t>(b * inner + i);
            const T g = node.grad[o];
            if (kind == SetReduce::kMax) {
              gx[(b * m + argmax[o]) * inner + i] += g;
            } else {
              for (std::int64_t j = 0; j < m; ++j) gx[(b * m + j) * inner + i] += g * scale;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  DSSDRV_CHECK(shape_numel(shape) == static_cast<std::int64_t>(x.numel()), ShapeError, "cannot reshape ",
               shape_str(x.shape()), " to ", shape_str(shape));
  return make_result<T>(std::move(shape), x.values(), "reshape", {x}, [](detail::TensorNode<T>& node) {
    if (T* gx = detail::input_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) gx[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  DSSDRV_CHECK(a.shape() == b.shape(), ShapeError, "add shape mismatch ", shape_str(a.shape()), " vs ",
               shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](detail::TensorNode<T>& node) {
    for (std::size_t k = 0; k < 2; ++k)
      if (T* g = detail::input_grad(node, k))
        for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  DSSDRV_CHECK(a.shape() == b.shape(), ShapeError, "sub shape mismatch ", shape_str(a.shape()), " vs ",
               shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [](detail::TensorNode<T>& node) {
    if (T* g = detail::input_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i];
    if (T* g = detail::input_grad(node, 1))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] -= node.grad[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return make_result<T>(x.shape(), std::move(out), "scale", {x}, [s](detail::TensorNode<T>& node) {
    if (T* g = detail::input_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i] * s;
  });
}

// x [B,M,...] + a [B,1,...], the second operand broadcast over the set axis.
template <typename T>
Tensor<T> add_set_broadcast(const Tensor<T>& x, const Tensor<T>& a) {
  DSSDRV_CHECK(x.rank() >= 2 && a.rank() == x.rank() && a.dim(0) == x.dim(0) && a.dim(1) == 1, ShapeError,
               "add_set_broadcast shape mismatch ", shape_str(x.shape()), " vs ", shape_str(a.shape()));
  for (std::size_t k = 2; k < x.rank(); ++k)
    DSSDRV_CHECK(a.dim(k) == x.dim(k), ShapeError, "add_set_broadcast shape mismatch ", shape_str(x.shape()),
                 " vs ", shape_str(a.shape()));
  const std::int64_t batch = x.dim(0), m = x.dim(1);
  const std::int64_t inner = static_cast<std::int64_t>(a.numel()) / std::max<std::int64_t>(batch, 1);
  std::vector<T> out(x.numel());
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t j = 0; j < m; ++j)
      for (std::int64_t i = 0; i < inner; ++i)
        out[(b * m + j) * inner + i] = x[(b * m + j) * inner + i] + a[b * inner + i];
  return make_result<T>(x.shape(), std::move(out), "add_set_broadcast", {x, a},
                        [batch, m, inner](detail::TensorNode<T>& node) {
                          if (T* g = detail::input_grad(node, 0))
                            for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i];
                          if (T* g = detail::input_grad(node, 1))
                            for (std::int64_t b = 0; b < batch; ++b)
                              for (std::int64_t j = 0; j < m; ++j)
                                for (std::int64_t i = 0; i < inner; ++i)
                                  g[b * inner + i] += node.grad[(b * m + j) * inner + i];
                        });
}

// Concatenation along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  DSSDRV_CHECK(a.rank() == b.rank() && axis < a.rank(), ShapeError, "concat rank mismatch");
  for (std::size_t k = 0; k < a.rank(); ++k)
    if (k != axis)
      DSSDRV_CHECK(a.dim(k) == b.dim(k), ShapeError, "concat shape mismatch ", shape_str(a.shape()), " vs ",
                   shape_str(b.shape()), " on axis ", axis);
  std::int64_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= a.dim(k);
  for (std::size_t k = axis + 1; k < a.rank(); ++k) inner *= a.dim(k);
  const std::int64_t ca = a.dim(axis) * inner, cb = b.dim(axis) * inner;
  Shape shape = a.shape();
  shape[axis] += b.dim(axis);
  std::vector<T> out(a.numel() + b.numel());
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + o * ca, ca, out.data() + o * (ca + cb));
    std::copy_n(b.data().data() + o * cb, cb, out.data() + o * (ca + cb) + ca);
  }
  return make_result<T>(std::move(shape), std::move(out), "concat", {a, b},
                        [outer, ca, cb](detail::TensorNode<T>& node) {
                          const T* g = node.grad.data();
                          if (T* ga = detail::input_grad(node, 0))
                            for (std::int64_t o = 0; o < outer; ++o)
                              for (std::int64_t i = 0; i < ca; ++i) ga[o * ca + i] += g[o * (ca + cb) + i];
                          if (T* gb = detail::input_grad(node, 1))
                            for (std::int64_t o = 0; o < outer; ++o)
                              for (std::int64_t i = 0; i < cb; ++i) gb[o * cb + i] += g[o * (ca + cb) + ca + i];
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return make_result<T>({}, {static_cast<T>(acc)}, "sum", {x}, [](detail::TensorNode<T>& node) {
    if (T* g = detail::input_grad(node, 0)) {
      const std::size_t n = node.inputs[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += node.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  DSSDRV_CHECK(x.numel() > 0, ShapeError, "mean of an empty tensor");
  const T inv = T(1) / static_cast<T>(x.numel());
  return scale(sum(x), inv);
}

// Mean of squared differences.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  DSSDRV_CHECK(a.shape() == b.shape(), ShapeError, "mse shape mismatch");
  DSSDRV_CHECK(a.numel() > 0, ShapeError, "mse of empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  const double n = static_cast<double>(a.numel());
  return make_result<T>({}, {static_cast<T>(acc / n)}, "mse", {a, b}, [n](detail::TensorNode<T>& node) {
    const auto& av = node.inputs[0]->data;
    const auto& bv = node.inputs[1]->data;
    const double g0 = node.grad[0] * 2.0 / n;
    T* ga = detail::input_grad(node, 0);
    T* gb = detail::input_grad(node, 1);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T d = static_cast<T>(g0 * (static_cast<double>(av[i]) - bv[i]));
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

}  // namespace dssdrv
