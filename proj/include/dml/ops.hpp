#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "dml/tensor.hpp"

namespace dml {

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, const Conv2dParams& p) {
  const std::size_t extent = (kernel - 1) * p.dilation + 1;
  return (in + 2 * p.padding - extent) / p.stride + 1;
}

struct ConvGeometry {
  std::size_t c_in, h, w, kh, kw, h_out, w_out;
  Conv2dParams p;

  std::size_t rows() const { return c_in * kh * kw; }
  std::size_t cols() const { return h_out * w_out; }
  bool pointwise() const { return kh == 1 && kw == 1 && p.stride == 1 && p.padding == 0; }
};

// Unrolls one sample (c_in, h, w) into a (c_in*kh*kw, h_out*w_out) matrix.
template <typename T>
void im2col(const T* src, const ConvGeometry& g, T* dst) {
  const auto pad = static_cast<std::ptrdiff_t>(g.p.padding);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const T* plane = src + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = dst + ((c * g.kh + ky) * g.kw + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.p.stride + ky * g.p.dilation) - pad;
          T* out = row + oy * g.w_out;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.w_out, T(0));
            continue;
          }
          const T* in_row = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.p.stride + kx * g.p.dilation) - pad;
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : in_row[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void load_columns(const T* src, const ConvGeometry& g, T* dst) {
  if (g.pointwise()) std::copy(src, src + g.rows() * g.cols(), dst);
  else im2col(src, g, dst);
}

// Adjoint of im2col: scatters-adds columns back onto the input sample.
template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dst) {
  const auto pad = static_cast<std::ptrdiff_t>(g.p.padding);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    T* plane = dst + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.p.stride + ky * g.p.dilation) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* in_row = plane + static_cast<std::size_t>(iy) * g.w;
          const T* in = row + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.p.stride + kx * g.p.dilation) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) in_row[ix] += in[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> make_output(Shape shape, bool differentiable) {
  Tensor<T> out(shape);
  if (differentiable) out.mark_requires_grad();
  return out;
}

}  // namespace detail

/// 2-D cross-correlation with zero padding and dilation. Weight is
/// (C_out, C_in, kH, kW); bias holds C_out values in any rank-4 layout.
template <typename T>
Tensor<T> conv2d(Graph<T>& graph, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dParams p) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (p.stride == 0 || p.dilation == 0) throw ConfigError("conv2d: stride and dilation must be positive");
  if (ws.c != is.c)
    throw ConfigError(detail::concat("conv2d: input has ", is.c, " channels but weight expects C_in=", ws.c));
  if (bias.numel() != ws.n)
    throw ConfigError(detail::concat("conv2d: bias has ", bias.numel(), " values but C_out=", ws.n));
  const std::size_t ext_h = (ws.h - 1) * p.dilation + 1;
  const std::size_t ext_w = (ws.w - 1) * p.dilation + 1;
  if (ext_h > is.h + 2 * p.padding || ext_w > is.w + 2 * p.padding)
    throw ConfigError(detail::concat("conv2d: effective kernel ", ext_h, "x", ext_w, " exceeds padded input ",
                                     is.h + 2 * p.padding, "x", is.w + 2 * p.padding));

  const detail::ConvGeometry g{is.c, is.h, is.w, ws.h, ws.w, detail::conv_out_size(is.h, ws.h, p),
                               detail::conv_out_size(is.w, ws.w, p), p};
  const std::size_t c_out = ws.n;
  const bool diff = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
  Tensor<T> out = detail::make_output<T>(Shape{is.n, c_out, g.h_out, g.w_out}, diff);

  // Operands are copied into Eigen-owned (aligned) matrices so that the
  // vectorized kernels, and hence the rounding, depend only on the shapes.
  const detail::RowMatrix<T> wmat = detail::ConstMatrixMap<T>(weight.data().data(), c_out, g.rows());
  detail::RowMatrix<T> cmat(g.rows(), g.cols());
  detail::RowMatrix<T> omat(c_out, g.cols());
  for (std::size_t n = 0; n < is.n; ++n) {
    detail::load_columns(input.data().data() + n * is.c * is.h * is.w, g, cmat.data());
    omat.noalias() = wmat * cmat;
    T* dst = out.data().data() + n * c_out * g.cols();
    for (std::size_t co = 0; co < c_out; ++co)
      for (std::size_t i = 0; i < g.cols(); ++i) dst[co * g.cols() + i] = omat(co, i) + bias[co];
  }
  check_finite<T>(out.data(), "conv2d");

  if (diff) {
    graph.record("conv2d", out, [input = input, weight = weight, bias = bias, out, g, c_out]() mutable {
      const Shape& is = input.shape();
      const std::size_t plane_in = is.c * is.h * is.w;
      const detail::RowMatrix<T> wmat = detail::ConstMatrixMap<T>(weight.data().data(), c_out, g.rows());
      detail::RowMatrix<T> cmat(g.rows(), g.cols());
      detail::RowMatrix<T> gout(c_out, g.cols());
      detail::RowMatrix<T> dcols(g.rows(), g.cols());
      detail::RowMatrix<T> gw = detail::RowMatrix<T>::Zero(c_out, g.rows());
      for (std::size_t n = 0; n < is.n; ++n) {
        const T* go = out.grad().data() + n * c_out * g.cols();
        std::copy(go, go + c_out * g.cols(), gout.data());
        if (bias.requires_grad()) {
          auto gb = bias.grad();
          for (std::size_t co = 0; co < c_out; ++co) {
            T acc = T(0);
            for (std::size_t i = 0; i < g.cols(); ++i) acc += go[co * g.cols() + i];
            gb[co] += acc;
          }
        }
        if (weight.requires_grad()) {
          detail::load_columns(input.data().data() + n * plane_in, g, cmat.data());
          gw.noalias() += gout * cmat.transpose();
        }
        if (input.requires_grad()) {
          dcols.noalias() = wmat.transpose() * gout;
          T* gin = input.grad().data() + n * plane_in;
          if (g.pointwise()) {
            for (std::size_t i = 0; i < plane_in; ++i) gin[i] += dcols.data()[i];
          } else {
            detail::col2im_add(dcols.data(), g, gin);
          }
        }
      }
      if (weight.requires_grad()) {
        auto dst = weight.grad();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gw.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Graph<T>& graph, const Tensor<T>& input) {
  Tensor<T> out = detail::make_output<T>(input.shape(), input.requires_grad());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  if (graph.tracking_branches())
    for (std::size_t i = 0; i < x.size(); ++i) graph.mix_branch(x[i] > T(0) ? i : ~i);
  if (input.requires_grad()) {
    graph.record("relu", out, [input = input, out]() mutable {
      auto x = input.data();
      auto gy = out.grad();
      auto gx = input.grad();
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > T(0)) gx[i] += gy[i];
    });
  }
  return out;
}

/// Max pooling with -inf padding. Ties resolve to the lowest linear index
/// inside the window; backward routes each output grad to that element.
template <typename T>
Tensor<T> maxpool2d(Graph<T>& graph, const Tensor<T>& input, std::size_t kernel, std::size_t stride,
                    std::size_t padding) {
  if (kernel == 0 || stride == 0) throw ConfigError("maxpool2d: kernel and stride must be positive");
  const Shape& is = input.shape();
  if (kernel > is.h + 2 * padding || kernel > is.w + 2 * padding)
    throw ConfigError(detail::concat("maxpool2d: kernel ", kernel, " exceeds padded input ", is.h + 2 * padding,
                                     "x", is.w + 2 * padding));
  const std::size_t h_out = (is.h + 2 * padding - kernel) / stride + 1;
  const std::size_t w_out = (is.w + 2 * padding - kernel) / stride + 1;
  // Every window must overlap the input in both directions.
  if ((h_out - 1) * stride >= is.h + padding || (w_out - 1) * stride >= is.w + padding || padding >= kernel)
    throw ConfigError(detail::concat("maxpool2d: kernel ", kernel, " stride ", stride, " padding ", padding,
                                     " yields a window entirely outside the input"));

  Tensor<T> out = detail::make_output<T>(Shape{is.n, is.c, h_out, w_out}, input.requires_grad());
  std::vector<std::size_t> argmax(out.numel());
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  auto x = input.data();
  auto y = out.data();
  for (std::size_t nc = 0; nc < is.n * is.c; ++nc) {
    const std::size_t in_base = nc * is.h * is.w;
    for (std::size_t oy = 0; oy < h_out; ++oy) {
      const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * stride) - pad;
      const std::size_t ylo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(y0, 0));
      const std::size_t yhi = std::min<std::size_t>(static_cast<std::size_t>(y0 + static_cast<std::ptrdiff_t>(kernel)), is.h);
      for (std::size_t ox = 0; ox < w_out; ++ox) {
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox * stride) - pad;
        const std::size_t xlo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(x0, 0));
        const std::size_t xhi =
            std::min<std::size_t>(static_cast<std::size_t>(x0 + static_cast<std::ptrdiff_t>(kernel)), is.w);
        std::size_t best = in_base + ylo * is.w + xlo;
        for (std::size_t iy = ylo; iy < yhi; ++iy)
          for (std::size_t ix = xlo; ix < xhi; ++ix) {
            const std::size_t idx = in_base + iy * is.w + ix;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (nc * h_out + oy) * w_out + ox;
        y[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  if (graph.tracking_branches())
    for (std::size_t a : argmax) graph.mix_branch(a);
  if (input.requires_grad()) {
    graph.record("maxpool2d", out, [input = input, out, argmax = std::move(argmax)]() mutable {
      auto gy = out.grad();
      auto gx = input.grad();
      for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest(Graph<T>& graph, const Tensor<T>& input, std::size_t factor) {
  if (factor == 0) throw ConfigError("upsample_nearest: factor must be positive");
  const Shape& is = input.shape();
  const std::size_t ho = is.h * factor, wo = is.w * factor;
  Tensor<T> out = detail::make_output<T>(Shape{is.n, is.c, ho, wo}, input.requires_grad());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t nc = 0; nc < is.n * is.c; ++nc)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox)
        y[(nc * ho + oy) * wo + ox] = x[(nc * is.h + oy / factor) * is.w + ox / factor];
  if (input.requires_grad()) {
    graph.record("upsample_nearest", out, [input = input, out, factor]() mutable {
      const Shape& is = input.shape();
      const std::size_t ho = is.h * factor, wo = is.w * factor;
      auto gy = out.grad();
      auto gx = input.grad();
      for (std::size_t nc = 0; nc < is.n * is.c; ++nc)
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox)
            gx[(nc * is.h + oy / factor) * is.w + ox / factor] += gy[(nc * ho + oy) * wo + ox];
    });
  }
  return out;
}

/// Left-to-right elementwise sum: ((a + b) + c) + ...
template <typename T>
Tensor<T> elementwise_sum(Graph<T>& graph, const std::vector<Tensor<T>>& inputs) {
  if (inputs.empty()) throw ConfigError("elementwise_sum: needs at least one input");
  const Shape shape = inputs.front().shape();
  bool diff = false;
  for (const auto& t : inputs) {
    if (!(t.shape() == shape))
      throw ConfigError(detail::concat("elementwise_sum: shape ", t.shape(), " does not match ", shape));
    diff = diff || t.requires_grad();
  }
  Tensor<T> out = detail::make_output<T>(shape, diff);
  auto y = out.data();
  std::copy(inputs.front().data().begin(), inputs.front().data().end(), y.begin());
  for (std::size_t k = 1; k < inputs.size(); ++k) {
    auto x = inputs[k].data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  }
  check_finite<T>(out.data(), "elementwise_sum");
  if (diff) {
    graph.record("elementwise_sum", out, [inputs = inputs, out]() mutable {
      auto gy = out.grad();
      for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        auto gx = t.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Graph<T>& graph, const Tensor<T>& input, T factor) {
  Tensor<T> out = detail::make_output<T>(input.shape(), input.requires_grad());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = factor * x[i];
  if (input.requires_grad()) {
    graph.record("scale", out, [input = input, out, factor]() mutable {
      auto gy = out.grad();
      auto gx = input.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += factor * gy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(Graph<T>& graph, const Tensor<T>& input) {
  Tensor<T> out = detail::make_output<T>(Shape{}, input.requires_grad());
  T acc = T(0);
  for (T v : input.data()) acc += v;
  out[0] = acc;
  if (input.requires_grad()) {
    graph.record("sum_all", out, [input = input, out]() mutable {
      const T g = out.grad()[0];
      for (auto& gx : input.grad()) gx += g;
    });
  }
  return out;
}

/// Σ coeffs[i]·inputs[i] over scalars, accumulated left to right.
template <typename T>
Tensor<T> linear_combination(Graph<T>& graph, const std::vector<Tensor<T>>& inputs, const std::vector<T>& coeffs) {
  if (inputs.empty() || inputs.size() != coeffs.size())
    throw ConfigError("linear_combination: needs matching non-empty inputs and coefficients");
  bool diff = false;
  T acc = T(0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].numel() != 1) throw ConfigError("linear_combination: inputs must be scalars");
    acc += coeffs[i] * inputs[i][0];
    diff = diff || inputs[i].requires_grad();
  }
  Tensor<T> out = detail::make_output<T>(Shape{}, diff);
  out[0] = acc;
  check_finite<T>(out.data(), "linear_combination");
  if (diff) {
    graph.record("linear_combination", out, [inputs = inputs, coeffs, out]() mutable {
      const T g = out.grad()[0];
      for (std::size_t i = 0; i < inputs.size(); ++i)
        if (inputs[i].requires_grad()) inputs[i].grad()[0] += coeffs[i] * g;
    });
  }
  return out;
}

}  // namespace dml
