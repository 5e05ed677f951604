#pragma once

// Forward and backward kernels for the layers the network is built from.
// Feature maps are single-sample C x H x W tensors. Convolution lowers to
// im2col + GEMM; the direct-summation oracle in dilation.hpp checks it.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "msdu/errors.hpp"
#include "msdu/tensor.hpp"

namespace msdu {

struct ConvGeometry {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  int span() const noexcept { return (kernel - 1) * dilation + 1; }
  int out_size(int in) const noexcept { return (in + 2 * padding - span()) / stride + 1; }

  // Zero padding that keeps a stride-1 output the same size as the input.
  static int same_padding(int kernel, int dilation) { return ((kernel - 1) * dilation) / 2; }

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void check_feature(const Tensor<T>& x, int channels, const char* what) {
  if (x.rank() != 3 || static_cast<int>(x.dim(0)) != channels) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(channels) +
                     " x H x W input, received " + shape_string(x.shape()));
  }
}

template <typename T>
RowMatrix<T> im2col(const Tensor<T>& x, const ConvGeometry& g, int out_h, int out_w) {
  const int h = static_cast<int>(x.dim(1));
  const int w = static_cast<int>(x.dim(2));
  const int k = g.kernel;
  RowMatrix<T> cols(g.in_channels * k * k, out_h * out_w);
  for (int c = 0; c < g.in_channels; ++c) {
    const T* plane = x.data() + static_cast<std::ptrdiff_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols.data() + static_cast<std::ptrdiff_t>((c * k + ky) * k + kx) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky * g.dilation;
          T* dst = row + static_cast<std::ptrdiff_t>(oy) * out_w;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + out_w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::ptrdiff_t>(iy) * w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx * g.dilation;
            dst[ox] = (ix < 0 || ix >= w) ? T{0} : src[ix];
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im_add(const RowMatrix<T>& cols, const ConvGeometry& g, int out_h, int out_w,
                Tensor<T>& dx) {
  const int h = static_cast<int>(dx.dim(1));
  const int w = static_cast<int>(dx.dim(2));
  const int k = g.kernel;
  for (int c = 0; c < g.in_channels; ++c) {
    T* plane = dx.data() + static_cast<std::ptrdiff_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row =
            cols.data() + static_cast<std::ptrdiff_t>((c * k + ky) * k + kx) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky * g.dilation;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::ptrdiff_t>(oy) * out_w;
          T* dst = plane + static_cast<std::ptrdiff_t>(iy) * w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx * g.dilation;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// weight: out x in x k x k, bias: out.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         const ConvGeometry& g) {
  detail::check_feature(x, g.in_channels, "conv2d");
  const int h = static_cast<int>(x.dim(1));
  const int w = static_cast<int>(x.dim(2));
  const int out_h = g.out_size(h);
  const int out_w = g.out_size(w);
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("conv2d: input " + shape_string(x.shape()) + " smaller than kernel span " +
                     std::to_string(g.span()));
  }
  const auto cols = detail::im2col(x, g, out_h, out_w);
  Tensor<T> y({static_cast<std::size_t>(g.out_channels), static_cast<std::size_t>(out_h),
               static_cast<std::size_t>(out_w)});
  detail::ConstMapRM<T> wm(weight.data(), g.out_channels, g.in_channels * g.kernel * g.kernel);
  detail::MapRM<T> ym(y.data(), g.out_channels, out_h * out_w);
  ym.noalias() = wm * cols;
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bm(bias.data(), g.out_channels);
  ym.colwise() += bm;
  return y;
}

// Accumulates weight/bias gradients and returns the input gradient.
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                          const ConvGeometry& g, Tensor<T>& dweight, Tensor<T>& dbias) {
  const int out_h = static_cast<int>(dy.dim(1));
  const int out_w = static_cast<int>(dy.dim(2));
  const int kk = g.in_channels * g.kernel * g.kernel;
  const auto cols = detail::im2col(x, g, out_h, out_w);
  detail::ConstMapRM<T> dym(dy.data(), g.out_channels, out_h * out_w);
  detail::MapRM<T> dwm(dweight.data(), g.out_channels, kk);
  dwm.noalias() += dym * cols.transpose();
  const std::size_t plane = dy.dim(1) * dy.dim(2);
  for (std::size_t co = 0; co < std::size_t(g.out_channels); ++co) {
    T s{0};
    for (std::size_t p = 0; p < plane; ++p) s += dy[co * plane + p];
    dbias[co] += s;
  }
  detail::ConstMapRM<T> wm(weight.data(), g.out_channels, kk);
  detail::RowMatrix<T> dcols = wm.transpose() * dym;
  Tensor<T> dx(x.shape());
  detail::col2im_add(dcols, g, out_h, out_w, dx);
  return dx;
}

// 2x2 stride-2 transposed convolution. weight: in x out x 2 x 2, bias: out.
template <typename T>
Tensor<T> up_conv_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                          int in_channels, int out_channels) {
  detail::check_feature(x, in_channels, "up_conv");
  const int h = static_cast<int>(x.dim(1));
  const int w = static_cast<int>(x.dim(2));
  Tensor<T> y({static_cast<std::size_t>(out_channels), static_cast<std::size_t>(2 * h),
               static_cast<std::size_t>(2 * w)});
  detail::ConstMapRM<T> xm(x.data(), in_channels, h * w);
  detail::RowMatrix<T> w_ab(in_channels, out_channels);
  detail::RowMatrix<T> y_ab(out_channels, h * w);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      for (int ci = 0; ci < in_channels; ++ci)
        for (int co = 0; co < out_channels; ++co) w_ab(ci, co) = weight(ci, co, a, b);
      y_ab.noalias() = w_ab.transpose() * xm;
      for (int co = 0; co < out_channels; ++co)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j)
            y(co, 2 * i + a, 2 * j + b) = y_ab(co, i * w + j) + bias[static_cast<std::size_t>(co)];
    }
  }
  return y;
}

template <typename T>
Tensor<T> up_conv_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                           int in_channels, int out_channels, Tensor<T>& dweight,
                           Tensor<T>& dbias) {
  const int h = static_cast<int>(x.dim(1));
  const int w = static_cast<int>(x.dim(2));
  detail::ConstMapRM<T> xm(x.data(), in_channels, h * w);
  Tensor<T> dx(x.shape());
  detail::MapRM<T> dxm(dx.data(), in_channels, h * w);
  detail::RowMatrix<T> w_ab(in_channels, out_channels);
  detail::RowMatrix<T> dy_ab(out_channels, h * w);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      for (int co = 0; co < out_channels; ++co)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) dy_ab(co, i * w + j) = dy(co, 2 * i + a, 2 * j + b);
      for (int ci = 0; ci < in_channels; ++ci)
        for (int co = 0; co < out_channels; ++co) w_ab(ci, co) = weight(ci, co, a, b);
      const detail::RowMatrix<T> dw_ab = xm * dy_ab.transpose();
      for (int ci = 0; ci < in_channels; ++ci)
        for (int co = 0; co < out_channels; ++co) dweight(ci, co, a, b) += dw_ab(ci, co);
      dxm.noalias() += w_ab * dy_ab;
    }
  }
  for (int co = 0; co < out_channels; ++co) {
    T s{0};
    for (int a = 0; a < 2 * h * 2 * w; ++a)
      s += dy[static_cast<std::size_t>(co) * 4 * h * w + static_cast<std::size_t>(a)];
    dbias[static_cast<std::size_t>(co)] += s;
  }
  return dx;
}

// 2x2 stride-2 max pooling; `argmax` receives the winning offset (0..3) per
// output element, first maximum wins on ties.
template <typename T>
Tensor<T> max_pool_forward(const Tensor<T>& x, std::vector<std::uint8_t>& argmax) {
  const std::size_t c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  if (x.dim(1) % 2 || x.dim(2) % 2) {
    throw ShapeError("max_pool: spatial dims must be even, received " + shape_string(x.shape()));
  }
  Tensor<T> y({c, h, w});
  argmax.assign(y.size(), 0);
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j, ++o) {
        T best = x(ch, 2 * i, 2 * j);
        std::uint8_t arg = 0;
        for (std::uint8_t q = 1; q < 4; ++q) {
          const T v = x(ch, 2 * i + q / 2, 2 * j + q % 2);
          if (v > best) {
            best = v;
            arg = q;
          }
        }
        y[o] = best;
        argmax[o] = arg;
      }
  return y;
}

template <typename T>
Tensor<T> max_pool_backward(const Shape& in_shape, const std::vector<std::uint8_t>& argmax,
                            const Tensor<T>& dy) {
  Tensor<T> dx(in_shape);
  const std::size_t c = dy.dim(0), h = dy.dim(1), w = dy.dim(2);
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j, ++o) {
        const std::uint8_t q = argmax[o];
        dx(ch, 2 * i + q / 2, 2 * j + q % 2) += dy[o];
      }
  return dx;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat: spatial dims differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor<T> y({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.values().begin(), a.values().end(), y.data());
  std::copy(b.values().begin(), b.values().end(), y.data() + a.size());
  return y;
}

// Per-pixel softmax over the channel axis of a C x H x W tensor.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const std::size_t c = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  Tensor<T> p(logits.shape());
  for (std::size_t i = 0; i < hw; ++i) {
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < c; ++k) m = std::max(m, logits[k * hw + i]);
    T s{0};
    for (std::size_t k = 0; k < c; ++k) {
      const T e = std::exp(logits[k * hw + i] - m);
      p[k * hw + i] = e;
      s += e;
    }
    for (std::size_t k = 0; k < c; ++k) p[k * hw + i] /= s;
  }
  return p;
}

}  // namespace msdu
