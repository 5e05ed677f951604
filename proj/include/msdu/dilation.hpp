#pragma once

// Dilated-kernel geometry and a direct-summation convolution used as the
// correctness oracle for the training-path convolution.
//
// Coordinates are origin-centred: for a kernel of side S, tap offsets run
// over [-(S-1)/2, +(S-1)/2]. A rate-r kernel places origin tap (i, j) at
// offset (i*r, j*r) of the expanded kernel, leaving r-1 zeros between taps.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "msdu/errors.hpp"
#include "msdu/tensor.hpp"

namespace msdu {

class Kernel2D {
 public:
  Kernel2D(int height, int width, std::vector<double> weights, int dilation_rate = 1)
      : height_(height), width_(width), weights_(std::move(weights)), rate_(dilation_rate) {
    if (height_ < 1 || width_ < 1 || height_ % 2 == 0 || width_ % 2 == 0) {
      throw InvalidKernelError("kernel sides must be odd and positive, got " +
                               std::to_string(height_) + "x" + std::to_string(width_));
    }
    if (weights_.size() != static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_)) {
      throw InvalidKernelError("kernel expects " + std::to_string(height_ * width_) +
                               " weights, got " + std::to_string(weights_.size()));
    }
    for (double w : weights_) {
      if (!std::isfinite(w)) throw InvalidKernelError("kernel weights must be finite");
    }
    if (rate_ < 1) {
      throw InvalidRateError("dilation rate must be >= 1, got " + std::to_string(rate_));
    }
  }

  static Kernel2D square(int side, std::vector<double> weights, int dilation_rate = 1) {
    return Kernel2D(side, side, std::move(weights), dilation_rate);
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int dilation_rate() const noexcept { return rate_; }
  const std::vector<double>& weights() const noexcept { return weights_; }

  // Row-major access in array coordinates (0..height-1, 0..width-1).
  double at(int row, int col) const { return weights_[static_cast<std::size_t>(row * width_ + col)]; }

  // Access in origin-centred coordinates.
  double centered(int i, int j) const { return at(i + height_ / 2, j + width_ / 2); }

  // Side length covered on the input once dilation is applied.
  int span_height() const noexcept { return (height_ - 1) * rate_ + 1; }
  int span_width() const noexcept { return (width_ - 1) * rate_ + 1; }

  friend bool operator==(const Kernel2D&, const Kernel2D&) = default;

 private:
  int height_;
  int width_;
  std::vector<double> weights_;
  int rate_;
};

// Number of zeros inserted between adjacent taps.
inline int dilation_factor(int rate) {
  if (rate < 1) throw InvalidRateError("dilation rate must be >= 1, got " + std::to_string(rate));
  return rate - 1;
}

inline int dilated_size(int origin_size, int rate) {
  if (origin_size < 1 || origin_size % 2 == 0) {
    throw InvalidKernelError("origin kernel size must be odd and positive, got " +
                             std::to_string(origin_size));
  }
  return origin_size + (origin_size - 1) * dilation_factor(rate);
}

// Zero-inserted dense equivalent of a dilated kernel; the result has rate 1.
inline Kernel2D expand_kernel(const Kernel2D& origin) {
  const int r = origin.dilation_rate();
  const int out_h = dilated_size(origin.height(), r);
  const int out_w = dilated_size(origin.width(), r);
  std::vector<double> out(static_cast<std::size_t>(out_h) * static_cast<std::size_t>(out_w), 0.0);
  const int half_h = origin.height() / 2;
  const int half_w = origin.width() / 2;
  for (int i = -half_h; i <= half_h; ++i) {
    for (int j = -half_w; j <= half_w; ++j) {
      const int x = i * r + out_h / 2;
      const int y = j * r + out_w / 2;
      out[static_cast<std::size_t>(x * out_w + y)] = origin.centered(i, j);
    }
  }
  return Kernel2D(out_h, out_w, std::move(out), 1);
}

enum class Padding { same, valid };

// Direct-summation cross-correlation of an H x W x C image with a single
// kernel applied to every channel independently. Input taps are sampled at
// spacing dilation_rate. "same" pads symmetrically with zeros by half the
// dilated span, so the output has ceil(H / stride) rows.
inline Tensor<double> conv2d_reference(const Tensor<double>& image, const Kernel2D& kernel,
                                       int stride, Padding padding) {
  if (image.rank() != 3) {
    throw ShapeError("conv2d_reference expects an HxWxC image, got " + shape_string(image.shape()));
  }
  if (stride < 1) throw ConfigError("stride must be >= 1, got " + std::to_string(stride));
  const int h = static_cast<int>(image.dim(0));
  const int w = static_cast<int>(image.dim(1));
  const int c = static_cast<int>(image.dim(2));
  const int span_h = kernel.span_height();
  const int span_w = kernel.span_width();
  const int pad_h = padding == Padding::same ? span_h / 2 : 0;
  const int pad_w = padding == Padding::same ? span_w / 2 : 0;
  if (h + 2 * pad_h < span_h || w + 2 * pad_w < span_w) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                     " is smaller than the effective kernel span " + std::to_string(span_h) + "x" +
                     std::to_string(span_w));
  }
  const int out_h = (h + 2 * pad_h - span_h) / stride + 1;
  const int out_w = (w + 2 * pad_w - span_w) / stride + 1;
  const int r = kernel.dilation_rate();

  Tensor<double> out({static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w),
                      static_cast<std::size_t>(c)});
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int ky = 0; ky < kernel.height(); ++ky) {
          const int iy = oy * stride - pad_h + ky * r;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel.width(); ++kx) {
            const int ix = ox * stride - pad_w + kx * r;
            if (ix < 0 || ix >= w) continue;
            acc += kernel.at(ky, kx) * image(iy, ix, ch);
          }
        }
        out(oy, ox, ch) = acc;
      }
    }
  }
  return out;
}

}  // namespace msdu
