#pragma once

// Image files <-> tensors, backed by OpenCV's codecs. Colour images are
// returned as H x W x 3 RGB bytes, masks and maps as H x W bytes.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "msdu/errors.hpp"
#include "msdu/tensor.hpp"

namespace msdu {

namespace detail {

inline cv::Mat read_mat(const std::filesystem::path& path, int flags) {
  if (!std::filesystem::is_regular_file(path)) throw IoError("no such image file: " + path.string());
  cv::Mat m = cv::imread(path.string(), flags);
  if (m.empty()) throw IoError("cannot decode image: " + path.string());
  return m;
}

}  // namespace detail

inline Tensor<std::uint8_t> read_rgb(const std::filesystem::path& path) {
  cv::Mat bgr = detail::read_mat(path, cv::IMREAD_COLOR);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Tensor<std::uint8_t> out({std::size_t(rgb.rows), std::size_t(rgb.cols), 3});
  for (int y = 0; y < rgb.rows; ++y) std::copy_n(rgb.ptr<std::uint8_t>(y), rgb.cols * 3, &out(std::size_t(y), 0, 0));
  return out;
}

inline Tensor<std::uint8_t> read_gray(const std::filesystem::path& path) {
  cv::Mat g = detail::read_mat(path, cv::IMREAD_GRAYSCALE);
  Tensor<std::uint8_t> out({std::size_t(g.rows), std::size_t(g.cols)});
  for (int y = 0; y < g.rows; ++y) std::copy_n(g.ptr<std::uint8_t>(y), g.cols, &out(std::size_t(y), 0));
  return out;
}

// Writes H x W bytes (grey) or H x W x 3 RGB bytes; the format follows the
// file extension.
inline void write_image(const std::filesystem::path& path, const Tensor<std::uint8_t>& img) {
  if (img.rank() != 2 && !(img.rank() == 3 && img.dim(2) == 3)) {
    throw ShapeError("write_image: expected H x W or H x W x 3, got " + shape_string(img.shape()));
  }
  const int h = static_cast<int>(img.dim(0)), w = static_cast<int>(img.dim(1));
  cv::Mat m(h, w, img.rank() == 2 ? CV_8UC1 : CV_8UC3, const_cast<std::uint8_t*>(img.data()));
  cv::Mat out;
  if (img.rank() == 3) cv::cvtColor(m, out, cv::COLOR_RGB2BGR);
  else out = m;
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), out);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write image " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write image " + path.string());
}

// Map in [0,1] -> bytes round(255 v), clamped.
template <typename T>
Tensor<std::uint8_t> quantize_map(const Tensor<T>& map) {
  Tensor<std::uint8_t> out(map.shape());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = std::clamp(static_cast<double>(map[i]), 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  return out;
}

// Bilinear resize of an H x W real map (half-pixel centres).
template <typename T>
Tensor<T> resize_map(const Tensor<T>& map, std::size_t out_h, std::size_t out_w) {
  const int depth = sizeof(T) == 4 ? CV_32F : CV_64F;
  cv::Mat src(static_cast<int>(map.dim(0)), static_cast<int>(map.dim(1)), depth, const_cast<T*>(map.data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(static_cast<int>(out_w), static_cast<int>(out_h)), 0, 0, cv::INTER_LINEAR);
  Tensor<T> out({out_h, out_w});
  for (int y = 0; y < dst.rows; ++y) std::copy_n(dst.ptr<T>(y), dst.cols, &out(std::size_t(y), 0));
  return out;
}

}  // namespace msdu
