#pragma once

// Synthetic blur-detection samples: a sharp random texture with one region
// replaced by its box-blurred version. The mask marks the blurred region.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "msdu/dataset.hpp"

namespace msdu::fixture {

inline BlurSample synthetic_sample(const std::string& id, std::size_t h, std::size_t w, int shape,
                                   std::uint64_t seed, BlurKind kind = BlurKind::defocus) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 255);
  Tensor<std::uint8_t> sharp({h, w, 3});
  for (auto& v : sharp.values()) v = static_cast<std::uint8_t>(px(rng));

  Tensor<std::uint8_t> blurred({h, w, 3});
  const int r = 2;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        int sum = 0, n = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const long yy = long(y) + dy, xx = long(x) + dx;
            if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(w)) continue;
            sum += sharp(std::size_t(yy), std::size_t(xx), c);
            ++n;
          }
        blurred(y, x, c) = static_cast<std::uint8_t>(sum / n);
      }

  Tensor<std::uint8_t> mask({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = double(y) / double(h), fx = double(x) / double(w);
      bool inside = false;
      switch (shape % 4) {
        case 0: inside = fx < 0.5; break;
        case 1: inside = fy >= 0.5; break;
        case 2: inside = (fx - 0.5) * (fx - 0.5) + (fy - 0.5) * (fy - 0.5) < 0.09; break;
        default: inside = fx + fy > 1.0; break;
      }
      mask(y, x) = inside ? 1 : 0;
    }

  Tensor<std::uint8_t> image({h, w, 3});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) image(y, x, c) = mask(y, x) ? blurred(y, x, c) : sharp(y, x, c);
  return {id, std::move(image), std::move(mask), kind};
}

inline std::vector<BlurSample> four_samples(std::size_t h = 32, std::size_t w = 32) {
  std::vector<BlurSample> out;
  for (int i = 0; i < 4; ++i)
    out.push_back(synthetic_sample("sample" + std::to_string(i), h, w, i, 100 + std::uint64_t(i)));
  return out;
}

template <typename T>
std::vector<PreparedSample<T>> prepared(const std::vector<BlurSample>& samples, std::size_t size) {
  std::vector<PreparedSample<T>> out;
  for (const auto& s : samples) out.push_back(preprocess<T>(s, size));
  return out;
}

}  // namespace msdu::fixture
