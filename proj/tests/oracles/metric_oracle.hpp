#pragma once

// Direct per-pixel loops, written without the library's histogram path.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

struct Image {
  std::vector<double> map;
  std::vector<int> gt;
};

inline bool selected(double v, int t) { return std::floor(255.0 * v + 0.5) >= t; }

inline double precision(const std::vector<Image>& images, int t) {
  double sel = 0, hit = 0;
  for (const auto& im : images)
    for (std::size_t i = 0; i < im.map.size(); ++i) {
      if (!selected(im.map[i], t)) continue;
      sel += 1;
      if (im.gt[i] == 1) hit += 1;
    }
  return sel == 0 ? 1.0 : hit / sel;
}

inline double recall(const std::vector<Image>& images, int t) {
  double pos = 0, hit = 0;
  for (const auto& im : images)
    for (std::size_t i = 0; i < im.map.size(); ++i) {
      if (im.gt[i] != 1) continue;
      pos += 1;
      if (selected(im.map[i], t)) hit += 1;
    }
  return pos == 0 ? 1.0 : hit / pos;
}

inline double f(double p, double r, double beta2) {
  if (beta2 * p + r == 0) return 0;
  return (1 + beta2) * p * r / (beta2 * p + r);
}

inline double mae(const Image& im) {
  double s = 0;
  for (std::size_t i = 0; i < im.map.size(); ++i) s += std::fabs(double(im.gt[i]) - im.map[i]);
  return s / double(im.map.size());
}

}  // namespace oracle
