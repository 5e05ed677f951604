#pragma once

// In-memory blur-detection samples, the stratified split, flip augmentation
// and fixed-size preprocessing. File loading lives in dataset_loader.hpp so
// this header stays free of image-codec dependencies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "msdu/errors.hpp"
#include "msdu/tensor.hpp"

namespace msdu {

enum class BlurKind { defocus, motion, unknown };

inline std::string_view to_string(BlurKind k) {
  switch (k) {
    case BlurKind::defocus: return "defocus";
    case BlurKind::motion: return "motion";
    case BlurKind::unknown: return "unknown";
  }
  return "?";
}

struct BlurSample {
  std::string id;
  Tensor<std::uint8_t> image;  // H x W x 3
  Tensor<std::uint8_t> mask;   // H x W, 1 = blurred
  BlurKind kind = BlurKind::unknown;

  std::size_t height() const { return image.dim(0); }
  std::size_t width() const { return image.dim(1); }

  // Throws ShapeError tagged with the sample id.
  void validate() const {
    if (image.rank() != 3 || image.dim(2) != 3) {
      throw ShapeError(id + ": image must be H x W x 3, got " + shape_string(image.shape()));
    }
    if (mask.rank() != 2 || mask.dim(0) != image.dim(0) || mask.dim(1) != image.dim(1)) {
      throw ShapeError(id + ": mask " + shape_string(mask.shape()) + " does not match image " +
                       shape_string(image.shape()));
    }
    for (auto v : mask.values())
      if (v > 1) throw ShapeError(id + ": mask values must be 0 or 1");
  }
};

// Network-ready pair: C x S x S image in [0,1] and S x S binary mask.
template <typename T>
struct PreparedSample {
  std::string id;
  Tensor<T> image;
  Tensor<std::uint8_t> mask;
};

struct DatasetSplit {
  std::vector<std::size_t> train;  // indices into the sample list
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
  bool ratio_preserved = false;
};

namespace detail {

// Apportions `total` across groups proportionally to their sizes (largest
// remainder, ties broken by group order).
inline std::vector<std::size_t> apportion(const std::vector<std::size_t>& sizes, std::size_t total) {
  std::size_t n = 0;
  for (auto s : sizes) n += s;
  std::vector<std::size_t> out(sizes.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t given = 0;
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    const double exact = double(total) * double(sizes[g]) / double(n);
    out[g] = static_cast<std::size_t>(std::floor(exact));
    given += out[g];
    rem.emplace_back(exact - std::floor(exact), g);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t i = 0; given < total; ++i, ++given) out[rem[i % rem.size()].second]++;
  return out;
}

}  // namespace detail

// Random split with `train_n` training samples, stratified by blur kind so
// every kind keeps its share in both partitions. Deterministic per seed.
inline DatasetSplit split_stratified(const std::vector<BlurSample>& samples, std::size_t train_n,
                                     std::uint64_t seed) {
  if (train_n >= samples.size()) {
    throw ConfigError("train_n (" + std::to_string(train_n) + ") must be smaller than the " +
                      std::to_string(samples.size()) + " available samples");
  }
  std::map<BlurKind, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) groups[samples[i].kind].push_back(i);

  std::vector<std::size_t> sizes;
  for (const auto& [kind, idx] : groups) sizes.push_back(idx.size());
  const auto test_quota = detail::apportion(sizes, samples.size() - train_n);

  DatasetSplit split;
  split.seed = seed;
  std::mt19937_64 rng(seed);
  std::size_t g = 0;
  for (auto& [kind, idx] : groups) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t t = test_quota[g++];
    split.test.insert(split.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(t));
    split.train.insert(split.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(t), idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());

  split.ratio_preserved = true;
  g = 0;
  for (const auto& [kind, idx] : groups) {
    const double ideal = double(samples.size() - train_n) * double(idx.size()) / double(samples.size());
    if (std::abs(double(test_quota[g++]) - ideal) > 1.0) split.ratio_preserved = false;
  }
  return split;
}

// CUHK protocol: train_n training images, the rest for testing, same
// motion:defocus ratio in both partitions.
inline DatasetSplit split_cuhk(const std::vector<BlurSample>& samples, std::size_t train_n,
                               std::uint64_t seed) {
  return split_stratified(samples, train_n, seed);
}

// One id per line, "train" partition then "test" partition, in two files.
inline void write_split_manifest(const std::filesystem::path& dir, const std::vector<BlurSample>& samples,
                                 const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, part] : {std::pair{"train.txt", &split.train}, std::pair{"test.txt", &split.test}}) {
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write split manifest " + (dir / name).string());
    for (auto i : *part) out << samples[i].id << '\n';
  }
}

// Rebuilds a split from a manifest written by write_split_manifest.
inline DatasetSplit read_split_manifest(const std::filesystem::path& dir,
                                        const std::vector<BlurSample>& samples) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < samples.size(); ++i) by_id[samples[i].id] = i;
  DatasetSplit split;
  for (const auto& [name, part] : {std::pair{"train.txt", &split.train}, std::pair{"test.txt", &split.test}}) {
    std::ifstream in(dir / name);
    if (!in) throw IoError("cannot read split manifest " + (dir / name).string());
    for (std::string id; std::getline(in, id);) {
      if (id.empty()) continue;
      auto it = by_id.find(id);
      if (it == by_id.end()) throw ConfigError("split manifest names unknown sample '" + id + "'");
      part->push_back(it->second);
    }
  }
  return split;
}

enum class AugmentPolicy { none, hflip, hflip_vflip };

inline AugmentPolicy parse_augment_policy(std::string_view s) {
  if (s == "none") return AugmentPolicy::none;
  if (s == "hflip") return AugmentPolicy::hflip;
  if (s == "hflip_vflip") return AugmentPolicy::hflip_vflip;
  throw ConfigError("unknown augmentation policy '" + std::string(s) + "'");
}

// Mirrors the two leading (spatial) axes of an H x W [x C] tensor.
template <typename T>
Tensor<T> flip(const Tensor<T>& t, bool horizontal, bool vertical) {
  Tensor<T> out(t.shape());
  const std::size_t h = t.dim(0), w = t.dim(1);
  const std::size_t c = t.rank() == 3 ? t.dim(2) : 1;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = vertical ? h - 1 - y : y;
      const std::size_t sx = horizontal ? w - 1 - x : x;
      std::copy_n(t.data() + (sy * w + sx) * c, c, out.data() + (y * w + x) * c);
    }
  return out;
}

inline BlurSample flip_sample(const BlurSample& s, bool horizontal, bool vertical) {
  std::string id = s.id;
  if (horizontal) id += "_h";
  if (vertical) id += "_v";
  return {std::move(id), flip(s.image, horizontal, vertical), flip(s.mask, horizontal, vertical), s.kind};
}

// Originals followed by mirrored copies: x2 for hflip, x4 for hflip_vflip.
inline std::vector<BlurSample> augment(const std::vector<BlurSample>& samples, AugmentPolicy policy) {
  std::vector<BlurSample> out(samples);
  if (policy == AugmentPolicy::none) return out;
  for (const auto& s : samples) out.push_back(flip_sample(s, true, false));
  if (policy == AugmentPolicy::hflip_vflip) {
    for (const auto& s : samples) out.push_back(flip_sample(s, false, true));
    for (const auto& s : samples) out.push_back(flip_sample(s, true, true));
  }
  return out;
}

namespace detail {

// Source coordinate of output index i under half-pixel alignment, as the
// exact fraction lo + num/den: ((2i + 1) * in - out) / (2 * out), clamped to
// [0, in - 1]. Exact arithmetic keeps resizing mirror-symmetric.
struct SourceTap {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

inline SourceTap source_tap(std::size_t i, std::size_t in, std::size_t out) {
  const long long den = 2 * static_cast<long long>(out);
  const long long num = (2 * static_cast<long long>(i) + 1) * static_cast<long long>(in) -
                        static_cast<long long>(out);
  if (num <= 0) return {0, 0, 1.0, 0.0};
  const long long lo = num / den, rem = num % den;
  if (lo >= static_cast<long long>(in) - 1) return {in - 1, in - 1, 1.0, 0.0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(lo + 1),
          double(den - rem) / double(den), double(rem) / double(den)};
}

}  // namespace detail

// Bilinear resize of an H x W x C byte image with half-pixel centres and
// clamped edges. Returns C x out_h x out_w values in [0,1].
template <typename T>
Tensor<T> resize_bilinear(const Tensor<std::uint8_t>& img, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor<T> out({c, out_h, out_w});
  std::vector<detail::SourceTap> cols(out_w);
  for (std::size_t x = 0; x < out_w; ++x) cols[x] = detail::source_tap(x, w, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto ty = detail::source_tap(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& tx = cols[x];
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = tx.w_lo * img(ty.lo, tx.lo, ch) + tx.w_hi * img(ty.lo, tx.hi, ch);
        const double bottom = tx.w_lo * img(ty.hi, tx.lo, ch) + tx.w_hi * img(ty.hi, tx.hi, ch);
        out(ch, y, x) = static_cast<T>((ty.w_lo * top + ty.w_hi * bottom) / 255.0);
      }
    }
  }
  return out;
}

// Nearest-neighbour resize of a 2-D map: output i samples source
// floor((i + 0.5) * in / out).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& m, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = m.dim(0), w = m.dim(1);
  Tensor<T> out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = ((2 * y + 1) * h) / (2 * out_h);
    for (std::size_t x = 0; x < out_w; ++x) out(y, x) = m(sy, ((2 * x + 1) * w) / (2 * out_w));
  }
  return out;
}

template <typename T>
PreparedSample<T> preprocess(const BlurSample& s, std::size_t size) {
  if (size < 16) throw ConfigError("preprocess size must be >= 16, got " + std::to_string(size));
  if (s.image.rank() != 3 || s.height() == 0 || s.width() == 0) {
    throw ShapeError(s.id + ": degenerate source image " + shape_string(s.image.shape()));
  }
  s.validate();
  return {s.id, resize_bilinear<T>(s.image, size, size), resize_nearest(s.mask, size, size)};
}

// HWC bytes -> CHW values in [0,1] without resizing.
template <typename T>
Tensor<T> to_planar(const Tensor<std::uint8_t>& img) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor<T> out({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out(ch, y, x) = static_cast<T>(img(y, x, ch) / 255.0);
  return out;
}

}  // namespace msdu
