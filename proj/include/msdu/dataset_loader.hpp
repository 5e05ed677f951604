#pragma once

// Directory layouts:
//   cuhk: root/image/<id>.<ext> + root/gt/<id>.png
//   dut:  root/{train,test}/{images,gt}/<id>.<ext>
// Images and masks are paired by file stem. Masks are binarized at >= 128
// after optional polarity inversion, so label 1 means blurred.

#include <fnmatch.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "msdu/dataset.hpp"
#include "msdu/errors.hpp"
#include "msdu/image_io.hpp"

namespace msdu {

enum class DatasetLayout { cuhk, dut };

inline DatasetLayout parse_layout(std::string_view s) {
  if (s == "cuhk") return DatasetLayout::cuhk;
  if (s == "dut") return DatasetLayout::dut;
  throw ConfigError("unknown dataset layout '" + std::string(s) + "' (expected cuhk or dut)");
}

inline std::string_view to_string(DatasetLayout l) { return l == DatasetLayout::cuhk ? "cuhk" : "dut"; }

struct LoadOptions {
  bool invert_mask = false;
  int mask_threshold = 128;
  // cuhk only: a stem matching motion_glob is motion, else one matching
  // defocus_glob is defocus, else unknown. A sidecar file, when given, lists
  // motion stems one per line and overrides the globs.
  std::string motion_glob = "motion*";
  std::string defocus_glob = "out_of_focus*";
  std::filesystem::path motion_list;
};

struct SampleError {
  std::string id;
  std::string message;
};

struct LoadResult {
  std::vector<BlurSample> samples;         // sorted by id within each partition
  std::vector<std::string> partition;      // per sample: "", "train" or "test"
  std::vector<std::filesystem::path> unmatched;
  std::vector<SampleError> errors;
  std::size_t matched_pairs = 0;
};

namespace detail {

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

inline std::map<std::string, std::filesystem::path> list_by_stem(const std::filesystem::path& dir,
                                                                 std::vector<std::filesystem::path>& unmatched) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  std::map<std::string, std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_image_file(e.path())) continue;
    const auto [it, fresh] = out.emplace(e.path().stem().string(), e.path());
    if (!fresh) unmatched.push_back(e.path());
  }
  return out;
}

inline bool glob_match(const std::string& pattern, const std::string& s) {
  return !pattern.empty() && fnmatch(pattern.c_str(), s.c_str(), 0) == 0;
}

inline Tensor<std::uint8_t> binarize(const Tensor<std::uint8_t>& gray, const LoadOptions& opt) {
  Tensor<std::uint8_t> out(gray.shape());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const int v = opt.invert_mask ? 255 - gray[i] : gray[i];
    out[i] = v >= opt.mask_threshold ? 1 : 0;
  }
  return out;
}

inline void load_pairs(const std::filesystem::path& image_dir, const std::filesystem::path& gt_dir,
                       const std::string& partition, const LoadOptions& opt,
                       const std::function<BlurKind(const std::string&)>& kind_of, LoadResult& res) {
  const auto images = list_by_stem(image_dir, res.unmatched);
  const auto masks = list_by_stem(gt_dir, res.unmatched);
  for (const auto& [stem, path] : images)
    if (!masks.count(stem)) res.unmatched.push_back(path);
  for (const auto& [stem, path] : masks)
    if (!images.count(stem)) res.unmatched.push_back(path);
  for (const auto& [stem, image_path] : images) {
    const auto m = masks.find(stem);
    if (m == masks.end()) continue;
    ++res.matched_pairs;
    try {
      BlurSample s{stem, read_rgb(image_path), binarize(read_gray(m->second), opt), kind_of(stem)};
      s.validate();
      res.samples.push_back(std::move(s));
      res.partition.push_back(partition);
    } catch (const Error& e) {
      res.errors.push_back({stem, e.what()});
    }
  }
}

}  // namespace detail

// Loads every (image, mask) pair under root. Files without a partner are
// listed in `unmatched`; pairs that fail to decode or whose dimensions
// disagree are listed in `errors` with their id. A missing directory throws.
inline LoadResult load_dataset(const std::filesystem::path& root, DatasetLayout layout,
                               const LoadOptions& opt = {}) {
  if (!std::filesystem::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  LoadResult res;
  if (layout == DatasetLayout::cuhk) {
    std::set<std::string> motion;
    const bool sidecar = !opt.motion_list.empty();
    if (sidecar) {
      std::ifstream in(opt.motion_list);
      if (!in) throw IoError("cannot read motion list " + opt.motion_list.string());
      for (std::string line; std::getline(in, line);)
        if (!line.empty()) motion.insert(std::filesystem::path(line).stem().string());
    }
    auto kind_of = [&](const std::string& stem) {
      if (sidecar) return motion.count(stem) ? BlurKind::motion : BlurKind::defocus;
      if (detail::glob_match(opt.motion_glob, stem)) return BlurKind::motion;
      if (detail::glob_match(opt.defocus_glob, stem)) return BlurKind::defocus;
      return BlurKind::unknown;
    };
    detail::load_pairs(root / "image", root / "gt", "", opt, kind_of, res);
  } else {
    auto defocus = [](const std::string&) { return BlurKind::defocus; };
    for (const char* part : {"train", "test"}) {
      if (!std::filesystem::is_directory(root / part)) continue;
      detail::load_pairs(root / part / "images", root / part / "gt", part, opt, defocus, res);
    }
    if (!std::filesystem::is_directory(root / "train") && !std::filesystem::is_directory(root / "test")) {
      throw IoError("dut layout expects train/ or test/ under " + root.string());
    }
  }
  std::sort(res.unmatched.begin(), res.unmatched.end());
  return res;
}

}  // namespace msdu
