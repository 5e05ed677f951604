#pragma once

// Threshold-swept precision/recall, F-measure and mean absolute error for
// blur maps against binary ground truth.
//
// A map value v is quantized to q = round(255 v); at threshold t a pixel is
// segmented as blurred iff q >= t, for every integer t in [0, 255]. Empty
// sets follow vacuous conventions: no segmented pixel gives precision 1, no
// ground-truth pixel gives recall 1. Reports flag when either was used.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "msdu/errors.hpp"
#include "msdu/tensor.hpp"

namespace msdu {

inline constexpr int kThresholds = 256;
inline constexpr int kFixedThreshold = 127;
inline constexpr double kBeta2 = 0.3;

struct BlurMap {
  Tensor<double> values;  // H x W in [0,1]
  std::string source_id;

  void validate() const {
    if (values.rank() != 2) throw ShapeError(source_id + ": blur map must be H x W, got " + shape_string(values.shape()));
    for (double v : values.values())
      if (!(v >= 0.0 && v <= 1.0)) throw ShapeError(source_id + ": blur map value outside [0,1]");
  }
};

inline int quantize(double v) { return static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); }

inline void check_threshold(int t) {
  if (t < 0 || t > 255) throw ConfigError("threshold must be in [0, 255], got " + std::to_string(t));
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shapes " + shape_string(a) + " and " + shape_string(b) + " differ");
}

inline Tensor<std::uint8_t> threshold_segment(const BlurMap& map, int t) {
  check_threshold(t);
  Tensor<std::uint8_t> out(map.values.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = quantize(map.values[i]) >= t ? 1 : 0;
  return out;
}

struct PrecisionRecall {
  double precision = 0;
  double recall = 0;
  bool vacuous_precision = false;
  bool vacuous_recall = false;
};

inline PrecisionRecall precision_recall_from_counts(std::uint64_t selected, std::uint64_t positive,
                                                    std::uint64_t hit) {
  PrecisionRecall pr;
  pr.vacuous_precision = selected == 0;
  pr.vacuous_recall = positive == 0;
  pr.precision = selected ? double(hit) / double(selected) : 1.0;
  pr.recall = positive ? double(hit) / double(positive) : 1.0;
  return pr;
}

inline PrecisionRecall precision_recall(const Tensor<std::uint8_t>& seg, const Tensor<std::uint8_t>& gt) {
  check_same_shape(seg.shape(), gt.shape(), "precision_recall");
  std::uint64_t selected = 0, positive = 0, hit = 0;
  for (std::size_t i = 0; i < seg.size(); ++i) {
    selected += seg[i] != 0;
    positive += gt[i] != 0;
    hit += seg[i] != 0 && gt[i] != 0;
  }
  return precision_recall_from_counts(selected, positive, hit);
}

inline double f_measure(double precision, double recall, double beta2 = kBeta2) {
  const double den = beta2 * precision + recall;
  return den > 0 ? (1 + beta2) * precision * recall / den : 0.0;
}

inline double mae(const BlurMap& map, const Tensor<std::uint8_t>& gt) {
  check_same_shape(map.values.shape(), gt.shape(), "mae");
  double s = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) s += std::abs(double(gt[i] != 0) - map.values[i]);
  return gt.size() ? s / double(gt.size()) : 0.0;
}

enum class Aggregation { micro, macro };

inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "micro") return Aggregation::micro;
  if (s == "macro") return Aggregation::macro;
  throw ConfigError("unknown aggregation '" + std::string(s) + "' (expected micro or macro)");
}

struct ImageScore {
  std::string id;
  double mae = 0;
  double best_f = 0;
};

struct EvalFailure {
  std::string id;
  std::string message;
};

struct EvalReport {
  std::array<double, kThresholds> precision{};
  std::array<double, kThresholds> recall{};
  std::array<double, kThresholds> f_measure{};
  double max_f = 0;
  int best_threshold = 0;
  double f_at_fixed = 0;
  double mae = 0;  // mean of per-image MAE
  std::vector<ImageScore> per_image;
  std::vector<EvalFailure> failures;
  bool partial = false;
  bool vacuous_precision = false;
  bool vacuous_recall = false;
};

// Per-threshold pixel counts, pooled over every map added.
struct PixelCounts {
  std::array<std::uint64_t, kThresholds> selected{};
  std::array<std::uint64_t, kThresholds> hit{};
  std::uint64_t positive = 0;

  void add(const BlurMap& map, const Tensor<std::uint8_t>& gt) {
    check_same_shape(map.values.shape(), gt.shape(), "evaluate");
    std::array<std::uint64_t, kThresholds> all{}, pos{};
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const int q = quantize(map.values[i]);
      ++all[std::size_t(q)];
      if (gt[i]) {
        ++pos[std::size_t(q)];
        ++positive;
      }
    }
    std::uint64_t run_all = 0, run_pos = 0;
    for (int t = kThresholds - 1; t >= 0; --t) {
      run_all += all[std::size_t(t)];
      run_pos += pos[std::size_t(t)];
      selected[std::size_t(t)] += run_all;
      hit[std::size_t(t)] += run_pos;
    }
  }

  PrecisionRecall at(int t) const {
    return precision_recall_from_counts(selected[std::size_t(t)], positive, hit[std::size_t(t)]);
  }
};

// Accumulates maps one at a time. Micro aggregation pools pixel counts
// across images; macro averages per-image precision and recall at each
// threshold. F is computed from the aggregated precision and recall.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(Aggregation agg = Aggregation::micro) : agg_(agg) {}

  void add(const BlurMap& map, const Tensor<std::uint8_t>& gt) {
    map.validate();
    PixelCounts one;
    one.add(map, gt);
    double best = 0;
    for (int t = 0; t < kThresholds; ++t) {
      const auto pr = one.at(t);
      best = std::max(best, f_measure(pr.precision, pr.recall));
      macro_p_[std::size_t(t)] += pr.precision;
      macro_r_[std::size_t(t)] += pr.recall;
      if (agg_ == Aggregation::macro) {
        vacuous_p_ = vacuous_p_ || pr.vacuous_precision;
        vacuous_r_ = vacuous_r_ || pr.vacuous_recall;
      }
    }
    pooled_.add(map, gt);
    scores_.push_back({map.source_id, mae(map, gt), best});
  }

  void add_failure(std::string id, std::string message) { failures_.push_back({std::move(id), std::move(message)}); }

  std::size_t count() const { return scores_.size(); }

  EvalReport report() const {
    EvalReport r;
    r.per_image = scores_;
    r.failures = failures_;
    r.partial = !failures_.empty();
    r.vacuous_precision = vacuous_p_;
    r.vacuous_recall = vacuous_r_;
    if (scores_.empty()) return r;
    const double n = double(scores_.size());
    for (int t = 0; t < kThresholds; ++t) {
      const auto i = std::size_t(t);
      if (agg_ == Aggregation::micro) {
        const auto pr = pooled_.at(t);
        r.precision[i] = pr.precision;
        r.recall[i] = pr.recall;
        r.vacuous_precision = r.vacuous_precision || pr.vacuous_precision;
        r.vacuous_recall = r.vacuous_recall || pr.vacuous_recall;
      } else {
        r.precision[i] = macro_p_[i] / n;
        r.recall[i] = macro_r_[i] / n;
      }
      r.f_measure[i] = f_measure(r.precision[i], r.recall[i]);
      if (r.f_measure[i] > r.max_f) {
        r.max_f = r.f_measure[i];
        r.best_threshold = t;
      }
    }
    r.f_at_fixed = r.f_measure[kFixedThreshold];
    double s = 0;
    for (const auto& sc : scores_) s += sc.mae;
    r.mae = s / n;
    return r;
  }

 private:
  Aggregation agg_;
  PixelCounts pooled_;
  std::array<double, kThresholds> macro_p_{}, macro_r_{};
  bool vacuous_p_ = false, vacuous_r_ = false;
  std::vector<ImageScore> scores_;
  std::vector<EvalFailure> failures_;
};

// Scores maps already computed (one per ground truth).
inline EvalReport evaluate_maps(const std::vector<BlurMap>& maps, const std::vector<Tensor<std::uint8_t>>& gts,
                                Aggregation agg = Aggregation::micro) {
  if (maps.size() != gts.size()) throw ShapeError("evaluate_maps: map and ground-truth counts differ");
  EvalAccumulator acc(agg);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    try {
      acc.add(maps[i], gts[i]);
    } catch (const Error& e) {
      acc.add_failure(maps[i].source_id, e.what());
    }
  }
  return acc.report();
}

namespace detail {

inline std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.imbue(std::locale::classic());
  out << std::setprecision(17);
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const std::string& header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header) throw IoError("unexpected header in " + path.string());
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double to_double(const std::string& s) {
  std::istringstream in(s);
  in.imbue(std::locale::classic());
  double v;
  in >> v;
  if (!in) throw IoError("malformed number '" + s + "'");
  return v;
}

}  // namespace detail

inline void export_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir)) throw IoError("cannot create report directory " + dir.string());
  {
    auto out = detail::open_csv(dir / "pr_curve.csv");
    out << "threshold,precision,recall\n";
    for (int t = 0; t < kThresholds; ++t) out << t << ',' << r.precision[std::size_t(t)] << ',' << r.recall[std::size_t(t)] << '\n';
  }
  {
    auto out = detail::open_csv(dir / "f_curve.csv");
    out << "threshold,f\n";
    for (int t = 0; t < kThresholds; ++t) out << t << ',' << r.f_measure[std::size_t(t)] << '\n';
  }
  {
    auto out = detail::open_csv(dir / "summary.csv");
    out << "max_f,f_at_fixed,mae\n" << r.max_f << ',' << r.f_at_fixed << ',' << r.mae << '\n';
  }
  {
    auto out = detail::open_csv(dir / "per_image.csv");
    out << "id,mae,best_f\n";
    for (const auto& s : r.per_image) out << s.id << ',' << s.mae << ',' << s.best_f << '\n';
  }
}

// Reads back the files written by export_report.
inline EvalReport read_report(const std::filesystem::path& dir) {
  EvalReport r;
  const auto pr = detail::read_csv(dir / "pr_curve.csv", "threshold,precision,recall");
  const auto f = detail::read_csv(dir / "f_curve.csv", "threshold,f");
  if (pr.size() != kThresholds || f.size() != kThresholds) throw IoError("curve files must hold 256 rows");
  for (std::size_t t = 0; t < kThresholds; ++t) {
    if (pr[t].size() != 3 || f[t].size() != 2) throw IoError("malformed curve row " + std::to_string(t));
    r.precision[t] = detail::to_double(pr[t][1]);
    r.recall[t] = detail::to_double(pr[t][2]);
    r.f_measure[t] = detail::to_double(f[t][1]);
  }
  const auto summary = detail::read_csv(dir / "summary.csv", "max_f,f_at_fixed,mae");
  if (summary.size() != 1 || summary[0].size() != 3) throw IoError("malformed summary.csv");
  r.max_f = detail::to_double(summary[0][0]);
  r.f_at_fixed = detail::to_double(summary[0][1]);
  r.mae = detail::to_double(summary[0][2]);
  r.best_threshold = int(std::max_element(r.f_measure.begin(), r.f_measure.end()) - r.f_measure.begin());
  for (const auto& row : detail::read_csv(dir / "per_image.csv", "id,mae,best_f")) {
    if (row.size() != 3) throw IoError("malformed per_image.csv row");
    r.per_image.push_back({row[0], detail::to_double(row[1]), detail::to_double(row[2])});
  }
  return r;
}

}  // namespace msdu
