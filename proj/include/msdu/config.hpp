#pragma once

// Run configuration: a flat "key = value" text file ('#' starts a comment)
// merged with "--set key=value" overrides. Every key has a default and a
// one-line description; unknown keys are rejected.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "msdu/dataset.hpp"
#include "msdu/errors.hpp"
#include "msdu/metrics.hpp"
#include "msdu/model.hpp"
#include "msdu/train.hpp"

namespace msdu {

enum class SplitMode { stratified, all, layout };

inline SplitMode parse_split_mode(std::string_view s) {
  if (s == "stratified") return SplitMode::stratified;
  if (s == "all") return SplitMode::all;
  if (s == "layout") return SplitMode::layout;
  throw ConfigError("unknown split mode '" + std::string(s) + "' (expected stratified, all or layout)");
}

inline std::string_view to_string(SplitMode m) {
  switch (m) {
    case SplitMode::stratified: return "stratified";
    case SplitMode::all: return "all";
    case SplitMode::layout: return "layout";
  }
  return "?";
}

inline std::string_view to_string(AugmentPolicy p) {
  switch (p) {
    case AugmentPolicy::none: return "none";
    case AugmentPolicy::hflip: return "hflip";
    case AugmentPolicy::hflip_vflip: return "hflip_vflip";
  }
  return "?";
}

inline std::string_view to_string(Aggregation a) { return a == Aggregation::micro ? "micro" : "macro"; }

struct RunConfig {
  ModelConfig model;
  TrainSchedule schedule;

  std::string dataset_root;
  std::string dataset_layout = "cuhk";
  bool invert_mask = false;
  int mask_threshold = 128;
  std::string motion_glob = "motion*";
  std::string defocus_glob = "out_of_focus*";
  std::string motion_list;
  SplitMode split = SplitMode::stratified;
  int train_count = 800;
  std::string eval_partition = "test";
  AugmentPolicy augment = AugmentPolicy::hflip_vflip;

  std::string output_dir;
  int workers = 1;
  int checkpoint_every = 25;
  long max_iterations = 0;
  Aggregation aggregation = Aggregation::micro;
  bool export_maps = false;

  void validate() const;
};

namespace detail {

template <typename V>
V parse_number(const std::string& key, const std::string& s) {
  V v{};
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end) throw ConfigError("key '" + key + "': cannot parse '" + s + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + s + "'");
}

inline std::array<int, kStages> parse_int4(const std::string& key, const std::string& s) {
  std::array<int, kStages> out{};
  std::stringstream ss(s);
  std::string item;
  std::size_t n = 0;
  while (std::getline(ss, item, ',')) {
    if (n == kStages) throw ConfigError("key '" + key + "': expected 4 comma-separated integers");
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    out[n++] = parse_number<int>(key, item);
  }
  if (n != kStages) throw ConfigError("key '" + key + "': expected 4 comma-separated integers");
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream o;
  o.imbue(std::locale::classic());
  o << std::setprecision(17) << v;
  double back = 0;
  for (int p = 1; p <= 17; ++p) {
    std::ostringstream s;
    s.imbue(std::locale::classic());
    s << std::setprecision(p) << v;
    std::istringstream(s.str()) >> back;
    if (back == v) return s.str();
  }
  return o.str();
}

inline std::string format_int4(const std::array<int, kStages>& a) {
  return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," + std::to_string(a[3]);
}

struct Field {
  const char* key;
  const char* doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename M>
Field int_field(const char* key, const char* doc, M member) {
  return {key, doc, [member](const RunConfig& c) { return std::to_string(member(c)); },
          [member, key](RunConfig& c, const std::string& v) {
            member(c) = parse_number<std::remove_reference_t<decltype(member(c))>>(key, v);
          }};
}

template <typename M>
Field double_field(const char* key, const char* doc, M member) {
  return {key, doc, [member](const RunConfig& c) { return format_double(member(c)); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_number<double>(key, v); }};
}

template <typename M>
Field string_field(const char* key, const char* doc, M member) {
  return {key, doc, [member](const RunConfig& c) { return member(c); },
          [member](RunConfig& c, const std::string& v) { member(c) = v; }};
}

template <typename M>
Field bool_field(const char* key, const char* doc, M member) {
  return {key, doc, [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }};
}

template <typename M>
Field int4_field(const char* key, const char* doc, M member) {
  return {key, doc, [member](const RunConfig& c) { return format_int4(member(c)); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_int4(key, v); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      // model
      Field{"variant", "full | no_skip | dense5x5 | plain_unet", [](const RunConfig& c) { return std::string(to_string(c.model.variant)); },
            [](RunConfig& c, const std::string& v) { c.model.variant = parse_variant(v); }},
      int_field("input_size", "network input side in pixels", [](auto& c) -> auto& { return c.model.input_size; }),
      int_field("num_classes", "output classes (1 = blurred)", [](auto& c) -> auto& { return c.model.num_classes; }),
      int4_field("extractor_rates", "dilation rate of each extractor",
                 [](auto& c) -> auto& { return c.model.extractor_rates; }),
      int4_field("extractor_strides", "stride of each extractor",
                 [](auto& c) -> auto& { return c.model.extractor_strides; }),
      int_field("extractor_channels", "output channels of every extractor",
                [](auto& c) -> auto& { return c.model.extractor_channels; }),
      int4_field("stage_channels", "channels of the four contracting stages",
                 [](auto& c) -> auto& { return c.model.stage_channels; }),
      int_field("bottleneck_channels", "channels of the bottleneck",
                [](auto& c) -> auto& { return c.model.bottleneck_channels; }),
      // optimisation
      double_field("learning_rate", "initial SGD learning rate", [](auto& c) -> auto& { return c.schedule.base_lr; }),
      double_field("lr_decay_factor", "multiplier applied every lr_decay_period epochs",
                   [](auto& c) -> auto& { return c.schedule.decay_factor; }),
      int_field("lr_decay_period", "epochs between learning-rate decays",
                [](auto& c) -> auto& { return c.schedule.decay_period; }),
      double_field("momentum", "SGD momentum", [](auto& c) -> auto& { return c.schedule.momentum; }),
      double_field("weight_decay", "L2 weight decay", [](auto& c) -> auto& { return c.schedule.weight_decay; }),
      int_field("batch_size", "samples per iteration", [](auto& c) -> auto& { return c.schedule.batch_size; }),
      int_field("epochs", "training epochs", [](auto& c) -> auto& { return c.schedule.epochs; }),
      int_field("seed", "seed for split, initialization and batch order",
                [](auto& c) -> auto& { return c.schedule.seed; }),
      int_field("max_iterations", "stop after this many iterations (0: no limit)",
                [](auto& c) -> auto& { return c.max_iterations; }),
      int_field("checkpoint_every", "epochs between checkpoints (0: final only)",
                [](auto& c) -> auto& { return c.checkpoint_every; }),
      int_field("workers", "threads per batch", [](auto& c) -> auto& { return c.workers; }),
      // data
      string_field("dataset_root", "dataset directory", [](auto& c) -> auto& { return c.dataset_root; }),
      string_field("dataset_layout", "cuhk | dut", [](auto& c) -> auto& { return c.dataset_layout; }),
      bool_field("invert_mask", "set when ground-truth white marks sharp pixels",
                 [](auto& c) -> auto& { return c.invert_mask; }),
      int_field("mask_threshold", "grey level at or above which a mask pixel is set",
                [](auto& c) -> auto& { return c.mask_threshold; }),
      string_field("motion_glob", "cuhk: file stems of motion-blurred images",
                   [](auto& c) -> auto& { return c.motion_glob; }),
      string_field("defocus_glob", "cuhk: file stems of defocus-blurred images",
                   [](auto& c) -> auto& { return c.defocus_glob; }),
      string_field("motion_list", "cuhk: file listing motion-blurred stems (overrides globs)",
                   [](auto& c) -> auto& { return c.motion_list; }),
      Field{"split", "stratified | all | layout", [](const RunConfig& c) { return std::string(to_string(c.split)); },
            [](RunConfig& c, const std::string& v) { c.split = parse_split_mode(v); }},
      int_field("train_count", "training samples for the stratified split",
                [](auto& c) -> auto& { return c.train_count; }),
      string_field("eval_partition", "test | train | all", [](auto& c) -> auto& { return c.eval_partition; }),
      Field{"augment", "none | hflip | hflip_vflip", [](const RunConfig& c) { return std::string(to_string(c.augment)); },
            [](RunConfig& c, const std::string& v) { c.augment = parse_augment_policy(v); }},
      // output
      string_field("output_dir", "run directory (empty: $MSDU_OUTPUT_ROOT/<command>, else runs/<command>)",
                   [](auto& c) -> auto& { return c.output_dir; }),
      Field{"aggregation", "micro | macro", [](const RunConfig& c) { return std::string(to_string(c.aggregation)); },
            [](RunConfig& c, const std::string& v) { c.aggregation = parse_aggregation(v); }},
      bool_field("export_maps", "eval: also write blur maps as PNG", [](auto& c) -> auto& { return c.export_maps; }),
  };
  return table;
}

inline std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  s.erase(s.find_last_not_of(" \t\r") + 1);
  return s;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::fields()) keys.emplace_back(f.key);
  return keys;
}

// Applies one key/value pair; throws ConfigError naming the key when the key
// is unknown or the value does not parse.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& table = detail::fields();
  const auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return key == f.key; });
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->set(c, value);
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.find("'" + key + "'") != std::string::npos) throw;
    throw ConfigError("key '" + key + "': " + what);
  }
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  for (const auto& f : detail::fields())
    if (key == f.key) return f.get(c);
  throw ConfigError("unknown config key '" + key + "'");
}

// "key=value" as given to --set.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set_config_value(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number) + ": expected 'key = value', got '" + line + "'");
    }
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Every key with its value and description; parse_config_text reads it back.
inline std::string render_config(const RunConfig& c) {
  std::ostringstream out;
  for (const auto& f : detail::fields()) {
    out << "# " << f.doc << '\n' << f.key << " = " << f.get(c) << '\n';
  }
  return out.str();
}

inline void RunConfig::validate() const {
  model.validate();
  schedule.validate();
  if (dataset_layout != "cuhk" && dataset_layout != "dut") {
    throw ConfigError("key 'dataset_layout': expected cuhk or dut, got '" + dataset_layout + "'");
  }
  if (mask_threshold < 1 || mask_threshold > 255) throw ConfigError("key 'mask_threshold': must be in [1, 255]");
  if (train_count < 1) throw ConfigError("key 'train_count': must be >= 1");
  if (eval_partition != "test" && eval_partition != "train" && eval_partition != "all") {
    throw ConfigError("key 'eval_partition': expected test, train or all, got '" + eval_partition + "'");
  }
  if (split == SplitMode::layout && dataset_layout != "dut") {
    throw ConfigError("key 'split': layout split needs dataset_layout = dut");
  }
  if (workers < 1) throw ConfigError("key 'workers': must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("key 'checkpoint_every': must be >= 0");
  if (max_iterations < 0) throw ConfigError("key 'max_iterations': must be >= 0");
}

}  // namespace msdu
