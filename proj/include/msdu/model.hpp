#pragma once

// Multi-scale dilated U-net. Four independent extractors (dilated conv ->
// strided conv + ReLU -> smoothing conv) each feed one contracting stage;
// the expansive path mirrors the contracting path with 2x2 transposed
// convolutions and skip concatenations, and a 1x1 conv + softmax head maps
// the last decoder stage to per-pixel class probabilities.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "msdu/errors.hpp"
#include "msdu/network.hpp"
#include "msdu/tensor.hpp"

namespace msdu {

enum class Variant { full, no_skip, dense5x5, plain_unet };

inline constexpr std::array<Variant, 4> kAllVariants = {Variant::full, Variant::no_skip,
                                                        Variant::dense5x5, Variant::plain_unet};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_skip: return "no_skip";
    case Variant::dense5x5: return "dense5x5";
    case Variant::plain_unet: return "plain_unet";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) +
                    "' (expected full, no_skip, dense5x5 or plain_unet)");
}

inline constexpr int kStages = 4;

struct ModelConfig {
  int in_channels = 3;
  int num_classes = 2;
  int input_size = 256;
  std::array<int, kStages> extractor_rates{1, 2, 2, 2};
  std::array<int, kStages> extractor_strides{1, 2, 4, 8};
  int extractor_channels = 64;
  std::array<int, kStages> stage_channels{64, 128, 256, 512};
  int bottleneck_channels = 1024;
  Variant variant = Variant::full;

  // Scaled-down preset used by tests and the desk-scale fixtures.
  static ModelConfig tiny(Variant v = Variant::full) {
    ModelConfig c;
    c.input_size = 32;
    c.extractor_channels = 4;
    c.stage_channels = {4, 8, 16, 32};
    c.bottleneck_channels = 64;
    c.variant = v;
    return c;
  }

  // Throws ConfigError naming the first violated invariant.
  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
    if (in_channels < 1) fail("in_channels must be >= 1");
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (input_size < 16 || input_size % 16 != 0)
      fail("input_size must be a positive multiple of 16, got " + std::to_string(input_size));
    if (extractor_channels < 1) fail("extractor_channels must be >= 1");
    if (bottleneck_channels < 1) fail("bottleneck_channels must be >= 1");
    for (int k = 0; k < kStages; ++k) {
      const std::string idx = "[" + std::to_string(k) + "]";
      if (extractor_rates[k] < 1) fail("extractor_rates" + idx + " must be >= 1");
      if (extractor_strides[k] != (1 << k))
        fail("extractor_strides" + idx + " must equal " + std::to_string(1 << k) +
             " so the extractor matches its stage resolution, got " +
             std::to_string(extractor_strides[k]));
      if (stage_channels[k] < 1) fail("stage_channels" + idx + " must be >= 1");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ExtractorSpec {
  int rate = 1;
  int stride = 1;
  bool dense5x5 = false;  // replace the dilated 3x3 with a dense 5x5
};

namespace detail {

inline void check_stride(int stride) {
  if (stride != 1 && stride != 2 && stride != 4 && stride != 8) {
    throw ConfigError("extractor stride must be one of 1, 2, 4, 8, got " + std::to_string(stride));
  }
}

template <typename T>
int append_extractor(Network<T>& net, const std::string& prefix, int input,
                     const ExtractorSpec& spec, int out_channels) {
  if (spec.rate < 1) throw ConfigError(prefix + ": dilation rate must be >= 1");
  check_stride(spec.stride);
  int x = spec.dense5x5 ? net.conv(prefix + ".dense5x5", input, out_channels, 5, 1, 1)
                        : net.conv(prefix + ".dilated", input, out_channels, 3, 1, spec.rate);
  x = net.relu(net.conv(prefix + ".strided", x, out_channels, 3, spec.stride, 1));
  return net.conv(prefix + ".smooth", x, out_channels, 3, 1, 1);
}

template <typename T>
int append_double_conv(Network<T>& net, const std::string& first, const std::string& second,
                       int input, int channels) {
  int x = net.relu(net.conv(first, input, channels, 3, 1, 1));
  return net.relu(net.conv(second, x, channels, 3, 1, 1));
}

}  // namespace detail

// Standalone extractor acting on an in_channels x input_size x input_size map.
template <typename T>
Network<T> build_extractor(const ExtractorSpec& spec, int in_channels, int out_channels,
                           int input_size, std::uint64_t seed = 0) {
  detail::check_stride(spec.stride);
  if (input_size % spec.stride != 0) {
    throw ConfigError("input size " + std::to_string(input_size) + " is not divisible by stride " +
                      std::to_string(spec.stride));
  }
  Network<T> net(in_channels, input_size);
  net.set_output(detail::append_extractor(net, "extractor", net.input_node(), spec, out_channels));
  net.initialize(seed);
  return net;
}

template <typename T>
class ParameterizedModel {
 public:
  ParameterizedModel(ModelConfig config, Network<T> net)
      : config_(std::move(config)), net_(std::move(net)) {}

  const ModelConfig& config() const noexcept { return config_; }
  Network<T>& network() noexcept { return net_; }
  const Network<T>& network() const noexcept { return net_; }
  ParameterStore<T>& parameters() noexcept { return net_.parameters(); }
  const ParameterStore<T>& parameters() const noexcept { return net_.parameters(); }

 private:
  ModelConfig config_;
  Network<T> net_;
};

// Builds the graph for config.variant and initializes it from `seed`.
template <typename T>
ParameterizedModel<T> build_model(const ModelConfig& config, std::uint64_t seed = 0) {
  config.validate();
  Network<T> net(config.in_channels, config.input_size);
  const int image = net.input_node();
  const bool has_extractors = config.variant != Variant::plain_unet;

  std::array<int, kStages> stage{};
  int prev = -1;
  for (int k = 0; k < kStages; ++k) {
    const std::string n = std::to_string(k + 1);
    int in = -1;
    if (has_extractors) {
      const ExtractorSpec spec{config.extractor_rates[k], config.extractor_strides[k],
                               config.variant == Variant::dense5x5};
      const int ext = detail::append_extractor(net, "extractor" + n, image, spec,
                                               config.extractor_channels);
      if (net.node(ext).size != config.input_size >> k) {
        throw ConfigError("extractor" + n + " output side " + std::to_string(net.node(ext).size) +
                          " does not match stage side " + std::to_string(config.input_size >> k));
      }
      in = k == 0 ? ext : net.concat("encoder" + n + ".merge", ext, net.max_pool(prev));
    } else {
      in = k == 0 ? image : net.max_pool(prev);
    }
    stage[static_cast<std::size_t>(k)] = prev = detail::append_double_conv(
        net, "encoder" + n + ".conv1", "encoder" + n + ".conv2", in, config.stage_channels[k]);
  }

  int x = detail::append_double_conv(net, "bottleneck.conv1", "bottleneck.conv2",
                                     net.max_pool(prev), config.bottleneck_channels);

  const bool skips = config.variant != Variant::no_skip;
  for (int k = kStages - 1; k >= 0; --k) {
    const std::string n = std::to_string(k + 1);
    const int ch = config.stage_channels[k];
    int up = net.up_conv("decoder" + n + ".up", x, ch);
    if (skips) {
      const int merged = net.concat("decoder" + n + ".concat", stage[static_cast<std::size_t>(k)],
                                    up, /*skip_input=*/true);
      x = detail::append_double_conv(net, "decoder" + n + ".skip_merge", "decoder" + n + ".conv2",
                                     merged, ch);
    } else {
      x = detail::append_double_conv(net, "decoder" + n + ".conv1", "decoder" + n + ".conv2", up,
                                     ch);
    }
  }
  net.set_output(net.conv("head", x, config.num_classes, 1, 1, 1));
  net.initialize(seed);
  return ParameterizedModel<T>(config, std::move(net));
}

namespace detail {

template <typename T>
void check_batch(const ModelConfig& c, const Tensor<T>& batch) {
  if (batch.rank() != 4 || static_cast<int>(batch.dim(1)) != c.in_channels ||
      static_cast<int>(batch.dim(2)) != c.input_size ||
      static_cast<int>(batch.dim(3)) != c.input_size) {
    throw ShapeError("expected batch Bx" + std::to_string(c.in_channels) + "x" +
                     std::to_string(c.input_size) + "x" + std::to_string(c.input_size) +
                     ", received " + shape_string(batch.shape()));
  }
}

}  // namespace detail

// Per-pixel class probabilities for one C x H x W image.
template <typename T>
Tensor<T> predict_one(const ParameterizedModel<T>& model, const Tensor<T>& image,
                      const ExecutionOptions& opt = {}) {
  return softmax_channels(model.network().evaluate(image, opt));
}

// B x C x H x W batch -> B x num_classes x H x W probabilities.
template <typename T>
Tensor<T> forward(const ParameterizedModel<T>& model, const Tensor<T>& batch,
                  const ExecutionOptions& opt = {}) {
  detail::check_batch(model.config(), batch);
  std::vector<Tensor<T>> outs;
  outs.reserve(batch.dim(0));
  for (std::size_t b = 0; b < batch.dim(0); ++b) outs.push_back(predict_one(model, batch.slice(b), opt));
  return stack<T>(outs);
}

struct LayerCount {
  std::string name;
  std::size_t weights = 0;
  std::size_t biases = 0;
};

// One entry per conv / transposed-conv layer, in graph order.
template <typename T>
std::vector<LayerCount> parameter_breakdown(const ParameterizedModel<T>& model) {
  std::vector<LayerCount> out;
  const auto& params = model.parameters();
  for (const Op& op : model.network().ops()) {
    if (op.kind != OpKind::conv && op.kind != OpKind::up_conv) continue;
    out.push_back({op.name, params[op.weight].value.size(), params[op.bias].value.size()});
  }
  return out;
}

template <typename T>
std::size_t parameter_count(const ParameterizedModel<T>& model) {
  return model.parameters().scalar_count();
}

}  // namespace msdu
