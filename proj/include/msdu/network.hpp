#pragma once

// A small static computation graph: nodes hold C x H x W feature maps, ops
// read nodes and write exactly one node, and ops are stored in execution
// order. Parameters live in a named store so checkpoints and optimizers can
// address them by stable names.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "msdu/errors.hpp"
#include "msdu/layers.hpp"
#include "msdu/tensor.hpp"

namespace msdu {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string name, Shape shape) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, items_.size());
    items_.push_back({std::move(name), Tensor<T>(std::move(shape))});
    return items_.size() - 1;
  }

  std::size_t size() const noexcept { return items_.size(); }
  Parameter<T>& operator[](std::size_t i) { return items_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return items_[i]; }
  auto begin() noexcept { return items_.begin(); }
  auto end() noexcept { return items_.end(); }
  auto begin() const noexcept { return items_.begin(); }
  auto end() const noexcept { return items_.end(); }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) { return items_[index_of(name)].value; }
  const Tensor<T>& at(const std::string& name) const { return items_[index_of(name)].value; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.size();
    return n;
  }

  // Same names and shapes, all zeros.
  ParameterStore zeros_like() const {
    ParameterStore out;
    for (const auto& p : items_) out.add(p.name, p.value.shape());
    return out;
  }

  void set_zero() {
    for (auto& p : items_) p.value.fill(T{0});
  }

  bool same_layout(const ParameterStore& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (items_[i].name != other.items_[i].name ||
          items_[i].value.shape() != other.items_[i].value.shape())
        return false;
    }
    return true;
  }

 private:
  std::vector<Parameter<T>> items_;
  std::map<std::string, std::size_t> index_;
};

enum class OpKind { conv, relu, max_pool, concat, up_conv };

struct Op {
  OpKind kind = OpKind::conv;
  std::string name;
  std::vector<int> inputs;
  int output = -1;
  std::size_t weight = 0;
  std::size_t bias = 0;
  ConvGeometry geometry;  // conv: full geometry; up_conv: in/out channels only
  bool skip_input = false;  // concat whose first input is a U-net skip connection
};

struct NodeInfo {
  int channels = 0;
  int size = 0;  // square spatial side
};

// Per-call switches used by the gradient checker.
struct ExecutionOptions {
  // Every ReLU acts as the identity.
  bool linear_activations = false;
  // Skip-connection inputs of concat ops are replaced with zeros.
  bool drop_skip_features = false;
};

template <typename T>
struct Trace {
  std::vector<Tensor<T>> nodes;
  std::vector<std::vector<std::uint8_t>> pool_argmax;  // indexed by op
};

// Graph plus its parameters. Shapes are inferred while the graph is built so
// inconsistent wiring fails at construction, not at the first forward call.
template <typename T>
class Network {
 public:
  Network() = default;
  Network(int in_channels, int in_size) { input_ = add_node({in_channels, in_size}); }

  int input_node() const noexcept { return input_; }
  int output_node() const noexcept { return output_; }
  void set_output(int node) { output_ = node; }
  const NodeInfo& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  const std::vector<Op>& ops() const noexcept { return ops_; }
  ParameterStore<T>& parameters() noexcept { return params_; }
  const ParameterStore<T>& parameters() const noexcept { return params_; }

  int conv(const std::string& name, int in, int out_channels, int kernel, int stride, int dilation,
           bool same_pad = true) {
    const NodeInfo& src = node(in);
    ConvGeometry g{src.channels, out_channels, kernel, stride,
                   same_pad ? ConvGeometry::same_padding(kernel, dilation) : 0, dilation};
    if (out_channels < 1) throw ConfigError(name + ": output channels must be >= 1");
    const int out_size = g.out_size(src.size);
    if (out_size < 1) throw ConfigError(name + ": input of side " + std::to_string(src.size) +
                                        " is smaller than the kernel span");
    Op op;
    op.kind = OpKind::conv;
    op.name = name;
    op.inputs = {in};
    op.geometry = g;
    op.weight = params_.add(name + ".weight", {static_cast<std::size_t>(out_channels),
                                               static_cast<std::size_t>(src.channels),
                                               static_cast<std::size_t>(kernel),
                                               static_cast<std::size_t>(kernel)});
    op.bias = params_.add(name + ".bias", {static_cast<std::size_t>(out_channels)});
    op.output = add_node({out_channels, out_size});
    ops_.push_back(std::move(op));
    return ops_.back().output;
  }

  int relu(int in) {
    Op op;
    op.kind = OpKind::relu;
    op.inputs = {in};
    op.output = add_node(node(in));
    ops_.push_back(std::move(op));
    return ops_.back().output;
  }

  int max_pool(int in) {
    const NodeInfo src = node(in);
    if (src.size % 2) throw ConfigError("max pool needs an even spatial side, got " +
                                        std::to_string(src.size));
    Op op;
    op.kind = OpKind::max_pool;
    op.inputs = {in};
    op.output = add_node({src.channels, src.size / 2});
    ops_.push_back(std::move(op));
    return ops_.back().output;
  }

  int concat(const std::string& name, int a, int b, bool skip_input = false) {
    const NodeInfo na = node(a), nb = node(b);
    if (na.size != nb.size) {
      throw ConfigError(name + ": cannot concatenate feature maps of side " +
                        std::to_string(na.size) + " and " + std::to_string(nb.size));
    }
    Op op;
    op.kind = OpKind::concat;
    op.name = name;
    op.inputs = {a, b};
    op.skip_input = skip_input;
    op.output = add_node({na.channels + nb.channels, na.size});
    ops_.push_back(std::move(op));
    return ops_.back().output;
  }

  int up_conv(const std::string& name, int in, int out_channels) {
    const NodeInfo src = node(in);
    Op op;
    op.kind = OpKind::up_conv;
    op.name = name;
    op.inputs = {in};
    op.geometry = ConvGeometry{src.channels, out_channels, 2, 2, 0, 1};
    op.weight = params_.add(name + ".weight", {static_cast<std::size_t>(src.channels),
                                               static_cast<std::size_t>(out_channels), 2, 2});
    op.bias = params_.add(name + ".bias", {static_cast<std::size_t>(out_channels)});
    op.output = add_node({out_channels, src.size * 2});
    ops_.push_back(std::move(op));
    return ops_.back().output;
  }

  // Fan-in scaled normal weights (He), zero biases.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const Op& op : ops_) {
      if (op.kind != OpKind::conv && op.kind != OpKind::up_conv) continue;
      auto& w = params_[op.weight].value;
      const double fan_in = op.kind == OpKind::conv
                                ? double(op.geometry.in_channels) * op.geometry.kernel * op.geometry.kernel
                                : double(op.geometry.in_channels);
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (auto& v : w.values()) v = static_cast<T>(dist(rng));
      params_[op.bias].value.fill(T{0});
    }
  }

  Trace<T> run(const Tensor<T>& input, const ExecutionOptions& opt = {}) const {
    const NodeInfo& in = node(input_);
    if (input.rank() != 3 || static_cast<int>(input.dim(0)) != in.channels ||
        static_cast<int>(input.dim(1)) != in.size || static_cast<int>(input.dim(2)) != in.size) {
      throw ShapeError("expected input " + std::to_string(in.channels) + "x" +
                       std::to_string(in.size) + "x" + std::to_string(in.size) + ", received " +
                       shape_string(input.shape()));
    }
    Trace<T> tr;
    tr.nodes.resize(nodes_.size());
    tr.pool_argmax.resize(ops_.size());
    tr.nodes[static_cast<std::size_t>(input_)] = input;
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      const Op& op = ops_[k];
      auto in0 = [&]() -> const Tensor<T>& { return tr.nodes[static_cast<std::size_t>(op.inputs[0])]; };
      Tensor<T>& out = tr.nodes[static_cast<std::size_t>(op.output)];
      switch (op.kind) {
        case OpKind::conv:
          out = conv2d_forward(in0(), params_[op.weight].value, params_[op.bias].value, op.geometry);
          break;
        case OpKind::relu:
          out = opt.linear_activations ? in0() : relu_forward(in0());
          break;
        case OpKind::max_pool:
          out = max_pool_forward(in0(), tr.pool_argmax[k]);
          break;
        case OpKind::concat:
          if (op.skip_input && opt.drop_skip_features) {
            out = concat_channels(Tensor<T>(in0().shape()),
                                  tr.nodes[static_cast<std::size_t>(op.inputs[1])]);
          } else {
            out = concat_channels(in0(), tr.nodes[static_cast<std::size_t>(op.inputs[1])]);
          }
          break;
        case OpKind::up_conv:
          out = up_conv_forward(in0(), params_[op.weight].value, params_[op.bias].value,
                                op.geometry.in_channels, op.geometry.out_channels);
          break;
      }
    }
    return tr;
  }

  Tensor<T> evaluate(const Tensor<T>& input, const ExecutionOptions& opt = {}) const {
    auto tr = run(input, opt);
    return std::move(tr.nodes[static_cast<std::size_t>(output_)]);
  }

  // Back-propagates d(output) through a trace; parameter gradients are added
  // into `grads`, which must share this network's layout. Returns d(input).
  Tensor<T> backward(const Trace<T>& tr, const Tensor<T>& d_output, ParameterStore<T>& grads,
                     const ExecutionOptions& opt = {}) const {
    std::vector<std::optional<Tensor<T>>> d(nodes_.size());
    d[static_cast<std::size_t>(output_)] = d_output;
    auto accumulate = [&](int id, Tensor<T> g) {
      auto& slot = d[static_cast<std::size_t>(id)];
      if (!slot) {
        slot = std::move(g);
        return;
      }
      for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
    };
    for (std::size_t k = ops_.size(); k-- > 0;) {
      const Op& op = ops_[k];
      auto& dout_slot = d[static_cast<std::size_t>(op.output)];
      if (!dout_slot) continue;
      const Tensor<T>& dout = *dout_slot;
      const Tensor<T>& x = tr.nodes[static_cast<std::size_t>(op.inputs[0])];
      switch (op.kind) {
        case OpKind::conv:
          accumulate(op.inputs[0], conv2d_backward(x, params_[op.weight].value, dout, op.geometry,
                                                   grads[op.weight].value, grads[op.bias].value));
          break;
        case OpKind::relu:
          accumulate(op.inputs[0], opt.linear_activations ? dout : relu_backward(x, dout));
          break;
        case OpKind::max_pool:
          accumulate(op.inputs[0], max_pool_backward(x.shape(), tr.pool_argmax[k], dout));
          break;
        case OpKind::concat: {
          const std::size_t split = x.size();
          const Tensor<T>& b = tr.nodes[static_cast<std::size_t>(op.inputs[1])];
          if (!(op.skip_input && opt.drop_skip_features)) {
            std::vector<T> da(dout.values().begin(), dout.values().begin() + static_cast<std::ptrdiff_t>(split));
            accumulate(op.inputs[0], Tensor<T>(x.shape(), std::move(da)));
          }
          std::vector<T> db(dout.values().begin() + static_cast<std::ptrdiff_t>(split), dout.values().end());
          accumulate(op.inputs[1], Tensor<T>(b.shape(), std::move(db)));
          break;
        }
        case OpKind::up_conv:
          accumulate(op.inputs[0],
                     up_conv_backward(x, params_[op.weight].value, dout, op.geometry.in_channels,
                                      op.geometry.out_channels, grads[op.weight].value,
                                      grads[op.bias].value));
          break;
      }
      dout_slot.reset();
    }
    auto& din = d[static_cast<std::size_t>(input_)];
    return din ? std::move(*din) : Tensor<T>(tr.nodes[static_cast<std::size_t>(input_)].shape());
  }

  // Smallest |pre-activation| over every ReLU input in a trace.
  T min_relu_margin(const Trace<T>& tr) const {
    T m = std::numeric_limits<T>::infinity();
    for (const Op& op : ops_) {
      if (op.kind != OpKind::relu) continue;
      for (T v : tr.nodes[static_cast<std::size_t>(op.inputs[0])].values()) m = std::min(m, std::abs(v));
    }
    return m;
  }

  // Fingerprint of every piecewise-linear decision taken in a trace (ReLU
  // signs and pooling winners). Two traces with equal fingerprints lie on
  // the same linear piece of the network.
  std::uint64_t activation_pattern(const Trace<T>& tr, const ExecutionOptions& opt = {}) const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t v) {
      h ^= v;
      h *= 1099511628211ull;
    };
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      const Op& op = ops_[k];
      if (op.kind == OpKind::relu && !opt.linear_activations) {
        for (T v : tr.nodes[static_cast<std::size_t>(op.inputs[0])].values()) mix(v > T{0} ? 1 : 2);
      } else if (op.kind == OpKind::max_pool) {
        for (auto q : tr.pool_argmax[k]) mix(q + 3u);
      }
    }
    return h;
  }

 private:
  int add_node(NodeInfo info) {
    nodes_.push_back(info);
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<NodeInfo> nodes_;
  std::vector<Op> ops_;
  ParameterStore<T> params_;
  int input_ = -1;
  int output_ = -1;
};

}  // namespace msdu
