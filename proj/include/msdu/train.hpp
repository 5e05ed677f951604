#pragma once

// Optimization recipe: per-pixel cross-entropy on the softmax head, momentum
// SGD with weight decay folded into the gradient, and a step-decayed
// learning rate. Also hosts the finite-difference gradient checker.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "msdu/checkpoint.hpp"
#include "msdu/dataset.hpp"
#include "msdu/errors.hpp"
#include "msdu/model.hpp"
#include "msdu/network.hpp"

namespace msdu {

struct TrainSchedule {
  double base_lr = 0.01;
  double decay_factor = 0.1;
  int decay_period = 25;  // epochs
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 16;
  int epochs = 100;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid schedule: " + what); };
    if (!(base_lr > 0)) fail("base_lr must be > 0");
    if (!(decay_factor > 0 && decay_factor <= 1)) fail("decay_factor must be in (0, 1]");
    if (decay_period < 1) fail("decay_period must be >= 1");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (epochs < 0) fail("epochs must be >= 0");
  }
};

// base_lr * decay_factor^floor(epoch / decay_period). Evaluated as a
// division by (1/decay_factor)^k so a decade schedule hits 1e-3, 1e-4, ...
// exactly.
inline double lr_at_epoch(const TrainSchedule& s, int epoch) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0, got " + std::to_string(epoch));
  const int steps = epoch / s.decay_period;
  return s.base_lr / std::pow(1.0 / s.decay_factor, steps);
}

inline constexpr double kProbabilityFloor = 1e-12;

// Mean over batch and pixels of -log p(true class). probabilities:
// B x K x H x W, mask: B x H x W class labels.
template <typename T>
double cross_entropy(const Tensor<T>& probabilities, const Tensor<std::uint8_t>& mask) {
  if (probabilities.rank() != 4 || mask.rank() != 3 || probabilities.dim(0) != mask.dim(0) ||
      probabilities.dim(2) != mask.dim(1) || probabilities.dim(3) != mask.dim(2)) {
    throw ShapeError("loss: probabilities " + shape_string(probabilities.shape()) +
                     " do not match mask " + shape_string(mask.shape()));
  }
  const std::size_t b = probabilities.dim(0), k = probabilities.dim(1);
  const std::size_t hw = probabilities.dim(2) * probabilities.dim(3);
  double total = 0;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t label = mask[n * hw + p];
      if (label >= k) throw ShapeError("loss: mask label " + std::to_string(label) + " out of range");
      const double prob = static_cast<double>(probabilities[(n * k + label) * hw + p]);
      total -= std::log(std::max(prob, kProbabilityFloor));
    }
  return total / double(b * hw);
}

// Classical momentum SGD: g = grad + weight_decay * theta; v = momentum * v + g;
// theta -= lr * v.
template <typename T>
void sgd_step(ParameterStore<T>& params, const ParameterStore<T>& grads, ParameterStore<T>& velocity,
              double lr, const TrainSchedule& schedule) {
  if (grads.size() != params.size() || velocity.size() != params.size()) {
    throw ShapeError("sgd_step: gradient/momentum buffers do not match the parameter list");
  }
  const T mu = static_cast<T>(schedule.momentum);
  const T wd = static_cast<T>(schedule.weight_decay);
  const T step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i].value;
    const auto& g = grads[i].value;
    auto& v = velocity[i].value;
    if (g.shape() != theta.shape() || v.shape() != theta.shape() || grads[i].name != params[i].name) {
      throw ShapeError("sgd_step: buffers for parameter '" + params[i].name + "' have shape " +
                       shape_string(g.shape()) + ", expected " + shape_string(theta.shape()));
    }
    for (std::size_t j = 0; j < theta.size(); ++j) {
      v[j] = mu * v[j] + (g[j] + wd * theta[j]);
      theta[j] -= step * v[j];
    }
  }
}

// Adds d(mean loss)/d(params) for `samples` into `grads`, where the mean runs
// over `normalizer` samples. Returns the summed (not averaged) per-sample loss.
template <typename T>
double accumulate_gradients(const ParameterizedModel<T>& model, std::span<const PreparedSample<T>* const> samples,
                            std::size_t normalizer, ParameterStore<T>& grads,
                            const ExecutionOptions& opt = {}) {
  const auto& net = model.network();
  double loss_sum = 0;
  for (const auto* s : samples) {
    const auto trace = net.run(s->image, opt);
    const auto& logits = trace.nodes[static_cast<std::size_t>(net.output_node())];
    const auto probs = softmax_channels(logits);
    const std::size_t k = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
    if (s->mask.size() != hw) {
      throw ShapeError(s->id + ": mask " + shape_string(s->mask.shape()) + " does not match output " +
                       shape_string(probs.shape()));
    }
    const T scale = static_cast<T>(1.0 / double(normalizer * hw));
    Tensor<T> dlogits(probs.shape());
    double loss = 0;
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t label = s->mask[p];
      loss -= std::log(std::max(static_cast<double>(probs[label * hw + p]), kProbabilityFloor));
      for (std::size_t c = 0; c < k; ++c) {
        const T target = c == label ? T{1} : T{0};
        dlogits[c * hw + p] = (probs[c * hw + p] - target) * scale;
      }
    }
    loss_sum += loss / double(hw);
    net.backward(trace, dlogits, grads, opt);
  }
  return loss_sum;
}

// Mean loss over the batch; `grads` is overwritten with its gradient. Work is
// split into `workers` contiguous chunks whose gradients are reduced in chunk
// order, so the result depends on the worker count but never on scheduling.
template <typename T>
double batch_loss_and_gradient(const ParameterizedModel<T>& model,
                               std::span<const PreparedSample<T>* const> batch, ParameterStore<T>& grads,
                               int workers = 1, const ExecutionOptions& opt = {}) {
  grads.set_zero();
  const std::size_t n = batch.size();
  const std::size_t w = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, n);
  if (w == 1) return accumulate_gradients(model, batch, n, grads, opt) / double(n);

  std::vector<ParameterStore<T>> partial;
  for (std::size_t i = 0; i < w; ++i) partial.push_back(grads.zeros_like());
  std::vector<double> losses(w, 0.0);
  std::vector<std::exception_ptr> errors(w);
  {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < w; ++i) {
      const std::size_t lo = n * i / w, hi = n * (i + 1) / w;
      pool.emplace_back([&, i, lo, hi] {
        try {
          losses[i] = accumulate_gradients(model, batch.subspan(lo, hi - lo), n, partial[i], opt);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  double loss = 0;
  for (std::size_t i = 0; i < w; ++i) {
    loss += losses[i];
    for (std::size_t p = 0; p < grads.size(); ++p) {
      auto& dst = grads[p].value;
      const auto& src = partial[i][p].value;
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  return loss / double(n);
}

// Fraction of pixels whose arg-max class equals the mask label.
template <typename T>
double pixel_accuracy(const ParameterizedModel<T>& model, std::span<const PreparedSample<T>> samples) {
  std::size_t hit = 0, total = 0;
  for (const auto& s : samples) {
    const auto probs = predict_one(model, s.image);
    const std::size_t k = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (probs[c * hw + p] > probs[best * hw + p]) best = c;
      hit += best == s.mask[p];
    }
    total += hw;
  }
  return total ? double(hit) / double(total) : 0.0;
}

template <typename T>
double dataset_loss(const ParameterizedModel<T>& model, std::span<const PreparedSample<T>> samples) {
  double sum = 0;
  for (const auto& s : samples) {
    std::vector<Tensor<T>> one{predict_one(model, s.image)};
    Tensor<std::uint8_t> m({1, s.mask.dim(0), s.mask.dim(1)}, std::vector<std::uint8_t>(s.mask.values().begin(), s.mask.values().end()));
    sum += cross_entropy(stack<T>(one), m);
  }
  return samples.empty() ? 0.0 : sum / double(samples.size());
}

struct EpochRecord {
  int epoch = 0;  // 1-based count of completed epochs
  double loss = 0;
  double lr = 0;
  double seconds = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<std::filesystem::path> checkpoints;

  static constexpr const char* kCsvHeader = "epoch,loss,lr,seconds";

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write training log " + path.string());
    out << kCsvHeader << '\n' << std::setprecision(17);
    for (const auto& r : epochs) out << r.epoch << ',' << r.loss << ',' << r.lr << ',' << r.seconds << '\n';
  }

  static TrainLog read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read training log " + path.string());
    TrainLog log;
    std::string line;
    std::getline(in, line);
    if (line != kCsvHeader) throw IoError("unexpected training log header in " + path.string());
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      EpochRecord r;
      char comma;
      ss >> r.epoch >> comma >> r.loss >> comma >> r.lr >> comma >> r.seconds;
      if (!ss) throw IoError("malformed training log line: " + line);
      log.epochs.push_back(r);
    }
    return log;
  }
};

template <typename T>
struct TrainState {
  ParameterizedModel<T> model;
  ParameterStore<T> momentum;
  int epoch = 0;  // completed epochs

  explicit TrainState(ParameterizedModel<T> m)
      : model(std::move(m)), momentum(model.parameters().zeros_like()) {}

  static TrainState from_checkpoint(Checkpoint<T> ck) {
    TrainState s(std::move(ck.model));
    if (ck.momentum) s.momentum = std::move(*ck.momentum);
    s.epoch = ck.epoch;
    return s;
  }
};

struct TrainOptions {
  std::filesystem::path output_dir;  // empty: nothing written
  int checkpoint_every = 25;         // epochs; 0 disables periodic checkpoints
  long max_iterations = 0;           // 0: run every scheduled epoch
  int workers = 1;
  std::function<void(const EpochRecord&)> on_epoch;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch) {
  std::ostringstream name;
  name << "checkpoint_epoch" << std::setw(4) << std::setfill('0') << epoch << ".ckpt";
  return dir / name.str();
}

// Sample order of one epoch; a pure function of (seed, epoch) so a resumed
// run replays exactly the batches an uninterrupted run would see.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Runs epochs state.epoch .. schedule.epochs - 1. The log CSV is rewritten
// after every epoch, so a failed checkpoint write leaves the log of every
// finished epoch behind before the IoError propagates.
template <typename T>
TrainLog train(TrainState<T>& state, std::span<const PreparedSample<T>> data,
               const TrainSchedule& schedule, const TrainOptions& options = {}) {
  schedule.validate();
  if (data.empty()) throw ConfigError("training set is empty");
  if (!options.output_dir.empty()) std::filesystem::create_directories(options.output_dir);

  TrainLog log;
  auto grads = state.model.parameters().zeros_like();
  const std::size_t batch = static_cast<std::size_t>(schedule.batch_size);
  long iterations = 0;
  bool stop = false;
  auto save = [&](int epoch) {
    if (options.output_dir.empty()) return;
    const auto path = checkpoint_path(options.output_dir, epoch);
    save_checkpoint(path, state.model, &state.momentum, epoch, schedule.seed);
    log.checkpoints.push_back(path);
  };

  while (state.epoch < schedule.epochs && !stop) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(schedule, state.epoch);
    const auto order = epoch_order(data.size(), schedule.seed, state.epoch);
    double loss_sum = 0;
    std::size_t seen = 0;
    std::vector<const PreparedSample<T>*> members;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      members.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + batch); ++i) members.push_back(&data[order[i]]);
      const double loss = batch_loss_and_gradient(state.model, std::span<const PreparedSample<T>* const>(members),
                                                  grads, options.workers);
      sgd_step(state.model.parameters(), grads, state.momentum, lr, schedule);
      loss_sum += loss * double(members.size());
      seen += members.size();
      if (options.max_iterations > 0 && ++iterations >= options.max_iterations) {
        stop = true;
        break;
      }
    }
    ++state.epoch;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back({state.epoch, loss_sum / double(seen), lr, secs});
    if (options.on_epoch) options.on_epoch(log.epochs.back());
    if (!options.output_dir.empty()) log.write_csv(options.output_dir / "train_log.csv");
    const bool last = state.epoch == schedule.epochs || stop;
    if (!last && options.checkpoint_every > 0 && state.epoch % options.checkpoint_every == 0) save(state.epoch);
  }
  if (!options.output_dir.empty()) {
    log.write_csv(options.output_dir / "train_log.csv");
    save(state.epoch);
    std::filesystem::copy_file(log.checkpoints.back(), options.output_dir / "final.ckpt",
                               std::filesystem::copy_options::overwrite_existing);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckOptions {
  double epsilon = 1e-3;
  std::size_t samples = 200;
  std::uint64_t seed = 0;
  double denominator_floor = 1e-8;
  ExecutionOptions execution;
  // Restricts sampling to parameters whose name passes; empty: all.
  std::function<bool(const std::string&)> filter;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // perturbation changed a ReLU sign or pooling winner
  std::string worst_parameter;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

// Scalar objective on a network output plus its gradient.
struct Objective {
  std::function<double(const Tensor<double>&)> value;
  std::function<Tensor<double>(const Tensor<double>&)> gradient;
};

inline Objective softmax_cross_entropy_objective(const Tensor<std::uint8_t>& mask) {
  return {[mask](const Tensor<double>& logits) {
            const auto p = softmax_channels(logits);
            std::vector<Tensor<double>> one{p};
            return cross_entropy(stack<double>(one),
                                 Tensor<std::uint8_t>({1, mask.dim(0), mask.dim(1)},
                                                      std::vector<std::uint8_t>(mask.values().begin(), mask.values().end())));
          },
          [mask](const Tensor<double>& logits) {
            auto g = softmax_channels(logits);
            const std::size_t k = g.dim(0), hw = g.dim(1) * g.dim(2);
            for (std::size_t p = 0; p < hw; ++p) {
              for (std::size_t c = 0; c < k; ++c) g[c * hw + p] /= double(hw);
              g[mask[p] * hw + p] -= 1.0 / double(hw);
            }
            return g;
          }};
}

// 0.5 * sum(out^2): quadratic in every single parameter of a linear network,
// so central differences are exact up to rounding.
inline Objective half_squared_norm_objective() {
  return {[](const Tensor<double>& y) {
            double s = 0;
            for (double v : y.values()) s += v * v;
            return 0.5 * s;
          },
          [](const Tensor<double>& y) { return y; }};
}

// Compares back-propagated gradients with central differences at randomly
// sampled scalar parameters. A sample whose +/- epsilon evaluations change
// the network's activation pattern straddles a ReLU or pooling kink and is
// replaced by another one.
inline GradCheckResult grad_check(Network<double>& net, const Tensor<double>& input,
                                  const Objective& objective, const GradCheckOptions& opt = {}) {
  const auto& ex = opt.execution;
  auto evaluate = [&](std::uint64_t* pattern) {
    const auto tr = net.run(input, ex);
    if (pattern) *pattern = net.activation_pattern(tr, ex);
    return objective.value(tr.nodes[static_cast<std::size_t>(net.output_node())]);
  };

  const auto base = net.run(input, ex);
  const std::uint64_t base_pattern = net.activation_pattern(base, ex);
  auto grads = net.parameters().zeros_like();
  net.backward(base, objective.gradient(base.nodes[static_cast<std::size_t>(net.output_node())]), grads, ex);

  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t p = 0; p < net.parameters().size(); ++p) {
    const auto& param = net.parameters()[p];
    if (opt.filter && !opt.filter(param.name)) continue;
    for (std::size_t j = 0; j < param.value.size(); ++j) candidates.emplace_back(p, j);
  }
  std::mt19937_64 rng(opt.seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);

  GradCheckResult res;
  for (const auto& [p, j] : candidates) {
    if (res.checked >= opt.samples) break;
    double& theta = net.parameters()[p].value[j];
    const double saved = theta;
    std::uint64_t up_pattern = 0, down_pattern = 0;
    theta = saved + opt.epsilon;
    const double up = evaluate(&up_pattern);
    theta = saved - opt.epsilon;
    const double down = evaluate(&down_pattern);
    theta = saved;
    if (up_pattern != base_pattern || down_pattern != base_pattern) {
      ++res.skipped_kinks;
      continue;
    }
    const double numeric = (up - down) / (2 * opt.epsilon);
    const double analytic = grads[p].value[j];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), opt.denominator_floor});
    const double rel = std::abs(numeric - analytic) / denom;
    ++res.checked;
    if (rel >= res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_parameter = net.parameters()[p].name + "[" + std::to_string(j) + "]";
      res.worst_analytic = analytic;
      res.worst_numeric = numeric;
    }
  }
  return res;
}

// Gradient check of the training loss of a model on one (image, mask) pair.
inline GradCheckResult grad_check(ParameterizedModel<double>& model, const Tensor<double>& image,
                                  const Tensor<std::uint8_t>& mask, const GradCheckOptions& opt = {}) {
  return grad_check(model.network(), image, softmax_cross_entropy_objective(mask), opt);
}

}  // namespace msdu
