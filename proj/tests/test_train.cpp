#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "msdu/checkpoint.hpp"
#include "msdu/train.hpp"

namespace msdu {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("msdu_test_train_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Independent per-pixel reference for the loss.
double loss_oracle(const Tensor<double>& p, const Tensor<std::uint8_t>& m) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < p.dim(0); ++b)
    for (std::size_t y = 0; y < p.dim(2); ++y)
      for (std::size_t x = 0; x < p.dim(3); ++x, ++n) {
        const double q = p(b, std::size_t(m(b, y, x)), y, x);
        s += -std::log(q < 1e-12 ? 1e-12 : q);
      }
  return s / double(n);
}

TEST(LrSchedule, StepDecay) {
  TrainSchedule s;
  EXPECT_EQ(lr_at_epoch(s, 0), 0.01);
  EXPECT_EQ(lr_at_epoch(s, 25), 0.001);
  EXPECT_EQ(lr_at_epoch(s, 50), 1e-4);
  EXPECT_EQ(lr_at_epoch(s, 99), 1e-5);
  EXPECT_THROW(lr_at_epoch(s, -1), ConfigError);
}

TEST(LrSchedule, NonIncreasingWithBreakpointsAtPeriodMultiples) {
  for (int period : {1, 7, 25}) {
    TrainSchedule s;
    s.decay_period = period;
    s.decay_factor = 0.5;
    for (int e = 1; e < 200; ++e) {
      const double a = lr_at_epoch(s, e - 1), b = lr_at_epoch(s, e);
      EXPECT_LE(b, a);
      EXPECT_EQ(b < a, e % period == 0) << "epoch " << e << " period " << period;
    }
  }
}

TEST(TrainSchedule, Validation) {
  auto bad = [](auto f) {
    TrainSchedule s;
    f(s);
    return s;
  };
  EXPECT_THROW(bad([](auto& s) { s.base_lr = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.decay_factor = 1.5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.decay_period = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.momentum = 1.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& s) { s.weight_decay = -1; }).validate(), ConfigError);
  EXPECT_NO_THROW(TrainSchedule{}.validate());
}

TEST(Loss, OneHotIsZero) {
  Tensor<double> p({1, 2, 4, 4});
  Tensor<std::uint8_t> m({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) {
    m[i] = i % 3 == 0;
    p[m[i] * 16 + i] = 1.0;
  }
  EXPECT_LE(cross_entropy(p, m), 1e-11);
}

TEST(Loss, UniformIsLn2ForAnyMask) {
  Tensor<double> p({2, 2, 3, 5}, 0.5);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<std::uint8_t> m({2, 3, 5});
    for (auto& v : m.values()) v = rng() & 1;
    EXPECT_NEAR(cross_entropy(p, m), std::log(2.0), 1e-15);
  }
}

TEST(Loss, MatchesScalarLoop) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> p({1, 2, 4, 4});
    Tensor<std::uint8_t> m({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) {
      const double a = u(rng);
      p[i] = a;
      p[16 + i] = 1 - a;
      m[i] = rng() & 1;
    }
    EXPECT_NEAR(cross_entropy(p, m), loss_oracle(p, m), 1e-10);
  }
}

TEST(Loss, RejectsShapeMismatch) {
  EXPECT_THROW(cross_entropy(Tensor<double>({1, 2, 4, 4}, 0.5), Tensor<std::uint8_t>({1, 4, 5})), ShapeError);
  EXPECT_THROW(cross_entropy(Tensor<double>({2, 2, 4, 4}, 0.5), Tensor<std::uint8_t>({1, 4, 4})), ShapeError);
}

ParameterStore<double> scalar_store(double v) {
  ParameterStore<double> s;
  s.add("theta", {1});
  s[0].value[0] = v;
  return s;
}

TEST(SgdStep, TwoStepMomentumTrace) {
  TrainSchedule sched;
  sched.momentum = 0.9;
  sched.weight_decay = 0;
  auto theta = scalar_store(1.0);
  auto g = scalar_store(1.0);
  auto v = scalar_store(0.0);
  sgd_step(theta, g, v, 0.1, sched);
  EXPECT_NEAR(theta[0].value[0], 0.9, 1e-15);
  sgd_step(theta, g, v, 0.1, sched);
  EXPECT_NEAR(theta[0].value[0], 0.71, 1e-15);
}

TEST(SgdStep, ReducesToVanillaSgd) {
  TrainSchedule sched;
  sched.momentum = 0;
  sched.weight_decay = 0;
  auto theta = scalar_store(2.0);
  auto g = scalar_store(0.5);
  auto v = scalar_store(0.0);
  for (int i = 0; i < 3; ++i) sgd_step(theta, g, v, 0.2, sched);
  EXPECT_NEAR(theta[0].value[0], 2.0 - 3 * 0.1, 1e-15);
}

TEST(SgdStep, ZeroGradientDecaysMomentumOnly) {
  TrainSchedule sched;
  sched.weight_decay = 0;
  auto theta = scalar_store(1.0);
  auto g = scalar_store(0.0);
  auto v = scalar_store(0.0);
  sgd_step(theta, g, v, 0.1, sched);
  EXPECT_EQ(theta[0].value[0], 1.0);
  v[0].value[0] = 2.0;
  sgd_step(theta, g, v, 0.0, sched);
  EXPECT_NEAR(v[0].value[0], 1.8, 1e-15);
  EXPECT_EQ(theta[0].value[0], 1.0);
}

TEST(SgdStep, WeightDecayIsAddedToTheGradient) {
  TrainSchedule sched;
  sched.momentum = 0;
  sched.weight_decay = 0.5;
  auto theta = scalar_store(2.0);
  auto g = scalar_store(1.0);
  auto v = scalar_store(0.0);
  sgd_step(theta, g, v, 0.1, sched);
  EXPECT_NEAR(theta[0].value[0], 2.0 - 0.1 * (1.0 + 0.5 * 2.0), 1e-15);
}

TEST(SgdStep, ZeroLearningRateChangesNoParameter) {
  auto m = build_model<float>(ModelConfig::tiny(), 1);
  const auto before = m.parameters();
  auto g = m.parameters().zeros_like();
  for (auto& p : g)
    for (auto& x : p.value.values()) x = 0.25f;
  auto v = m.parameters().zeros_like();
  sgd_step(m.parameters(), g, v, 0.0, TrainSchedule{});
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].value, m.parameters()[i].value);
}

TEST(SgdStep, ShapeMismatchNamesTheParameter) {
  ParameterStore<double> theta, g, v;
  theta.add("w", {2});
  g.add("w", {3});
  v.add("w", {2});
  try {
    sgd_step(theta, g, v, 0.1, TrainSchedule{});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
}

TEST(Gradients, BatchLossMatchesForwardLoss) {
  auto m = build_model<double>(ModelConfig::tiny(), 3);
  const auto data = fixture::prepared<double>(fixture::four_samples(), 32);
  std::vector<const PreparedSample<double>*> ptrs;
  for (const auto& s : data) ptrs.push_back(&s);
  auto grads = m.parameters().zeros_like();
  const double loss = batch_loss_and_gradient(m, std::span<const PreparedSample<double>* const>(ptrs), grads);
  EXPECT_NEAR(loss, dataset_loss<double>(m, data), 1e-12);
}

TEST(Gradients, WorkerCountOnlyReordersTheReduction) {
  auto m = build_model<double>(ModelConfig::tiny(), 3);
  const auto data = fixture::prepared<double>(fixture::four_samples(), 32);
  std::vector<const PreparedSample<double>*> ptrs;
  for (const auto& s : data) ptrs.push_back(&s);
  const std::span<const PreparedSample<double>* const> batch(ptrs);
  auto g1 = m.parameters().zeros_like();
  auto g3 = m.parameters().zeros_like();
  const double l1 = batch_loss_and_gradient(m, batch, g1, 1);
  const double l3 = batch_loss_and_gradient(m, batch, g3, 3);
  EXPECT_NEAR(l1, l3, 1e-12);
  for (std::size_t p = 0; p < g1.size(); ++p)
    for (std::size_t j = 0; j < g1[p].value.size(); ++j) ASSERT_NEAR(g1[p].value[j], g3[p].value[j], 1e-12);
  auto again = m.parameters().zeros_like();
  batch_loss_and_gradient(m, batch, again, 3);
  for (std::size_t p = 0; p < g3.size(); ++p) EXPECT_EQ(g3[p].value, again[p].value);
}

// Every variant of the tiny model against central finite differences.
class GradCheckVariant : public ::testing::TestWithParam<Variant> {};

TEST_P(GradCheckVariant, MatchesFiniteDifferences) {
  auto m = build_model<double>(ModelConfig::tiny(GetParam()), 7);
  const auto sample = preprocess<double>(fixture::four_samples()[1], 32);
  GradCheckOptions opt;
  opt.seed = 11;
  const auto r = grad_check(m, sample.image, sample.mask, opt);
  EXPECT_GE(r.checked, 200u);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_parameter << " analytic " << r.worst_analytic << " numeric "
                                   << r.worst_numeric;
}

INSTANTIATE_TEST_SUITE_P(AllVariants, GradCheckVariant, ::testing::ValuesIn(kAllVariants),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(GradCheck, LinearExtractorIsExactUpToRounding) {
  auto net = build_extractor<double>({2, 2}, 3, 4, 16, 5);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<double> x({3, 16, 16});
  for (auto& v : x.values()) v = u(rng);
  GradCheckOptions opt;
  opt.execution.linear_activations = true;
  opt.samples = 300;
  opt.epsilon = 1.0;
  const auto r = grad_check(net, x, half_squared_norm_objective(), opt);
  EXPECT_EQ(r.skipped_kinks, 0u);
  EXPECT_GE(r.checked, 300u);
  EXPECT_LE(r.max_rel_error, 1e-9) << r.worst_parameter;
}

TEST(GradCheck, UnusedSkipMergeWeightsHaveZeroGradient) {
  // Full-variant parameters evaluated with the skip features zeroed: the
  // skip half of every skip_merge kernel multiplies zeros.
  auto m = build_model<double>(ModelConfig::tiny(), 7);
  const auto sample = preprocess<double>(fixture::four_samples()[2], 32);
  GradCheckOptions opt;
  opt.execution.drop_skip_features = true;
  opt.samples = 400;
  const auto& params = m.parameters();
  auto grads = params.zeros_like();
  const auto& net = m.network();
  const auto tr = net.run(sample.image, opt.execution);
  net.backward(tr, softmax_cross_entropy_objective(sample.mask).gradient(tr.nodes[std::size_t(net.output_node())]),
               grads, opt.execution);
  std::size_t unused = 0;
  for (int k = 1; k <= 4; ++k) {
    const auto& w = params.at("decoder" + std::to_string(k) + ".skip_merge.weight");
    const auto& g = grads.at("decoder" + std::to_string(k) + ".skip_merge.weight");
    const std::size_t out = w.dim(0), in = w.dim(1), kk = w.dim(2) * w.dim(3);
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = 0; i < in / 2; ++i)  // skip channels come first
        for (std::size_t t = 0; t < kk; ++t, ++unused) ASSERT_EQ(g[(o * in + i) * kk + t], 0.0);
  }
  EXPECT_GT(unused, 0u);

  opt.filter = [](const std::string& n) { return n.find("skip_merge.weight") != std::string::npos; };
  const auto r = grad_check(m, sample.image, sample.mask, opt);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(Train, ZeroEpochsWritesInitialCheckpoint) {
  const auto dir = scratch_dir("zero_epochs");
  TrainState<float> st(build_model<float>(ModelConfig::tiny(), 1));
  const auto init = st.model.parameters();
  TrainSchedule s;
  s.epochs = 0;
  TrainOptions o;
  o.output_dir = dir;
  const auto data = fixture::prepared<float>(fixture::four_samples(), 32);
  const auto log = train<float>(st, data, s, o);
  EXPECT_TRUE(log.epochs.empty());
  ASSERT_EQ(log.checkpoints.size(), 1u);
  const auto ck = load_checkpoint<float>(dir / "final.ckpt");
  EXPECT_EQ(ck.epoch, 0);
  for (std::size_t i = 0; i < init.size(); ++i) EXPECT_EQ(ck.model.parameters()[i].value, init[i].value);
}

TEST(Train, RejectsEmptyTrainingSet) {
  TrainState<float> st(build_model<float>(ModelConfig::tiny(), 1));
  EXPECT_THROW(train<float>(st, {}, TrainSchedule{}), ConfigError);
}

TEST(Train, EpochOrderIsAPureFunctionOfSeedAndEpoch) {
  EXPECT_EQ(epoch_order(50, 3, 7), epoch_order(50, 3, 7));
  EXPECT_NE(epoch_order(50, 3, 7), epoch_order(50, 3, 8));
  EXPECT_NE(epoch_order(50, 3, 7), epoch_order(50, 4, 7));
}

TEST(Train, PeriodicCheckpointsAndCsv) {
  const auto dir = scratch_dir("periodic");
  TrainState<float> st(build_model<float>(ModelConfig::tiny(), 1));
  TrainSchedule s;
  s.epochs = 5;
  s.batch_size = 2;
  TrainOptions o;
  o.output_dir = dir;
  o.checkpoint_every = 2;
  const auto data = fixture::prepared<float>(fixture::four_samples(), 32);
  const auto log = train<float>(st, data, s, o);
  ASSERT_EQ(log.epochs.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(log.epochs[i].epoch, int(i) + 1);
  EXPECT_TRUE(fs::exists(checkpoint_path(dir, 2)));
  EXPECT_TRUE(fs::exists(checkpoint_path(dir, 4)));
  EXPECT_TRUE(fs::exists(checkpoint_path(dir, 5)));
  const auto csv = TrainLog::read_csv(dir / "train_log.csv");
  ASSERT_EQ(csv.epochs.size(), 5u);
  EXPECT_EQ(csv.epochs[3].loss, log.epochs[3].loss);
  EXPECT_EQ(csv.epochs[3].lr, log.epochs[3].lr);
}

TEST(Train, CheckpointFailureKeepsPartialLog) {
  const auto dir = scratch_dir("ckpt_failure");
  TrainState<float> st(build_model<float>(ModelConfig::tiny(), 1));
  TrainSchedule s;
  s.epochs = 3;
  s.batch_size = 4;
  TrainOptions o;
  o.output_dir = dir;
  o.checkpoint_every = 2;
  // a directory squatting on the checkpoint path makes the rename fail
  fs::create_directories(checkpoint_path(dir, 2));
  fs::create_directories(checkpoint_path(dir, 2) / "occupied");
  const auto data = fixture::prepared<float>(fixture::four_samples(), 32);
  EXPECT_THROW(train<float>(st, data, s, o), IoError);
  const auto log = TrainLog::read_csv(dir / "train_log.csv");
  EXPECT_EQ(log.epochs.size(), 2u);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto data = fixture::prepared<float>(fixture::four_samples(), 32);
  TrainSchedule s;
  s.epochs = 8;
  s.batch_size = 3;
  s.seed = 21;
  const auto dir = scratch_dir("resume");
  TrainOptions o;
  o.output_dir = dir;
  o.checkpoint_every = 5;
  TrainState<float> full(build_model<float>(ModelConfig::tiny(), 1));
  const auto log = train<float>(full, data, s, o);

  auto resumed = TrainState<float>::from_checkpoint(load_checkpoint<float>(checkpoint_path(dir, 5)));
  EXPECT_EQ(resumed.epoch, 5);
  const auto tail = train<float>(resumed, data, s);
  ASSERT_EQ(tail.epochs.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(tail.epochs[i].epoch, log.epochs[5 + i].epoch);
    EXPECT_EQ(tail.epochs[i].loss, log.epochs[5 + i].loss);
  }
  for (std::size_t i = 0; i < full.model.parameters().size(); ++i)
    EXPECT_EQ(full.model.parameters()[i].value, resumed.model.parameters()[i].value) << full.model.parameters()[i].name;
}

}  // namespace
}  // namespace msdu
