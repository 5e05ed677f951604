#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>

#include "msdu/model.hpp"

namespace msdu {
namespace {

Tensor<double> pattern_batch(std::size_t b, std::size_t c, std::size_t side) {
  Tensor<double> t({b, c, side, side});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.5 + 0.5 * std::sin(0.37 * double(i) + 0.11 * double(i % 7));
  return t;
}

template <typename T>
void expect_softmax(const Tensor<T>& y, double tol) {
  const std::size_t b = y.dim(0), c = y.dim(1), hw = y.dim(2) * y.dim(3);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0;
      for (std::size_t k = 0; k < c; ++k) {
        const double v = y[(n * c + k) * hw + p];
        ASSERT_GT(v, 0.0);
        ASSERT_LT(v, 1.0);
        s += v;
      }
      ASSERT_NEAR(s, 1.0, tol);
    }
}

TEST(ModelConfig, DefaultsFollowTheArchitecture) {
  ModelConfig c;
  EXPECT_EQ(c.in_channels, 3);
  EXPECT_EQ(c.num_classes, 2);
  EXPECT_EQ(c.input_size, 256);
  EXPECT_EQ(c.extractor_rates, (std::array<int, 4>{1, 2, 2, 2}));
  EXPECT_EQ(c.extractor_strides, (std::array<int, 4>{1, 2, 4, 8}));
  EXPECT_EQ(c.stage_channels, (std::array<int, 4>{64, 128, 256, 512}));
  EXPECT_EQ(c.bottleneck_channels, 1024);
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelConfig, RejectsInconsistentConfigs) {
  auto bad = [](auto mutate) {
    ModelConfig c = ModelConfig::tiny();
    mutate(c);
    return c;
  };
  EXPECT_THROW(build_model<double>(bad([](ModelConfig& c) { c.input_size = 40; })), ConfigError);
  EXPECT_THROW(build_model<double>(bad([](ModelConfig& c) { c.extractor_strides[2] = 2; })), ConfigError);
  EXPECT_THROW(build_model<double>(bad([](ModelConfig& c) { c.extractor_rates[1] = 0; })), ConfigError);
  EXPECT_THROW(build_model<double>(bad([](ModelConfig& c) { c.stage_channels[3] = 0; })), ConfigError);
  EXPECT_THROW(build_model<double>(bad([](ModelConfig& c) { c.num_classes = 1; })), ConfigError);
  try {
    build_model<double>(bad([](ModelConfig& c) { c.extractor_strides[3] = 4; }));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("extractor_strides[3]"), std::string::npos);
  }
}

TEST(Extractor, OutputShapeFollowsStride) {
  {
    auto net = build_extractor<float>({1, 1}, 3, 64, 256);
    EXPECT_EQ(net.node(net.output_node()).channels, 64);
    EXPECT_EQ(net.node(net.output_node()).size, 256);
  }
  {
    auto net = build_extractor<float>({2, 8}, 3, 64, 256);
    EXPECT_EQ(net.node(net.output_node()).size, 32);
    Tensor<float> x({3, 256, 256}, 0.25f);
    EXPECT_EQ(net.evaluate(x).shape(), (Shape{64, 32, 32}));
  }
  {
    auto net = build_extractor<double>({2, 2}, 3, 8, 32, 5);
    EXPECT_EQ(net.evaluate(Tensor<double>({3, 32, 32}, 1.0)).shape(), (Shape{8, 16, 16}));
  }
  EXPECT_THROW(build_extractor<float>({2, 3}, 3, 8, 32), ConfigError);
  EXPECT_THROW(build_extractor<float>({0, 2}, 3, 8, 32), ConfigError);
}

TEST(Extractor, LayerSequence) {
  auto net = build_extractor<double>({2, 4}, 3, 8, 32);
  std::vector<std::string> names;
  for (const auto& p : net.parameters()) names.push_back(p.name);
  EXPECT_EQ(names, (std::vector<std::string>{"extractor.dilated.weight", "extractor.dilated.bias",
                                             "extractor.strided.weight", "extractor.strided.bias",
                                             "extractor.smooth.weight", "extractor.smooth.bias"}));
  const auto& ops = net.ops();
  ASSERT_EQ(ops.size(), 4u);
  EXPECT_EQ(ops[0].geometry.dilation, 2);
  EXPECT_EQ(ops[0].geometry.stride, 1);
  EXPECT_EQ(ops[1].geometry.stride, 4);
  EXPECT_EQ(ops[2].kind, OpKind::relu);
  EXPECT_EQ(ops[3].geometry.stride, 1);
  EXPECT_EQ(ops[3].geometry.kernel, 3);
}

TEST(BuildModel, TinyShapesForEveryVariant) {
  for (Variant v : kAllVariants) {
    auto m = build_model<double>(ModelConfig::tiny(v), 1);
    const auto y = forward(m, pattern_batch(2, 3, 32));
    EXPECT_EQ(y.shape(), (Shape{2, 2, 32, 32})) << to_string(v);
    expect_softmax(y, 1e-12);
  }
}

TEST(BuildModel, ShapeContractAcrossInputSizes) {
  for (int side : {16, 48, 64}) {
    ModelConfig c = ModelConfig::tiny();
    c.input_size = side;
    auto m = build_model<float>(c, 3);
    const auto y = forward(m, pattern_batch(1, 3, side).cast<float>());
    EXPECT_EQ(y.shape(), (Shape{1, 2, static_cast<std::size_t>(side), static_cast<std::size_t>(side)}));
  }
}

TEST(Forward, RejectsWrongShapes) {
  auto m = build_model<double>(ModelConfig::tiny(), 1);
  try {
    forward(m, pattern_batch(1, 3, 64));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("Bx3x32x32"), std::string::npos);
    EXPECT_NE(msg.find("1x3x64x64"), std::string::npos);
  }
  EXPECT_THROW(forward(m, pattern_batch(1, 1, 32)), ShapeError);
  EXPECT_THROW(forward(m, Tensor<double>({3, 32, 32})), ShapeError);
}

TEST(Forward, IdenticalImagesGiveIdenticalMaps) {
  auto m = build_model<double>(ModelConfig::tiny(), 9);
  auto one = pattern_batch(1, 3, 32);
  std::vector<Tensor<double>> two{one.slice(0), one.slice(0)};
  const auto y = forward(m, stack<double>(two));
  EXPECT_EQ(y.slice(0), y.slice(1));
  EXPECT_EQ(forward(m, one).slice(0), y.slice(0));
}

TEST(Forward, SameSeedSameParameters) {
  auto a = build_model<double>(ModelConfig::tiny(), 42);
  auto b = build_model<double>(ModelConfig::tiny(), 42);
  auto c = build_model<double>(ModelConfig::tiny(), 43);
  ASSERT_TRUE(a.parameters().same_layout(b.parameters()));
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
  EXPECT_NE(a.parameters().at("encoder1.conv1.weight"), c.parameters().at("encoder1.conv1.weight"));
}

// Frozen regression output of the tiny model. Set MSDU_REGENERATE_GOLDEN=1
// to rewrite the file after an intentional numerical change.
TEST(Forward, MatchesGoldenArray) {
  const std::string path = std::string(MSDU_TEST_DATA_DIR) + "/golden_tiny_forward.txt";
  auto m = build_model<double>(ModelConfig::tiny(), 2024);
  const auto y = forward(m, pattern_batch(1, 3, 32));
  if (std::getenv("MSDU_REGENERATE_GOLDEN")) {
    std::ofstream out(path);
    out << std::setprecision(17);
    for (double v : y.values()) out << v << '\n';
  }
  std::ifstream in(path);
  ASSERT_TRUE(in) << "missing golden file " << path;
  std::vector<double> golden;
  for (double v; in >> v;) golden.push_back(v);
  ASSERT_EQ(golden.size(), y.size());
  for (std::size_t i = 0; i < golden.size(); ++i) ASSERT_NEAR(y[i], golden[i], 1e-5) << i;
}

TEST(ParameterCount, DilatedLayerIsRateIndependent) {
  for (int rate : {1, 2, 3, 4}) {
    auto net = build_extractor<float>({rate, 1}, 3, 64, 32);
    EXPECT_EQ(net.parameters().at("extractor.dilated.weight").size(), 1728u);
    EXPECT_EQ(net.parameters().at("extractor.dilated.bias").size(), 64u);
  }
  auto dense = build_extractor<float>({1, 1, true}, 3, 64, 32);
  EXPECT_EQ(dense.parameters().at("extractor.dense5x5.weight").size(), 4800u);
}

TEST(ParameterCount, RatesNeverChangeTheTotal) {
  auto base = build_model<float>(ModelConfig::tiny());
  for (auto rates : {std::array<int, 4>{1, 1, 1, 1}, std::array<int, 4>{4, 3, 2, 1},
                     std::array<int, 4>{2, 4, 6, 8}}) {
    ModelConfig c = ModelConfig::tiny();
    c.extractor_rates = rates;
    EXPECT_EQ(parameter_count(build_model<float>(c)), parameter_count(base));
  }
}

TEST(ParameterCount, BreakdownSumsToTotal) {
  for (Variant v : kAllVariants) {
    auto m = build_model<float>(ModelConfig::tiny(v));
    std::size_t sum = 0;
    for (const auto& l : parameter_breakdown(m)) sum += l.weights + l.biases;
    EXPECT_EQ(sum, parameter_count(m));
  }
}

TEST(ParameterCount, Dense5x5AddsSixteenWeightsPerTapPair) {
  const ModelConfig full;
  ModelConfig dense;
  dense.variant = Variant::dense5x5;
  const auto a = build_model<float>(full);
  const auto b = build_model<float>(dense);
  // hand sum: 4 extractors, (25 - 9) taps, 3 input channels, 64 outputs
  EXPECT_EQ(parameter_count(b) - parameter_count(a), 4u * 16u * 3u * 64u);
  std::size_t dilated = 0, dense_w = 0;
  for (const auto& l : parameter_breakdown(a))
    if (l.name.ends_with(".dilated")) dilated += l.weights;
  for (const auto& l : parameter_breakdown(b))
    if (l.name.ends_with(".dense5x5")) dense_w += l.weights;
  EXPECT_EQ(dense_w - dilated, 12288u);
}

TEST(Variants, NoSkipDiffersOnlyInDecoderInputWidths) {
  const auto full = build_model<float>(ModelConfig());
  ModelConfig c;
  c.variant = Variant::no_skip;
  const auto ns = build_model<float>(c);
  for (const auto& p : full.parameters()) {
    if (p.name.starts_with("extractor") || p.name.starts_with("encoder") ||
        p.name.starts_with("bottleneck")) {
      ASSERT_TRUE(ns.parameters().contains(p.name)) << p.name;
      EXPECT_EQ(ns.parameters().at(p.name).shape(), p.value.shape()) << p.name;
    }
  }
  for (const auto& p : ns.parameters()) EXPECT_EQ(p.name.find("skip_merge"), std::string::npos);
  for (int k = 1; k <= 4; ++k) {
    const std::string n = std::to_string(k);
    const auto& wf = full.parameters().at("decoder" + n + ".skip_merge.weight");
    const auto& wn = ns.parameters().at("decoder" + n + ".conv1.weight");
    EXPECT_EQ(wf.dim(0), wn.dim(0));
    EXPECT_EQ(wf.dim(1), 2 * wn.dim(1));
  }
}

TEST(Variants, PlainUnetHasNoExtractors) {
  const auto m = build_model<float>(ModelConfig::tiny(Variant::plain_unet));
  for (const auto& p : m.parameters()) EXPECT_FALSE(p.name.starts_with("extractor")) << p.name;
  EXPECT_EQ(m.parameters().at("encoder1.conv1.weight").dim(1), 3u);
}

TEST(Variants, ParameterNamesAreUnique) {
  for (Variant v : kAllVariants) {
    const auto m = build_model<float>(ModelConfig::tiny(v));
    std::set<std::string> names;
    for (const auto& p : m.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  }
}

}  // namespace
}  // namespace msdu
