#pragma once

#include <span>
#include <string>

#include "msdu/dataset.hpp"
#include "msdu/metrics.hpp"
#include "msdu/model.hpp"

namespace msdu {

inline constexpr std::size_t kBlurClass = 1;

// Probability of the blurred class at every pixel of a C x S x S image.
template <typename T>
BlurMap blur_map(const ParameterizedModel<T>& model, const Tensor<T>& image, std::string id) {
  const auto probs = predict_one(model, image);
  const std::size_t h = probs.dim(1), w = probs.dim(2);
  BlurMap m{Tensor<double>({h, w}), std::move(id)};
  for (std::size_t i = 0; i < h * w; ++i)
    m.values[i] = std::clamp(static_cast<double>(probs[kBlurClass * h * w + i]), 0.0, 1.0);
  return m;
}

// Forward pass on each sample and dataset-level scoring. A sample that
// fails is recorded in the report, which is then marked partial.
template <typename T>
EvalReport evaluate(const ParameterizedModel<T>& model, std::span<const PreparedSample<T>> samples,
                    Aggregation agg = Aggregation::micro) {
  if (samples.empty()) throw ConfigError("evaluation set is empty");
  EvalAccumulator acc(agg);
  for (const auto& s : samples) {
    try {
      acc.add(blur_map(model, s.image, s.id), s.mask);
    } catch (const Error& e) {
      acc.add_failure(s.id, e.what());
    }
  }
  return acc.report();
}

}  // namespace msdu
