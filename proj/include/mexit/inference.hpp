#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mexit/model.hpp"

namespace mexit {

/// Which early exits are evaluated and the confidence an exit must exceed
/// (strictly) to terminate inference.
struct ExitPolicy {
  std::vector<Index> selected_exits;  // ascending subset of 1..M
  double threshold = 0.5;

  void validate(const Model& model) const;
};

/// Latency attached to an inference. Synthetic mode is deterministic:
/// base_us + us_per_mflop * flops / 1e6. Measured mode uses wall-clock time.
struct LatencyModel {
  enum class Mode { Synthetic, Measured };
  Mode mode = Mode::Synthetic;
  double base_us = 0.0;
  double us_per_mflop = 100.0;

  double synthetic_us(std::int64_t flops) const { return base_us + us_per_mflop * static_cast<double>(flops) / 1e6; }
};

struct InferenceResult {
  Index predicted = 0;
  Index exit_taken = 0;  // 1..M+1
  double confidence = 0.0;
  std::int64_t flops = 0;
  double latency_us = 0.0;
};

/// Top-1 class and its softmax (T = 1) probability.
struct Confidence {
  Index predicted = 0;
  double confidence = 0.0;
};
Confidence confidence_of(const Eigen::Ref<const Vector<float>>& logits);

InferenceResult infer(const Model& model, const Tensorf& sample, const ExitPolicy& policy,
                      const LatencyModel& latency = {});

struct BatchSummary {
  std::vector<double> exit_rate;  // per exit ordinal 1..M+1
  std::vector<Index> exit_count;
  double mean_flops = 0.0;
  double mean_latency_us = 0.0;
  std::optional<double> accuracy;
};

struct BatchInference {
  std::vector<InferenceResult> results;
  BatchSummary summary;
};

BatchSummary summarise(const std::vector<InferenceResult>& results, Index num_exit_slots,
                       const std::vector<Index>* labels = nullptr);

/// Early-exit inference over N samples. In synthetic-latency mode samples are
/// processed stage by stage in batches, dropping those that exit; results are
/// identical to calling infer per sample.
BatchInference infer_batch(const Model& model, const Tensorf& inputs, const ExitPolicy& policy,
                           const LatencyModel& latency = {}, const std::vector<Index>* labels = nullptr,
                           Index batch_size = 64);

/// sample_id, exit_taken, confidence, predicted, correct, flops, latency_us
void write_results_csv(std::ostream& os, const std::vector<InferenceResult>& results,
                       const std::vector<Index>* labels = nullptr);

}  // namespace mexit
