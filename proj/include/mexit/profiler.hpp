#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mexit/data.hpp"
#include "mexit/inference.hpp"
#include "mexit/losses.hpp"

namespace mexit {

enum class ReferenceMode { HardLabels, FinalExitAsTruth };

/// Per-sample outputs of every exit, kept so that any (exit subset,
/// threshold) can be evaluated without touching the model again.
struct SampleRecord {
  std::vector<Index> predicted;    // exits 1..M+1
  std::vector<double> confidence;  // exits 1..M+1
  std::vector<double> loss;        // exits 1..M, exploration loss vs the final exit
  Index reference = 0;
};

/// Statistics of one (exit subset, threshold) operating point.
struct OperatingPoint {
  double threshold = 0.0;
  double accuracy = 0.0;
  double mean_flops = 0.0;
  double mean_latency_us = 0.0;
  std::vector<double> exit_rate;  // exits 1..M+1
  std::vector<Index> captured;    // samples terminating at each exit
  std::vector<Index> captured_correct;
};

struct ProfileReport {
  ReferenceMode reference_mode = ReferenceMode::HardLabels;
  Index num_exits = 0;  // M
  std::vector<Index> profiled_exits;
  std::vector<double> thresholds;
  std::vector<SampleRecord> samples;

  // Per exit 1..M+1.
  std::vector<std::int64_t> prefix_flops;  // backbone only
  std::vector<std::int64_t> head_flops;
  std::vector<std::int64_t> params;        // backbone prefix + head
  std::vector<double> prefix_latency_us;
  std::vector<double> head_latency_us;
  double base_latency_us = 0.0;
  std::vector<double> exit_accuracy;
  std::vector<double> mean_confidence;
  std::vector<double> mean_loss;           // exits 1..M

  std::vector<OperatingPoint> per_threshold;  // for profiled_exits

  Index final_exit() const { return num_exits + 1; }
  double final_accuracy() const { return exit_accuracy.back(); }

  std::int64_t flops_to_exit(Index exit, const std::vector<Index>& selected) const;
  double latency_to_exit(Index exit, const std::vector<Index>& selected) const;

  /// Replays the stored per-sample outputs under another policy.
  OperatingPoint evaluate(const std::vector<Index>& selected, double threshold) const;
};

struct ProfileOptions {
  std::vector<double> thresholds;         // empty selects 0.00, 0.05, ..., 1.00
  std::vector<Index> selected_exits;      // empty means all early exits
  bool use_labels = true;                 // hard labels when the data has them
  PersonalisationConfig loss;             // form of the per-exit loss
  LatencyModel latency;
  Index batch_size = 64;
};

std::vector<double> default_threshold_grid();

/// One forward pass over the calibration set collecting every exit's output.
ProfileReport profile(const Model& model, const Dataset& calib, const ProfileOptions& options = {});

/// Non-dominated subset of (latency, accuracy) points as indices into
/// `points`, sorted by latency. Exact duplicates keep the first occurrence.
std::vector<std::size_t> pareto_front(const std::vector<std::pair<double, double>>& points);

struct ParetoPoint {
  double latency_us = 0.0;
  double accuracy = 0.0;
  double threshold = 0.0;
};

struct CalibrationResult {
  double threshold = 1.0;
  std::vector<Index> selected_exits;
  double expected_accuracy = 0.0;
  double expected_latency_us = 0.0;
  double expected_flops = 0.0;
  double reference_accuracy = 0.0;
  std::vector<ParetoPoint> pareto;
  std::vector<double> baseline_loss;  // exits 1..M

  ExitPolicy policy() const { return {selected_exits, threshold}; }
};

/// Smallest grid threshold on the Pareto front whose accuracy stays within
/// `tolerance_points` (percentage points) of the final exit; 1 when none does.
CalibrationResult calibrate_threshold(const ProfileReport& report, double tolerance_points,
                                      const std::vector<Index>& selected = {});

/// Drops exits that capture fewer than `min_exit_rate` of the samples at
/// `threshold`, or whose accuracy on the samples they capture trails the final
/// exit by more than `max_accuracy_gap_points`.
std::vector<Index> prune_exits(const ProfileReport& report, const std::vector<Index>& selected, double threshold,
                               double min_exit_rate, double max_accuracy_gap_points);

struct CalibrationOptions {
  double tolerance_points = 1.0;
  double min_exit_rate = 0.05;
  double max_accuracy_gap_points = 2.0;
};

/// Threshold selection followed by pruning, repeated until the exit set is stable.
CalibrationResult calibrate(const ProfileReport& report, const CalibrationOptions& options = {});

void write_profile_csv(std::ostream& os, const ProfileReport& report);
void write_exit_stats_csv(std::ostream& os, const ProfileReport& report);
void write_pareto_csv(std::ostream& os, const CalibrationResult& result);

/// key = value summary consumed by the orchestrator.
void write_calibration_summary(std::ostream& os, const CalibrationResult& result);
CalibrationResult read_calibration_summary(std::istream& is);

}  // namespace mexit
