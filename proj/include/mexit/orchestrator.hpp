#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mexit/data.hpp"
#include "mexit/inference.hpp"
#include "mexit/losses.hpp"
#include "mexit/profiler.hpp"

namespace mexit {

struct OrchestratorConfig {
  double p_expl = 0.1;
  double thr_conf_active = 0.5;
  double thr_conf_raised = 0.9;
  double drift_factor = 0.2;
  Index drift_window = 60;
  Index min_new_samples = 200;
  double deviation_limit = 0.2;
  double ewma_smoothing = 0.1;
  std::uint64_t seed = 1;
  PersonalisationConfig loss = PersonalisationConfig::self_distillation();
  LatencyModel latency;

  void validate() const;
};

enum class Phase { Inference, Exploration, PersonalisationScheduled };
std::string phase_name(Phase p);

enum class Action {
  RunInference,
  Explore,
  BufferSample,
  RaiseThreshold,
  SchedulePersonalisation,
  RunPersonalisation,
  RunProfile,
  RunCalibration,
};
std::string action_name(Action a);

struct Event {
  enum class Kind { SampleArrived, DevicePluggedIn, TimerTick };
  Kind kind = Kind::TimerTick;
  Tensorf input;
  std::optional<Index> label;

  static Event sample(Tensorf x, std::optional<Index> y = std::nullopt) {
    return {Kind::SampleArrived, std::move(x), y};
  }
  static Event plugged_in() { return {Kind::DevicePluggedIn, {}, std::nullopt}; }
  static Event tick() { return {Kind::TimerTick, {}, std::nullopt}; }
};
std::string event_name(Event::Kind k);

/// Per-exit consecutive-exceedance counters. Returns true when some exit has
/// ewma > baseline * (1 + delta) for `window` consecutive calls; counters of
/// exits not above the bound are reset.
bool detect_drift(const std::vector<double>& ewma, const std::vector<double>& baseline, double delta,
                  Index window, std::vector<Index>& counters);

struct StepOutcome {
  std::vector<Action> actions;
  std::optional<InferenceResult> inference;
  bool explored = false;
  bool drift = false;
  std::int64_t extra_flops = 0;  // exploration cost on top of the inference
};

struct EventLogRow {
  Index step = 0;
  std::string event;
  Phase phase = Phase::Inference;
  std::vector<Action> actions;
  double active_thr = 0.0;
  bool drift = false;
  Index new_samples = 0;
};

class Orchestrator {
 public:
  Orchestrator(const Model& model, OrchestratorConfig cfg, const CalibrationResult& calibration);

  StepOutcome step(const Event& event);

  /// Called by the driver once the personalisation, profiling and
  /// calibration emitted on plug-in have finished.
  void complete_personalisation(const Model& model, const CalibrationResult& calibration);

  bool should_personalise() const;

  Phase phase() const { return phase_; }
  const ExitPolicy& policy() const { return policy_; }
  double calibrated_threshold() const { return thr_calibrated_; }
  const std::vector<double>& baseline_loss() const { return baseline_; }
  const std::vector<double>& ewma_loss() const { return ewma_; }
  Index new_sample_count() const { return new_samples_; }
  Index exploration_count() const { return explorations_; }
  const std::vector<EventLogRow>& log() const { return log_; }

  /// Samples buffered since the last personalisation; labels are kept only
  /// when every buffered sample carried one.
  Dataset buffered_dataset() const;

  void write_log_csv(std::ostream& os) const;

 private:
  void reset_from(const CalibrationResult& calibration);
  StepOutcome on_sample(const Event& event);
  void schedule(StepOutcome& out);

  const Model* model_;
  OrchestratorConfig cfg_;
  PersonalisationConfig explore_labelled_;
  PersonalisationConfig explore_unlabelled_;
  Phase phase_ = Phase::Inference;
  bool scheduled_ = false;
  ExitPolicy policy_;
  double thr_calibrated_ = 0.0;
  std::vector<double> baseline_;
  std::vector<double> ewma_;
  std::vector<Index> counters_;
  Index new_samples_ = 0;
  Index explorations_ = 0;
  Index steps_ = 0;
  std::vector<Tensorf> buffer_;
  std::vector<std::optional<Index>> buffer_labels_;
  std::mt19937_64 rng_;
  std::vector<EventLogRow> log_;
};

}  // namespace mexit
