#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"

namespace mexit::cli {

/// Verbosity from MEXIT_LOG (0 quiet, 1 info, 2 debug); defaults to 1.
int log_level();
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

/// Files written during one command; removed again if the command fails.
class OutputDir {
 public:
  explicit OutputDir(std::string dir);
  const std::string& dir() const { return dir_; }
  std::string path(const std::string& name);
  void write(const std::string& name, const std::function<void(std::ostream&)>& body);
  void rollback();
  const std::vector<std::string>& files() const { return files_; }

 private:
  std::string dir_;
  std::vector<std::string> files_;
};

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};
void write_svg_chart(std::ostream& os, const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<Series>& series);

struct GlobalData {
  Dataset train;
  Dataset test;
  Dataset pool;  // source of user data
};

GlobalData make_global_data(const ExperimentConfig& cfg);
std::vector<UserSplit> make_users(const ExperimentConfig& cfg, const Dataset& pool);

/// Untrained multi-exit model for the configured backbone and data shape.
Model build_model(const ExperimentConfig& cfg, const Dataset& reference);
/// Loads model.checkpoint when set, otherwise trains on data.train.
Model obtain_global_model(const ExperimentConfig& cfg, const GlobalData& data, TrainingLog* log = nullptr);

/// Users' personalisation and calibration splits.
struct UserData {
  Dataset train;
  Dataset calib;
  Dataset test;
};
UserData user_data(const ExperimentConfig& cfg, const UserSplit& user, Index user_index);

PersonalisationConfig mode_config(const ExperimentConfig& cfg, const std::string& mode);
extern const std::vector<std::string> kPersonalisationModes;  // hard_labels, self_distillation, self_supervised

struct AccuracyRow {
  Index n_samples = 0;
  Index exit_id = 0;
  std::string mode;
  double accuracy = 0.0;
};
std::vector<AccuracyRow> accuracy_vs_samples(const ExperimentConfig& cfg, const Model& global, const GlobalData& data,
                                             const std::vector<UserSplit>& users);
void write_accuracy_vs_samples(OutputDir& out, const ExperimentConfig& cfg, const std::vector<AccuracyRow>& rows);

struct PersonalisationRow {
  Index user = 0;
  Index center = 0;
  std::string mode;
  Index exit_id = 0;
  double accuracy_global = 0.0;
  double accuracy_personalised = 0.0;
  double agreement = 0.0;  // top-1 agreement with the final exit after personalisation
};
std::vector<PersonalisationRow> personalisation_gains(const ExperimentConfig& cfg, const Model& global,
                                                      const std::vector<UserSplit>& users);
void write_personalisation(OutputDir& out, const ExperimentConfig& cfg, const std::vector<PersonalisationRow>& rows);

void write_cost(OutputDir& out, const ExperimentConfig& cfg, const Model& model);

struct TrainingCostRow {
  std::string mode;
  std::string exits;
  bool teacher = false;
  Index samples = 0;
  int epochs = 0;
  std::int64_t flops = 0;
  double speedup = 0.0;
  double seconds = 0.0;  // wall clock, never written to CSV
};
std::vector<TrainingCostRow> training_cost(const ExperimentConfig& cfg, const Model& global, const GlobalData& data);
void write_training_cost(OutputDir& out, const ExperimentConfig& cfg, const std::vector<TrainingCostRow>& rows);

struct SweepRow {
  std::string model;
  double threshold = 0.0;
  double accuracy = 0.0;
  double mean_latency_us = 0.0;
  double mean_flops = 0.0;
  std::vector<double> exit_rate;
};
struct SweepResult {
  std::vector<SweepRow> rows;
  ProfileReport report;
  CalibrationResult calibration;
};
SweepResult threshold_sweep(const ExperimentConfig& cfg, const Model& global, const std::vector<UserSplit>& users);
void write_threshold_sweep(OutputDir& out, const ExperimentConfig& cfg, const SweepResult& result);

/// Profile on the calibration split with the loss form of `loss_cfg`, then calibrate.
std::pair<ProfileReport, CalibrationResult> profile_and_calibrate(const ExperimentConfig& cfg, const Model& model,
                                                                  const Dataset& calib,
                                                                  const PersonalisationConfig& loss_cfg);

struct SimulationResult {
  std::vector<EventLogRow> log;
  std::optional<Index> first_drift_step;
  Index explorations = 0;
  Index personalisations = 0;
};
SimulationResult simulate(const ExperimentConfig& cfg, const Model& global, const GlobalData& data,
                          const std::vector<UserSplit>& users, OutputDir* out);

/// Runs one named experiment (or "all") writing into `out`.
void run_experiment(const std::string& name, const ExperimentConfig& cfg, OutputDir& out);
extern const std::vector<std::string> kExperiments;

}  // namespace mexit::cli
