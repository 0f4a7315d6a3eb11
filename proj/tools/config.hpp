#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mexit/data.hpp"
#include "mexit/inference.hpp"
#include "mexit/losses.hpp"
#include "mexit/model.hpp"
#include "mexit/orchestrator.hpp"
#include "mexit/profiler.hpp"
#include "mexit/training.hpp"

namespace mexit::cli {

struct DataConfig {
  SyntheticSpec synthetic;
  Index train_samples = 6000;
  Index test_samples = 1000;
  Index pool_samples = 20000;
  // IDX files replace the generator when set.
  std::string train_images, train_labels, test_images, test_labels;
};

struct UsersConfig {
  Index n_users = 3;
  Index samples_per_user = 900;
  Index test_per_user = 400;
  double sigma = 1.0;
  double calib_fraction = 0.2;
};

struct ModelConfig {
  BackboneSpec backbone;
  Index num_exits = 3;
  Index head_channels = 16;
  std::string checkpoint;  // start from this global model instead of training one
};

struct CalibConfig {
  CalibrationOptions options;
  double grid_step = 0.05;

  std::vector<double> grid() const;
};

struct SimConfig {
  OrchestratorConfig orchestrator;
  Index events = 3000;
  Index shift_at = 1000;  // sample index where the user distribution re-centres; 0 disables
  Index shift_by = 5;     // classes the center moves by
  Index plug_every = 0;   // emit device_plugged_in every N events; 0 disables
  Index tick_every = 100;
  bool labelled = false;
};

struct ExperimentOptions {
  std::vector<Index> sample_counts{128, 512, 2048};
  Index training_cost_samples = 256;
  int training_cost_epochs = 1;
  Index sweep_user = 0;
  bool svg = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out = "out";
  int threads = 1;
  DataConfig data;
  UsersConfig users;
  ModelConfig model;
  GlobalTrainConfig global;
  PersonalisationConfig personalise;
  CalibConfig calibration;
  LatencyModel latency;
  SimConfig simulate;
  ExperimentOptions experiment;

  void validate() const;
};

/// Seed for a named stage, derived from the master seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage);

/// INI text with [section] headers and key = value lines. Unknown keys are
/// rejected.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config(std::istream& is);
/// `section.key=value`
void apply_override(ExperimentConfig& cfg, const std::string& assignment);
void write_config(std::ostream& os, const ExperimentConfig& cfg);

}  // namespace mexit::cli
