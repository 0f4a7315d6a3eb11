#include "mexit/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <ostream>

namespace mexit {

void OrchestratorConfig::validate() const {
  if (!(p_expl >= 0.0 && p_expl <= 1.0)) throw ConfigError("p_expl must be in [0, 1]");
  if (!(thr_conf_active >= 0.0 && thr_conf_active <= 1.0)) throw ConfigError("thr_conf_active must be in [0, 1]");
  if (!(thr_conf_raised >= thr_conf_active && thr_conf_raised <= 1.0))
    throw ConfigError("thr_conf_raised must be in [thr_conf_active, 1]");
  if (!(drift_factor > 0.0)) throw ConfigError("drift_factor must be positive");
  if (drift_window < 1) throw ConfigError("drift_window must be >= 1");
  if (min_new_samples < 0) throw ConfigError("min_new_samples must be >= 0");
  if (!(deviation_limit >= 0.0)) throw ConfigError("deviation_limit must be >= 0");
  if (!(ewma_smoothing > 0.0 && ewma_smoothing <= 1.0)) throw ConfigError("ewma smoothing must be in (0, 1]");
}

std::string phase_name(Phase p) {
  switch (p) {
    case Phase::Inference: return "inference";
    case Phase::Exploration: return "exploration";
    case Phase::PersonalisationScheduled: return "personalisation_scheduled";
  }
  return "?";
}

std::string action_name(Action a) {
  switch (a) {
    case Action::RunInference: return "run_inference";
    case Action::Explore: return "explore";
    case Action::BufferSample: return "buffer_sample";
    case Action::RaiseThreshold: return "raise_threshold";
    case Action::SchedulePersonalisation: return "schedule_personalisation";
    case Action::RunPersonalisation: return "run_personalisation";
    case Action::RunProfile: return "run_profile";
    case Action::RunCalibration: return "run_calibration";
  }
  return "?";
}

std::string event_name(Event::Kind k) {
  switch (k) {
    case Event::Kind::SampleArrived: return "sample_arrived";
    case Event::Kind::DevicePluggedIn: return "device_plugged_in";
    case Event::Kind::TimerTick: return "timer_tick";
  }
  return "?";
}

bool detect_drift(const std::vector<double>& ewma, const std::vector<double>& baseline, double delta, Index window,
                  std::vector<Index>& counters) {
  if (ewma.size() != baseline.size()) throw ConfigError("detect_drift: ewma and baseline differ in length");
  counters.resize(ewma.size(), 0);
  bool drift = false;
  for (std::size_t i = 0; i < ewma.size(); ++i) {
    if (ewma[i] > baseline[i] * (1.0 + delta))
      ++counters[i];
    else
      counters[i] = 0;
    if (counters[i] >= window) drift = true;
  }
  return drift;
}

Orchestrator::Orchestrator(const Model& model, OrchestratorConfig cfg, const CalibrationResult& calibration)
    : model_(&model), cfg_(std::move(cfg)), rng_(cfg_.seed) {
  cfg_.validate();
  explore_labelled_ = cfg_.loss;
  explore_unlabelled_ = cfg_.loss;
  explore_unlabelled_.alpha = 0.0;
  if (explore_unlabelled_.beta == 0.0 && explore_unlabelled_.gamma == 0.0) explore_unlabelled_.beta = 1.0;
  explore_labelled_.validate();
  explore_unlabelled_.validate();
  reset_from(calibration);
}

void Orchestrator::reset_from(const CalibrationResult& calibration) {
  policy_ = calibration.policy();
  policy_.validate(*model_);
  thr_calibrated_ = calibration.threshold;
  baseline_ = calibration.baseline_loss;
  if (baseline_.size() != static_cast<std::size_t>(model_->num_exits()))
    throw ConfigError("calibration baseline has " + std::to_string(baseline_.size()) + " exits, model has " +
                      std::to_string(model_->num_exits()));
  ewma_ = baseline_;
  counters_.assign(baseline_.size(), 0);
  new_samples_ = 0;
  buffer_.clear();
  buffer_labels_.clear();
  scheduled_ = false;
  phase_ = Phase::Inference;
}

void Orchestrator::complete_personalisation(const Model& model, const CalibrationResult& calibration) {
  model_ = &model;
  reset_from(calibration);
}

bool Orchestrator::should_personalise() const {
  return new_samples_ >= cfg_.min_new_samples || std::abs(policy_.threshold - thr_calibrated_) > cfg_.deviation_limit;
}

void Orchestrator::schedule(StepOutcome& out) {
  if (scheduled_) return;
  scheduled_ = true;
  out.actions.push_back(Action::SchedulePersonalisation);
}

StepOutcome Orchestrator::on_sample(const Event& event) {
  StepOutcome out;
  const Model& m = *model_;
  const Tensorf x = event.input.rank() == 3 ? event.input.reshaped(detail::batched(1, event.input.shape())) : event.input;
  check_input(m, x);
  if (x.dim(0) != 1) throw ConfigError("sample_arrived carries exactly one sample");
  if (event.label && (*event.label < 0 || *event.label >= m.num_classes)) throw ConfigError("sample label out of range");

  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool explore = cfg_.p_expl > 0.0 && u(rng_) < cfg_.p_expl;
  out.actions.push_back(Action::RunInference);
  if (!explore) {
    out.inference = infer(m, x, policy_, cfg_.latency);
  } else {
    const auto t0 = std::chrono::steady_clock::now();
    const auto outs = forward_all_exits(m, x);
    const double elapsed_us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    InferenceResult r;
    bool done = false;
    for (Index e : policy_.selected_exits) {
      const auto c = confidence_of(outs[static_cast<std::size_t>(e - 1)].slice(0));
      if (c.confidence > policy_.threshold) {
        r = {c.predicted, e, c.confidence, 0, 0.0};
        done = true;
        break;
      }
    }
    if (!done) {
      const auto c = confidence_of(outs.back().slice(0));
      r = {c.predicted, m.final_exit(), c.confidence, 0, 0.0};
    }
    r.flops = flops_to_exit(m, r.exit_taken, policy_.selected_exits);
    r.latency_us = cfg_.latency.mode == LatencyModel::Mode::Measured ? elapsed_us : cfg_.latency.synthetic_us(r.flops);
    out.inference = r;
    out.explored = true;
    out.extra_flops = flops_to_exit(m, m.final_exit(), policy_.selected_exits) - r.flops;
    out.actions.push_back(Action::Explore);
    ++explorations_;

    if (m.num_exits() > 0) {
      std::vector<Vector<float>> logits;
      for (const auto& o : outs) logits.emplace_back(o.slice(0));
      const auto losses =
          personalisation_loss(logits, event.label, event.label ? explore_labelled_ : explore_unlabelled_).per_exit;
      const double a = cfg_.ewma_smoothing;
      for (Index e : policy_.selected_exits) {
        const auto k = static_cast<std::size_t>(e - 1);
        ewma_[k] = (1.0 - a) * ewma_[k] + a * losses[k];
      }
      std::vector<double> ew, base;
      std::vector<Index> cnt;
      for (Index e : policy_.selected_exits) {
        const auto k = static_cast<std::size_t>(e - 1);
        ew.push_back(ewma_[k]);
        base.push_back(baseline_[k]);
        cnt.push_back(counters_[k]);
      }
      out.drift = detect_drift(ew, base, cfg_.drift_factor, cfg_.drift_window, cnt);
      for (std::size_t j = 0; j < policy_.selected_exits.size(); ++j)
        counters_[static_cast<std::size_t>(policy_.selected_exits[j] - 1)] = out.drift ? 0 : cnt[j];
    }
  }

  buffer_.push_back(x);
  buffer_labels_.push_back(event.label);
  ++new_samples_;
  out.actions.push_back(Action::BufferSample);

  if (out.drift && !scheduled_) {
    if (cfg_.thr_conf_raised > policy_.threshold) policy_.threshold = cfg_.thr_conf_raised;
    out.actions.push_back(Action::RaiseThreshold);
    schedule(out);
  } else if (should_personalise()) {
    schedule(out);
  }
  phase_ = scheduled_ ? Phase::PersonalisationScheduled : explore ? Phase::Exploration : Phase::Inference;
  return out;
}

StepOutcome Orchestrator::step(const Event& event) {
  StepOutcome out;
  switch (event.kind) {
    case Event::Kind::SampleArrived:
      if (event.input.empty()) throw ConfigError("sample_arrived without an input");
      out = on_sample(event);
      break;
    case Event::Kind::DevicePluggedIn:
      if (!event.input.empty() || event.label) throw ConfigError("device_plugged_in carries no payload");
      if (!scheduled_ && should_personalise()) schedule(out);
      if (scheduled_) {
        out.actions.push_back(Action::RunPersonalisation);
        out.actions.push_back(Action::RunProfile);
        out.actions.push_back(Action::RunCalibration);
      }
      break;
    case Event::Kind::TimerTick:
      if (!event.input.empty() || event.label) throw ConfigError("timer_tick carries no payload");
      if (!scheduled_ && should_personalise()) schedule(out);
      if (scheduled_) phase_ = Phase::PersonalisationScheduled;
      break;
  }
  ++steps_;
  log_.push_back({steps_, event_name(event.kind), phase_, out.actions, policy_.threshold, out.drift, new_samples_});
  return out;
}

Dataset Orchestrator::buffered_dataset() const {
  Dataset d;
  d.num_classes = model_->num_classes;
  if (buffer_.empty()) return d;
  Shape shape = buffer_.front().shape();
  shape[0] = static_cast<Index>(buffer_.size());
  d.images = Tensorf(shape);
  const Index per = buffer_.front().size();
  for (std::size_t i = 0; i < buffer_.size(); ++i) d.images.vec().segment(static_cast<Index>(i) * per, per) = buffer_[i].vec();
  const bool all_labelled = std::all_of(buffer_labels_.begin(), buffer_labels_.end(), [](const auto& y) { return y.has_value(); });
  if (all_labelled)
    for (const auto& y : buffer_labels_) d.labels.push_back(*y);
  return d;
}

void Orchestrator::write_log_csv(std::ostream& os) const {
  os << "step,event,phase,actions,active_thr,drift_flag,new_sample_count\n" << std::setprecision(6) << std::fixed;
  for (const auto& r : log_) {
    os << r.step << ',' << r.event << ',' << phase_name(r.phase) << ',';
    for (std::size_t i = 0; i < r.actions.size(); ++i) os << (i ? ";" : "") << action_name(r.actions[i]);
    os << ',' << r.active_thr << ',' << (r.drift ? 1 : 0) << ',' << r.new_samples << '\n';
  }
}

}  // namespace mexit
