#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mexit/orchestrator.hpp"
#include "mexit/training.hpp"

using namespace mexit;

namespace {

SyntheticSpec data_spec() {
  SyntheticSpec s;
  s.sample_shape = {1, 8, 8};
  s.num_classes = 4;
  s.blob_sigma = 1.0;
  s.position_jitter = 0.5;
  s.distractor_blobs = 1;
  return s;
}

const Model& model() {
  static const Model m = [] {
    BackboneSpec spec;
    spec.input_shape = {1, 8, 8};
    spec.num_classes = 4;
    spec.widths = {4, 8, 8};
    spec.pool_after = {1};
    Model m = make_backbone<float>(spec, 1);
    attach_exits(m, 2, 2);
    GlobalTrainConfig cfg;
    cfg.epochs = 3;
    train_global(m, generate_synthetic(data_spec(), 300, 3), cfg);
    return m;
  }();
  return m;
}

CalibrationResult calibration(double thr, std::vector<double> baseline = {0.5, 0.5}) {
  CalibrationResult c;
  c.threshold = thr;
  c.selected_exits = {1, 2};
  c.baseline_loss = std::move(baseline);
  return c;
}

bool has(const StepOutcome& o, Action a) { return std::find(o.actions.begin(), o.actions.end(), a) != o.actions.end(); }

Dataset stream(Index n, std::uint64_t seed) { return generate_synthetic(data_spec(), n, seed); }

Event sample_event(const Dataset& d, Index s, bool labelled = false) {
  return Event::sample(d.images.gather({s}), labelled ? std::optional<Index>(d.labels[static_cast<std::size_t>(s)]) : std::nullopt);
}

}  // namespace

TEST(DetectDrift, EqualToBaselineResetsCounter) {
  std::vector<Index> c{5};
  EXPECT_FALSE(detect_drift({1.0}, {1.0}, 0.2, 3, c));
  EXPECT_EQ(c[0], 0);
}

TEST(DetectDrift, FiresOnWindowthConsecutiveCall) {
  const double high = 1.0 * 1.2 * 1.01;
  std::vector<Index> c;
  for (int k = 1; k < 5; ++k) EXPECT_FALSE(detect_drift({high}, {1.0}, 0.2, 5, c)) << k;
  EXPECT_TRUE(detect_drift({high}, {1.0}, 0.2, 5, c));
}

TEST(DetectDrift, LowEvaluationBreaksTheRun) {
  std::vector<Index> c;
  for (int k = 1; k < 5; ++k) detect_drift({1.3}, {1.0}, 0.2, 5, c);
  EXPECT_FALSE(detect_drift({1.0}, {1.0}, 0.2, 5, c));
  EXPECT_EQ(c[0], 0);
  for (int k = 1; k < 5; ++k) EXPECT_FALSE(detect_drift({1.3}, {1.0}, 0.2, 5, c));
}

TEST(DetectDrift, CountersArePerExit) {
  std::vector<Index> c;
  // exits alternate being high: neither reaches a run of 3
  for (int k = 0; k < 10; ++k) EXPECT_FALSE(detect_drift({k % 2 ? 2.0 : 1.0, k % 2 ? 1.0 : 2.0}, {1.0, 1.0}, 0.2, 3, c));
  EXPECT_THROW(detect_drift({1.0}, {1.0, 1.0}, 0.2, 3, c), ConfigError);
}

TEST(ShouldPersonalise, FreshStateIsFalse) {
  Orchestrator o(model(), {}, calibration(0.5));
  EXPECT_FALSE(o.should_personalise());
}

TEST(ShouldPersonalise, NewSampleBoundaryIsInclusive) {
  OrchestratorConfig cfg;
  cfg.p_expl = 0.0;
  cfg.min_new_samples = 5;
  Orchestrator o(model(), cfg, calibration(0.5));
  const auto d = stream(5, 4);
  for (Index s = 0; s < 4; ++s) {
    EXPECT_FALSE(has(o.step(sample_event(d, s)), Action::SchedulePersonalisation));
    EXPECT_FALSE(o.should_personalise());
  }
  EXPECT_TRUE(has(o.step(sample_event(d, 4)), Action::SchedulePersonalisation));
  EXPECT_EQ(o.new_sample_count(), 5);
  EXPECT_TRUE(o.should_personalise());
  EXPECT_EQ(o.phase(), Phase::PersonalisationScheduled);
}

TEST(ShouldPersonalise, ThresholdDeviationAloneTriggers) {
  OrchestratorConfig cfg;
  cfg.p_expl = 1.0;
  cfg.drift_window = 1;
  cfg.min_new_samples = 1000;
  cfg.thr_conf_active = 0.3;
  cfg.thr_conf_raised = 0.3 + 2 * cfg.deviation_limit;
  Orchestrator o(model(), cfg, calibration(0.3, {1e-9, 1e-9}));
  const auto out = o.step(sample_event(stream(1, 5), 0));
  EXPECT_TRUE(out.drift);
  EXPECT_NEAR(o.policy().threshold - o.calibrated_threshold(), 2 * cfg.deviation_limit, 1e-12);
  EXPECT_LT(o.new_sample_count(), cfg.min_new_samples);
  EXPECT_TRUE(o.should_personalise());
}

TEST(Orchestrator, ScriptedDriftRaisesAndSchedulesInOneStep) {
  OrchestratorConfig cfg;
  cfg.p_expl = 1.0;
  cfg.drift_window = 4;
  cfg.min_new_samples = 1000;
  Orchestrator o(model(), cfg, calibration(0.5, {1e-9, 1e-9}));
  const auto d = stream(4, 6);
  for (Index s = 0; s < 3; ++s) {
    const auto out = o.step(sample_event(d, s));
    EXPECT_FALSE(out.drift);
    EXPECT_TRUE(out.explored);
  }
  const auto out = o.step(sample_event(d, 3));
  EXPECT_TRUE(out.drift);
  EXPECT_TRUE(has(out, Action::RaiseThreshold));
  EXPECT_TRUE(has(out, Action::SchedulePersonalisation));
  EXPECT_EQ(o.policy().threshold, 0.9);
  EXPECT_EQ(o.phase(), Phase::PersonalisationScheduled);
}

TEST(Orchestrator, RaiseNeverLowersThreshold) {
  OrchestratorConfig cfg;
  cfg.p_expl = 1.0;
  cfg.drift_window = 1;
  Orchestrator o(model(), cfg, calibration(0.97, {1e-9, 1e-9}));
  const auto out = o.step(sample_event(stream(1, 7), 0));
  EXPECT_TRUE(out.drift);
  EXPECT_EQ(o.policy().threshold, 0.97);
  EXPECT_GE(o.policy().threshold, cfg.thr_conf_active);
}

TEST(Orchestrator, PlugInRunsTheCycleOnlyWhenScheduled) {
  OrchestratorConfig cfg;
  cfg.p_expl = 0.0;
  cfg.min_new_samples = 2;
  Orchestrator o(model(), cfg, calibration(0.5));
  EXPECT_TRUE(o.step(Event::plugged_in()).actions.empty());
  const auto d = stream(2, 8);
  o.step(sample_event(d, 0));
  o.step(sample_event(d, 1));
  const auto out = o.step(Event::plugged_in());
  EXPECT_EQ(out.actions, (std::vector<Action>{Action::RunPersonalisation, Action::RunProfile, Action::RunCalibration}));
  EXPECT_EQ(o.buffered_dataset().size(), 2);

  o.complete_personalisation(model(), calibration(0.6));
  EXPECT_EQ(o.new_sample_count(), 0);
  EXPECT_EQ(o.phase(), Phase::Inference);
  EXPECT_EQ(o.policy().threshold, 0.6);
  EXPECT_EQ(o.buffered_dataset().size(), 0);
  EXPECT_TRUE(o.step(Event::plugged_in()).actions.empty());
}

TEST(Orchestrator, TickSchedulesWhenDue) {
  OrchestratorConfig cfg;
  cfg.p_expl = 0.0;
  cfg.min_new_samples = 0;
  Orchestrator o(model(), cfg, calibration(0.5));
  const auto out = o.step(Event::tick());
  EXPECT_TRUE(has(out, Action::SchedulePersonalisation));
  EXPECT_FALSE(has(o.step(Event::tick()), Action::SchedulePersonalisation));
}

TEST(Orchestrator, ZeroExplorationIsPlainEarlyExit) {
  OrchestratorConfig cfg;
  cfg.p_expl = 0.0;
  Orchestrator o(model(), cfg, calibration(0.6));
  const auto d = stream(300, 9);
  for (Index s = 0; s < 300; ++s) {
    const auto out = o.step(sample_event(d, s));
    EXPECT_FALSE(out.explored);
    EXPECT_FALSE(has(out, Action::Explore));
    EXPECT_EQ(out.extra_flops, 0);
    const auto ref = infer(model(), d.images.gather({s}), {{1, 2}, 0.6});
    EXPECT_EQ(out.inference->flops, ref.flops);
    EXPECT_EQ(out.inference->exit_taken, ref.exit_taken);
  }
  EXPECT_EQ(o.exploration_count(), 0);
}

TEST(Orchestrator, FullExplorationPaysForTheWholeModel) {
  OrchestratorConfig cfg;
  cfg.p_expl = 1.0;
  cfg.drift_window = 1000000;
  Orchestrator o(model(), cfg, calibration(0.6));
  const auto d = stream(200, 10);
  const auto full = flops_to_exit(model(), model().final_exit(), {1, 2});
  for (Index s = 0; s < 200; ++s) {
    const auto out = o.step(sample_event(d, s));
    EXPECT_TRUE(out.explored);
    EXPECT_EQ(out.inference->flops + out.extra_flops, full);
    const auto ref = infer(model(), d.images.gather({s}), {{1, 2}, 0.6});
    EXPECT_EQ(out.inference->exit_taken, ref.exit_taken);
    EXPECT_EQ(out.inference->predicted, ref.predicted);
  }
  EXPECT_EQ(o.exploration_count(), 200);
}

TEST(Orchestrator, ExplorationRateWithinThreeSigma) {
  OrchestratorConfig cfg;
  cfg.p_expl = 0.1;
  cfg.drift_window = 1000000;
  cfg.min_new_samples = 1000000;
  cfg.seed = 77;
  Orchestrator o(model(), cfg, calibration(0.6));
  const auto d = stream(100, 11);
  const Index n = 10000;
  std::int64_t extra = 0, expected_extra = 0;
  const auto full = flops_to_exit(model(), model().final_exit(), {1, 2});
  for (Index s = 0; s < n; ++s) {
    const auto out = o.step(sample_event(d, s % 100));
    extra += out.extra_flops;
    if (out.explored) expected_extra += full - out.inference->flops;
  }
  const double sigma = std::sqrt(n * 0.1 * 0.9);
  EXPECT_LT(std::abs(static_cast<double>(o.exploration_count()) - n * 0.1), 3 * sigma);
  EXPECT_EQ(extra, expected_extra);
}

TEST(Orchestrator, SameSeedSameScriptIsBitReproducible) {
  auto run = [] {
    OrchestratorConfig cfg;
    cfg.p_expl = 0.3;
    cfg.drift_window = 3;
    cfg.min_new_samples = 40;
    Orchestrator o(model(), cfg, calibration(0.5, {0.05, 0.05}));
    const auto d = stream(60, 12);
    for (Index s = 0; s < 60; ++s) {
      o.step(sample_event(d, s, s % 2 == 0));
      if (s % 25 == 24) o.step(Event::plugged_in());
      if (s % 10 == 9) o.step(Event::tick());
    }
    std::ostringstream os;
    o.write_log_csv(os);
    return os.str();
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(a.substr(0, a.find('\n')), "step,event,phase,actions,active_thr,drift_flag,new_sample_count");
}

TEST(Orchestrator, NoDriftOnTheCalibrationSetAfterReset) {
  const auto& m = model();
  const auto calib = stream(400, 13);
  OrchestratorConfig cfg;
  cfg.p_expl = 1.0;
  ProfileOptions po;
  po.loss = cfg.loss;
  po.use_labels = false;
  const auto cal = calibrate(profile(m, calib, po));
  Orchestrator o(m, cfg, calibration(0.5, {1e-9, 1e-9}));
  o.complete_personalisation(m, cal);
  for (Index s = 0; s < calib.size(); ++s) EXPECT_FALSE(o.step(sample_event(calib, s)).drift) << s;
}

TEST(Orchestrator, BufferedLabelsKeptOnlyWhenComplete) {
  OrchestratorConfig cfg;
  cfg.p_expl = 0.0;
  Orchestrator o(model(), cfg, calibration(0.5));
  const auto d = stream(3, 14);
  o.step(sample_event(d, 0, true));
  o.step(sample_event(d, 1, true));
  EXPECT_EQ(o.buffered_dataset().labels, (std::vector<Index>{d.labels[0], d.labels[1]}));
  o.step(sample_event(d, 2, false));
  EXPECT_FALSE(o.buffered_dataset().has_labels());
  EXPECT_EQ(o.buffered_dataset().images.gather({1}), d.images.gather({1}));
}

TEST(Orchestrator, MalformedEventsRejected) {
  Orchestrator o(model(), {}, calibration(0.5));
  EXPECT_THROW(o.step(Event::sample(Tensorf{})), ConfigError);
  EXPECT_THROW(o.step(Event::sample(Tensorf({1, 1, 9, 9}))), ConfigError);
  EXPECT_THROW(o.step(Event::sample(Tensorf({2, 1, 8, 8}))), ConfigError);
  EXPECT_THROW(o.step(Event::sample(Tensorf({1, 1, 8, 8}), Index{9})), ConfigError);
  Event bad = Event::plugged_in();
  bad.label = 1;
  EXPECT_THROW(o.step(bad), ConfigError);
  EXPECT_NO_THROW(o.step(Event::sample(Tensorf({1, 8, 8}))));
}

TEST(OrchestratorConfig, Validation) {
  auto bad = [](auto mutate) {
    OrchestratorConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](auto& c) { c.p_expl = 1.5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.thr_conf_raised = 0.4; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.drift_factor = 0.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.drift_window = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.ewma_smoothing = 0.0; }).validate(), ConfigError);
  EXPECT_THROW(Orchestrator(model(), {}, calibration(0.5, {0.5})), ConfigError);
}
