#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "mexit/profiler.hpp"
#include "mexit/training.hpp"

using namespace mexit;

namespace {

// Hand-built report: samples given as per-exit (predicted, confidence) with
// the last pair being the final exit; linear latency of 1 us per flop.
ProfileReport synthetic_report(Index num_exits, const std::vector<std::vector<std::pair<Index, double>>>& outs,
                               const std::vector<Index>& reference, std::vector<double> thresholds = {}) {
  ProfileReport r;
  r.num_exits = num_exits;
  for (Index e = 1; e <= num_exits; ++e) r.profiled_exits.push_back(e);
  r.thresholds = thresholds.empty() ? default_threshold_grid() : thresholds;
  for (std::size_t s = 0; s < outs.size(); ++s) {
    SampleRecord rec;
    for (const auto& [p, c] : outs[s]) {
      rec.predicted.push_back(p);
      rec.confidence.push_back(c);
    }
    rec.loss.assign(static_cast<std::size_t>(num_exits), 0.5);
    rec.reference = reference[s];
    r.samples.push_back(rec);
  }
  for (Index e = 1; e <= num_exits + 1; ++e) {
    r.prefix_flops.push_back(100 * e);
    r.head_flops.push_back(10);
    r.params.push_back(1000 * e);
    r.prefix_latency_us.push_back(100.0 * static_cast<double>(e));
    r.head_latency_us.push_back(10.0);
    const auto k = static_cast<std::size_t>(e - 1);
    Index correct = 0;
    for (const auto& s : r.samples) correct += s.predicted[k] == s.reference;
    r.exit_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(r.samples.size()));
    r.mean_confidence.push_back(0.5);
  }
  r.mean_loss.assign(static_cast<std::size_t>(num_exits), 0.5);
  for (double t : r.thresholds) r.per_threshold.push_back(r.evaluate(r.profiled_exits, t));
  return r;
}

bool dominates(const std::pair<double, double>& q, const std::pair<double, double>& p) {
  return q.first <= p.first && q.second >= p.second && (q.first < p.first || q.second > p.second);
}

// O(n^2) oracle: non-dominated points, first of any exact duplicate group, by latency
std::vector<std::size_t> brute_front(const std::vector<std::pair<double, double>>& pts) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < pts.size() && ok; ++j) {
      if (dominates(pts[j], pts[i])) ok = false;
      if (j < i && pts[j] == pts[i]) ok = false;
    }
    if (ok) keep.push_back(i);
  }
  std::stable_sort(keep.begin(), keep.end(), [&](auto a, auto b) { return pts[a].first < pts[b].first; });
  return keep;
}

struct Fixture {
  Model model;
  Dataset calib;
};

const Fixture& trained() {
  static const Fixture f = [] {
    BackboneSpec spec;
    spec.input_shape = {1, 12, 12};
    spec.num_classes = 4;
    spec.widths = {4, 8, 8, 8};
    spec.pool_after = {1, 2};
    Model m = make_backbone<float>(spec, 3);
    attach_exits(m, 3, 4);
    SyntheticSpec data;
    data.sample_shape = {1, 12, 12};
    data.num_classes = 4;
    GlobalTrainConfig cfg;
    cfg.epochs = 3;
    train_global(m, generate_synthetic(data, 300, 5), cfg);
    return Fixture{m, generate_synthetic(data, 157, 6)};
  }();
  return f;
}

}  // namespace

TEST(ParetoFront, WorkedExample) {
  const std::vector<std::pair<double, double>> pts{{10, 0.70}, {20, 0.65}, {30, 0.80}};
  EXPECT_EQ(pareto_front(pts), (std::vector<std::size_t>{0, 2}));
}

TEST(ParetoFront, SinglePoint) { EXPECT_EQ(pareto_front({{5, 0.5}}), (std::vector<std::size_t>{0})); }

TEST(ParetoFront, DuplicatesKeepFirst) {
  EXPECT_EQ(pareto_front({{5, 0.5}, {5, 0.5}, {5, 0.5}}), (std::vector<std::size_t>{0}));
  EXPECT_EQ(pareto_front({{7, 0.9}, {5, 0.5}, {5, 0.5}}), (std::vector<std::size_t>{1, 0}));
}

TEST(ParetoFront, EmptyRejected) { EXPECT_THROW(pareto_front({}), ConfigError); }

TEST(ParetoFrontProperty, MatchesBruteForceOn100Sets) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(1, 40)(rng);
    // coarse values so ties and duplicates are common
    std::uniform_int_distribution<int> lat(0, 12), acc(0, 10);
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < n; ++i) pts.emplace_back(lat(rng) * 2.5, acc(rng) / 10.0);
    EXPECT_EQ(pareto_front(pts), brute_front(pts)) << "trial " << trial;
  }
}

TEST(CalibrateThreshold, LargeToleranceChoosesZero) {
  const auto r = synthetic_report(1, {{{0, 0.6}, {0, 0.9}}, {{1, 0.7}, {2, 0.9}}, {{2, 0.5}, {2, 0.9}}}, {0, 2, 2});
  const auto c = calibrate_threshold(r, 100.0);
  EXPECT_EQ(c.threshold, 0.0);
  EXPECT_EQ(c.expected_accuracy, r.evaluate({1}, 0.0).accuracy);
}

TEST(CalibrateThreshold, PerfectConfidentExitAboveEightTenths) {
  // exit 1 matches the final exit whenever its confidence is > 0.8 and is
  // wrong below that
  std::vector<std::vector<std::pair<Index, double>>> outs;
  std::vector<Index> ref;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> hi(0.81, 0.99), lo(0.3, 0.79);
  for (int s = 0; s < 200; ++s) {
    const Index y = s % 5;
    if (s % 2)
      outs.push_back({{y, hi(rng)}, {y, 0.95}});
    else
      outs.push_back({{(y + 1) % 5, lo(rng)}, {y, 0.95}});
    ref.push_back(y);
  }
  const auto r = synthetic_report(1, outs, ref);
  const auto c = calibrate_threshold(r, 0.0);
  EXPECT_LE(c.threshold, 0.8);
  EXPECT_EQ(c.expected_accuracy, 1.0);
  EXPECT_NEAR(c.expected_latency_us, 0.5 * 110 + 0.5 * (210 + 10), 1e-9);
}

TEST(CalibrateThreshold, NothingWithinToleranceFallsBackToOne) {
  // exit 1 is always confident and always wrong
  std::vector<std::vector<std::pair<Index, double>>> outs(10, {{1, 1.0 - 1e-9}, {0, 0.9}});
  const auto r = synthetic_report(1, outs, std::vector<Index>(10, 0), {0.0, 0.5, 0.9});
  const auto c = calibrate_threshold(r, 5.0);
  EXPECT_EQ(c.threshold, 1.0);
  EXPECT_EQ(c.expected_accuracy, r.final_accuracy());
  EXPECT_EQ(c.policy().threshold, 1.0);
}

TEST(CalibrateThreshold, NegativeToleranceRejected) {
  const auto r = synthetic_report(1, {{{0, 0.6}, {0, 0.9}}}, {0});
  EXPECT_THROW(calibrate_threshold(r, -1.0), ConfigError);
}

TEST(CalibrateThresholdProperty, SmallestQualifyingGridPointOnTheFront) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> conf(0.1, 1.0);
  std::uniform_int_distribution<Index> cls(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    const Index m = std::uniform_int_distribution<Index>(1, 4)(rng);
    std::vector<std::vector<std::pair<Index, double>>> outs;
    std::vector<Index> ref;
    for (int s = 0; s < 60; ++s) {
      const Index y = cls(rng);
      std::vector<std::pair<Index, double>> o;
      for (Index e = 0; e <= m; ++e) {
        const double c = conf(rng);
        o.emplace_back(c > 0.6 || e == m ? y : cls(rng), c);
      }
      outs.push_back(o);
      ref.push_back(y);
    }
    const auto r = synthetic_report(m, outs, ref);
    const double tol = std::uniform_real_distribution<double>(0.0, 20.0)(rng);
    const auto c = calibrate_threshold(r, tol);
    double expect = 1.0;
    for (double t : r.thresholds)
      if (r.evaluate(r.profiled_exits, t).accuracy >= r.final_accuracy() - tol / 100.0) {
        expect = t;
        break;
      }
    EXPECT_EQ(c.threshold, expect);
    EXPECT_GE(c.expected_accuracy, r.final_accuracy() - tol / 100.0 - 1e-12);
    bool on_front = c.threshold == 1.0;
    for (const auto& p : c.pareto) on_front |= p.threshold == c.threshold;
    EXPECT_TRUE(on_front);
  }
}

TEST(PruneExits, ZeroRateExitPruned) {
  // exit 2 never fires because exit 1 always captures first
  std::vector<std::vector<std::pair<Index, double>>> outs(20, {{0, 0.9}, {0, 0.95}, {0, 0.99}});
  const auto r = synthetic_report(2, outs, std::vector<Index>(20, 0));
  EXPECT_EQ(prune_exits(r, {1, 2}, 0.5, 0.05, 2.0), (std::vector<Index>{1}));
}

TEST(PruneExits, AccurateActiveExitsKept) {
  std::vector<std::vector<std::pair<Index, double>>> outs;
  for (int s = 0; s < 20; ++s) outs.push_back({{0, s % 2 ? 0.9 : 0.2}, {0, 0.9}, {0, 0.99}});
  const auto r = synthetic_report(2, outs, std::vector<Index>(20, 0));
  EXPECT_EQ(prune_exits(r, {1, 2}, 0.5, 0.05, 2.0), (std::vector<Index>{1, 2}));
}

TEST(PruneExits, InaccurateExitPruned) {
  // exit 1 captures 10 samples with 3 right (0.3); final is right on 9 of 10
  std::vector<std::vector<std::pair<Index, double>>> outs;
  std::vector<Index> ref;
  for (int s = 0; s < 10; ++s) {
    outs.push_back({{s < 3 ? 0 : 1, 0.9}, {s < 9 ? 0 : 1, 0.9}});
    ref.push_back(0);
  }
  const auto r = synthetic_report(1, outs, ref);
  EXPECT_DOUBLE_EQ(r.final_accuracy(), 0.9);
  EXPECT_TRUE(prune_exits(r, {1}, 0.5, 0.0, 10.0).empty());
  EXPECT_EQ(prune_exits(r, {1}, 0.5, 0.0, 70.0), (std::vector<Index>{1}));
}

TEST(Calibrate, PruningKeepsFinalExitAsFailSafe) {
  std::vector<std::vector<std::pair<Index, double>>> outs(20, {{1, 0.99}, {1, 0.99}, {0, 0.9}});
  const auto r = synthetic_report(2, outs, std::vector<Index>(20, 0));
  const auto c = calibrate(r);
  EXPECT_TRUE(c.selected_exits.empty());
  EXPECT_EQ(c.expected_accuracy, 1.0);
  const auto op = r.evaluate(c.selected_exits, c.threshold);
  EXPECT_EQ(op.exit_rate.back(), 1.0);
}

TEST(Calibrate, SummaryRoundTrip) {
  const auto& f = trained();
  const auto r = profile(f.model, f.calib);
  const auto c = calibrate(r);
  std::stringstream ss;
  write_calibration_summary(ss, c);
  const auto back = read_calibration_summary(ss);
  EXPECT_EQ(back.threshold, c.threshold);
  EXPECT_EQ(back.selected_exits, c.selected_exits);
  EXPECT_EQ(back.expected_accuracy, c.expected_accuracy);
  EXPECT_EQ(back.baseline_loss, c.baseline_loss);
}

TEST(Calibrate, MalformedSummaryRejected) {
  std::istringstream bad("threshold = banana\n");
  EXPECT_THROW(read_calibration_summary(bad), LoadError);
  std::istringstream missing("threshold = 0.5\n");
  EXPECT_THROW(read_calibration_summary(missing), LoadError);
}

TEST(Profile, SinglePassOverCalibrationSet) {
  const auto& f = trained();
  const auto before = forward_sample_count();
  const auto r = profile(f.model, f.calib);
  EXPECT_EQ(forward_sample_count() - before, static_cast<std::uint64_t>(f.calib.size()));
  EXPECT_EQ(static_cast<Index>(r.samples.size()), f.calib.size());
}

TEST(Profile, RatesSumToOneAndAccuraciesBounded) {
  const auto& f = trained();
  const auto r = profile(f.model, f.calib);
  ASSERT_EQ(r.per_threshold.size(), 21u);
  for (const auto& op : r.per_threshold) {
    double s = 0.0;
    for (double rate : op.exit_rate) s += rate;
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_GE(op.accuracy, 0.0);
    EXPECT_LE(op.accuracy, 1.0);
  }
  for (double a : r.exit_accuracy) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Profile, FinalExitAsTruthWithoutLabels) {
  const auto& f = trained();
  const auto r = profile(f.model, f.calib.without_labels());
  EXPECT_EQ(r.reference_mode, ReferenceMode::FinalExitAsTruth);
  EXPECT_EQ(r.final_accuracy(), 1.0);
  ProfileOptions o;
  o.use_labels = false;
  EXPECT_EQ(profile(f.model, f.calib, o).final_accuracy(), 1.0);
}

TEST(Profile, AllExitsAgreeWithLabels) {
  Model m = trained().model;
  for (auto& e : m.exits) e.layers.back().bias[1] = 1e4f;
  m.classifier.back().bias[1] = 1e4f;
  Dataset calib = trained().calib;
  std::fill(calib.labels.begin(), calib.labels.end(), 1);
  const auto r = profile(m, calib);
  for (double a : r.exit_accuracy) EXPECT_EQ(a, 1.0);
}

TEST(Profile, MeanFlopsMatchInferBatch) {
  const auto& f = trained();
  const auto r = profile(f.model, f.calib);
  for (std::size_t k : {std::size_t{4}, std::size_t{12}, std::size_t{18}}) {
    const auto& op = r.per_threshold[k];
    const auto b = infer_batch(f.model, f.calib.images, {r.profiled_exits, op.threshold}, {}, &f.calib.labels);
    EXPECT_NEAR(op.mean_flops, b.summary.mean_flops, 1e-9 * op.mean_flops);
    EXPECT_NEAR(op.accuracy, *b.summary.accuracy, 1e-9);
    EXPECT_NEAR(op.mean_latency_us, b.summary.mean_latency_us, 1e-9 * op.mean_latency_us);
    double weighted = 0.0;
    for (Index e = 1; e <= r.final_exit(); ++e)
      weighted += op.exit_rate[static_cast<std::size_t>(e - 1)] *
                  static_cast<double>(flops_to_exit(f.model, e, r.profiled_exits));
    EXPECT_NEAR(op.mean_flops, weighted, 1e-9 * weighted);
  }
}

TEST(Profile, CalibratedAccuracyReproducedByInference) {
  const auto& f = trained();
  const auto r = profile(f.model, f.calib);
  for (double tol : {0.0, 1.0, 5.0, 50.0}) {
    CalibrationOptions o;
    o.tolerance_points = tol;
    const auto c = calibrate(r, o);
    const auto b = infer_batch(f.model, f.calib.images, c.policy(), {}, &f.calib.labels);
    EXPECT_NEAR(*b.summary.accuracy, c.expected_accuracy, 1e-9);
    EXPECT_GE(c.expected_accuracy, c.reference_accuracy - tol / 100.0 - 1e-12);
  }
}

TEST(Profile, Errors) {
  const auto& f = trained();
  EXPECT_THROW(profile(f.model, Dataset{}), ConfigError);
  ProfileOptions o;
  o.thresholds = {0.5, 1.5};
  EXPECT_THROW(profile(f.model, f.calib, o), ConfigError);
  o.thresholds = {};
  o.selected_exits = {3, 1};
  EXPECT_THROW(profile(f.model, f.calib, o), ConfigError);
}

TEST(Profile, CsvHeaders) {
  const auto& f = trained();
  const auto r = profile(f.model, f.calib);
  std::ostringstream a, b;
  write_profile_csv(a, r);
  write_exit_stats_csv(b, r);
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')),
            "threshold,accuracy,mean_latency_us,mean_flops,rate_exit_1,rate_exit_2,rate_exit_3,rate_exit_4");
  EXPECT_EQ(b.str().substr(0, b.str().find('\n')),
            "exit_id,prefix_flops,head_flops,params,latency_us,accuracy,mean_confidence,mean_loss");
}
