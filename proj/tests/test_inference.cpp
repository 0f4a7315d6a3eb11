#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "mexit/inference.hpp"
#include "mexit/training.hpp"

using namespace mexit;

namespace {

Model trained_model() {
  static const Model m = [] {
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
    return m;
  }();
  return m;
}

Dataset inputs(Index n, std::uint64_t seed) {
  SyntheticSpec data;
  data.sample_shape = {1, 12, 12};
  data.num_classes = 4;
  return generate_synthetic(data, n, seed);
}

ExitPolicy all_exits(const Model& m, double thr) {
  ExitPolicy p;
  for (Index e = 1; e <= m.num_exits(); ++e) p.selected_exits.push_back(e);
  p.threshold = thr;
  return p;
}

Tensorf sample(const Tensorf& batch, Index s) { return batch.gather({s}); }

}  // namespace

TEST(Infer, ThresholdZeroTakesFirstSelectedExit) {
  const Model m = trained_model();
  const auto x = inputs(30, 1).images;
  for (const std::vector<Index>& sel : {std::vector<Index>{1, 2, 3}, std::vector<Index>{2, 3}, std::vector<Index>{3}}) {
    for (Index s = 0; s < 30; ++s) {
      const auto r = infer(m, sample(x, s), {sel, 0.0});
      EXPECT_EQ(r.exit_taken, sel.front());
      EXPECT_GT(r.confidence, 0.0);
    }
  }
}

TEST(Infer, ThresholdOneFallsThroughToFinal) {
  const Model m = trained_model();
  const auto x = inputs(30, 2).images;
  const auto finals = forward_all_exits(m, x).back();
  for (Index s = 0; s < 30; ++s) {
    const auto r = infer(m, sample(x, s), all_exits(m, 1.0));
    EXPECT_EQ(r.exit_taken, m.final_exit());
    EXPECT_EQ(r.predicted, argmax(finals.slice(s)));
  }
}

TEST(Infer, EmptySelectionIsPlainBackbone) {
  const Model m = trained_model();
  const auto x = inputs(30, 3).images;
  const auto finals = forward_all_exits(m, x).back();
  for (Index s = 0; s < 30; ++s) {
    const auto r = infer(m, sample(x, s), {{}, 0.0});
    EXPECT_EQ(r.exit_taken, m.final_exit());
    EXPECT_EQ(r.predicted, argmax(finals.slice(s)));
    EXPECT_EQ(r.flops, flops_to_exit(m, m.final_exit(), {}));
  }
}

TEST(Infer, ConfidentHeadCapturesEverything) {
  Model m = trained_model();
  auto& bias = m.exits[0].layers.back().bias;
  bias[2] = 1e4f;
  const auto x = inputs(40, 4);
  const auto b = infer_batch(m, x.images, all_exits(m, 0.9));
  EXPECT_EQ(b.summary.exit_rate[0], 1.0);
  for (const auto& r : b.results) EXPECT_EQ(r.predicted, 2);
}

TEST(Infer, StrictInequalityAtThreshold) {
  Model m = trained_model();
  // zero the head so exit 1 outputs uniform logits: confidence exactly 1/K
  for (auto& l : m.exits[0].layers) {
    if (!l.weight.empty()) l.weight.vec().setZero();
    if (!l.bias.empty()) l.bias.vec().setZero();
  }
  const auto x = inputs(1, 5).images;
  EXPECT_EQ(infer(m, x, {{1}, 0.25}).exit_taken, m.final_exit());
  EXPECT_EQ(infer(m, x, {{1}, 0.2499}).exit_taken, 1);
}

TEST(Infer, PolicyValidation) {
  const Model m = trained_model();
  const auto x = inputs(1, 6).images;
  EXPECT_THROW(infer(m, x, {{2, 1}, 0.5}), ConfigError);
  EXPECT_THROW(infer(m, x, {{1, 1}, 0.5}), ConfigError);
  EXPECT_THROW(infer(m, x, {{4}, 0.5}), ConfigError);
  EXPECT_THROW(infer(m, x, {{1}, 1.5}), ConfigError);
  EXPECT_THROW(infer(m, x, {{1}, -0.1}), ConfigError);
  EXPECT_THROW(infer_batch(m, Tensorf({0, 1, 12, 12}), all_exits(m, 0.5)), ConfigError);
}

TEST(InferProperty, ExitOrdinalMonotoneInThreshold) {
  const Model m = trained_model();
  const auto x = inputs(200, 7).images;
  std::vector<Index> prev(200, 0);
  double prev_flops = 0.0;
  for (int k = 0; k <= 20; ++k) {
    const auto b = infer_batch(m, x, all_exits(m, k * 0.05));
    for (Index s = 0; s < 200; ++s) {
      EXPECT_GE(b.results[static_cast<std::size_t>(s)].exit_taken, prev[static_cast<std::size_t>(s)]);
      prev[static_cast<std::size_t>(s)] = b.results[static_cast<std::size_t>(s)].exit_taken;
    }
    EXPECT_GE(b.summary.mean_flops, prev_flops);
    prev_flops = b.summary.mean_flops;
  }
}

TEST(InferProperty, FlopsMatchAnalyticPrefix) {
  const Model m = trained_model();
  const auto x = inputs(100, 8).images;
  for (const std::vector<Index>& sel : {std::vector<Index>{1, 2, 3}, std::vector<Index>{1, 3}, std::vector<Index>{2}}) {
    const auto b = infer_batch(m, x, {sel, 0.6});
    for (const auto& r : b.results) {
      EXPECT_EQ(r.flops, flops_to_exit(m, r.exit_taken, sel));
      EXPECT_DOUBLE_EQ(r.latency_us, LatencyModel{}.synthetic_us(r.flops));
    }
  }
}

TEST(InferProperty, UnconfidentExitsGiveGlobalPrediction) {
  const Model m = trained_model();
  const auto x = inputs(100, 9).images;
  const auto outs = forward_all_exits(m, x);
  const auto b = infer_batch(m, x, all_exits(m, 0.7));
  for (Index s = 0; s < 100; ++s) {
    const auto& r = b.results[static_cast<std::size_t>(s)];
    if (r.exit_taken != m.final_exit()) continue;
    for (Index e = 0; e < m.num_exits(); ++e) EXPECT_LE(confidence_of(outs[static_cast<std::size_t>(e)].slice(s)).confidence, 0.7);
    EXPECT_EQ(r.predicted, argmax(outs.back().slice(s)));
  }
}

TEST(InferBatch, MatchesPerSampleInference) {
  const Model m = trained_model();
  const auto x = inputs(150, 10);
  for (double thr : {0.0, 0.4, 0.8, 1.0}) {
    const auto policy = all_exits(m, thr);
    const auto b = infer_batch(m, x.images, policy, {}, &x.labels, 16);
    for (Index s = 0; s < 150; ++s) {
      const auto r = infer(m, sample(x.images, s), policy);
      const auto& rb = b.results[static_cast<std::size_t>(s)];
      EXPECT_EQ(rb.exit_taken, r.exit_taken);
      EXPECT_EQ(rb.predicted, r.predicted);
      EXPECT_EQ(rb.confidence, r.confidence);
      EXPECT_EQ(rb.flops, r.flops);
    }
  }
}

TEST(InferBatch, SummaryConsistentWithResults) {
  const Model m = trained_model();
  const auto x = inputs(120, 11);
  const auto policy = all_exits(m, 0.6);
  const auto b = infer_batch(m, x.images, policy, {}, &x.labels);
  const auto again = summarise(b.results, m.final_exit(), &x.labels);
  EXPECT_EQ(again.exit_rate, b.summary.exit_rate);
  EXPECT_EQ(again.mean_flops, b.summary.mean_flops);
  EXPECT_EQ(*again.accuracy, *b.summary.accuracy);

  double rate_sum = 0.0, weighted = 0.0;
  Index correct = 0;
  for (Index e = 1; e <= m.final_exit(); ++e) {
    const double r = b.summary.exit_rate[static_cast<std::size_t>(e - 1)];
    rate_sum += r;
    weighted += r * static_cast<double>(flops_to_exit(m, e, policy.selected_exits));
  }
  for (Index s = 0; s < 120; ++s) correct += b.results[static_cast<std::size_t>(s)].predicted == x.labels[static_cast<std::size_t>(s)];
  EXPECT_NEAR(rate_sum, 1.0, 1e-12);
  EXPECT_NEAR(b.summary.mean_flops, weighted, 1e-6 * weighted);
  EXPECT_DOUBLE_EQ(*b.summary.accuracy, static_cast<double>(correct) / 120.0);
}

TEST(InferBatch, MeasuredLatencyIsPositive) {
  const Model m = trained_model();
  LatencyModel lat;
  lat.mode = LatencyModel::Mode::Measured;
  const auto b = infer_batch(m, inputs(10, 12).images, all_exits(m, 0.5), lat);
  for (const auto& r : b.results) EXPECT_GT(r.latency_us, 0.0);
}

TEST(InferBatch, ResultsCsv) {
  const Model m = trained_model();
  const auto x = inputs(3, 13);
  const auto b = infer_batch(m, x.images, all_exits(m, 0.5), {}, &x.labels);
  std::ostringstream os;
  write_results_csv(os, b.results, &x.labels);
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "sample_id,exit_taken,confidence,predicted,correct,flops,latency_us");
  int lines = 0;
  for (std::string line; std::getline(is, line);) ++lines;
  EXPECT_EQ(lines, 3);
}

TEST(Confidence, SoftmaxTopOne) {
  Vector<float> z(3);
  z << 0.0f, std::log(3.0f), 0.0f;
  const auto c = confidence_of(z);
  EXPECT_EQ(c.predicted, 1);
  EXPECT_NEAR(c.confidence, 0.6, 1e-6);
}
