#include "mexit/inference.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "mexit/layers.hpp"

namespace mexit {

void ExitPolicy::validate(const Model& model) const {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("confidence threshold must be in [0, 1]");
  Index prev = 0;
  for (Index e : selected_exits) {
    if (e <= prev || e > model.num_exits())
      throw ConfigError("selected exits must be strictly increasing within 1.." + std::to_string(model.num_exits()));
    prev = e;
  }
}

Confidence confidence_of(const Eigen::Ref<const Vector<float>>& logits) {
  const Vector<double> p = softmax(logits.cast<double>());
  const Index k = argmax(logits);
  return {k, p[k]};
}

InferenceResult infer(const Model& model, const Tensorf& sample, const ExitPolicy& policy, const LatencyModel& latency) {
  policy.validate(model);
  const Tensorf x0 = sample.rank() == 3 ? sample.reshaped(detail::batched(1, sample.shape())) : sample;
  check_input(model, x0);
  if (x0.dim(0) != 1) throw ConfigError("infer expects a single sample");

  const auto t0 = std::chrono::steady_clock::now();
  InferenceResult r;
  Tensorf x = x0;
  std::size_t next_block = 0;
  bool done = false;
  for (Index e : policy.selected_exits) {
    const auto& head = model.exits[static_cast<std::size_t>(e - 1)];
    for (; next_block <= static_cast<std::size_t>(head.block); ++next_block) x = run_stack(model.blocks[next_block], std::move(x));
    const auto c = confidence_of(run_stack(head.layers, x).slice(0));
    if (c.confidence > policy.threshold) {
      r = {c.predicted, e, c.confidence, 0, 0.0};
      done = true;
      break;
    }
  }
  if (!done) {
    for (; next_block < model.blocks.size(); ++next_block) x = run_stack(model.blocks[next_block], std::move(x));
    const auto c = confidence_of(run_stack(model.classifier, std::move(x)).slice(0));
    r = {c.predicted, model.final_exit(), c.confidence, 0, 0.0};
  }
  const double elapsed_us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
  r.flops = flops_to_exit(model, r.exit_taken, policy.selected_exits);
  r.latency_us = latency.mode == LatencyModel::Mode::Measured ? elapsed_us : latency.synthetic_us(r.flops);
  return r;
}

BatchSummary summarise(const std::vector<InferenceResult>& results, Index num_exit_slots, const std::vector<Index>* labels) {
  BatchSummary s;
  s.exit_count.assign(static_cast<std::size_t>(num_exit_slots), 0);
  double flops = 0.0, latency = 0.0;
  Index correct = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    ++s.exit_count[static_cast<std::size_t>(r.exit_taken - 1)];
    flops += static_cast<double>(r.flops);
    latency += r.latency_us;
    if (labels && (*labels)[i] == r.predicted) ++correct;
  }
  const auto n = static_cast<double>(results.size());
  for (Index c : s.exit_count) s.exit_rate.push_back(n > 0 ? static_cast<double>(c) / n : 0.0);
  if (n > 0) {
    s.mean_flops = flops / n;
    s.mean_latency_us = latency / n;
    if (labels) s.accuracy = static_cast<double>(correct) / n;
  }
  return s;
}

BatchInference infer_batch(const Model& model, const Tensorf& inputs, const ExitPolicy& policy,
                           const LatencyModel& latency, const std::vector<Index>* labels, Index batch_size) {
  policy.validate(model);
  check_input(model, inputs);
  if (labels && static_cast<Index>(labels->size()) != inputs.dim(0)) throw ConfigError("label count differs from inputs");
  BatchInference out;
  out.results.resize(static_cast<std::size_t>(inputs.dim(0)));

  if (latency.mode == LatencyModel::Mode::Measured) {
    for (Index s = 0; s < inputs.dim(0); ++s)
      out.results[static_cast<std::size_t>(s)] = infer(model, inputs.rows(s, 1), policy, latency);
  } else {
    std::vector<std::int64_t> exit_flops(static_cast<std::size_t>(model.final_exit()));
    for (Index e = 1; e <= model.final_exit(); ++e)
      exit_flops[static_cast<std::size_t>(e - 1)] = flops_to_exit(model, e, policy.selected_exits);
    auto record = [&](Index sample, Index exit, const Confidence& c) {
      const auto f = exit_flops[static_cast<std::size_t>(exit - 1)];
      out.results[static_cast<std::size_t>(sample)] = {c.predicted, exit, c.confidence, f, latency.synthetic_us(f)};
    };
    for (Index at = 0; at < inputs.dim(0); at += batch_size) {
      std::vector<Index> active(static_cast<std::size_t>(std::min(batch_size, inputs.dim(0) - at)));
      std::iota(active.begin(), active.end(), at);
      Tensorf x = inputs.rows(at, static_cast<Index>(active.size()));
      std::size_t next_block = 0;
      for (Index e : policy.selected_exits) {
        if (active.empty()) break;
        const auto& head = model.exits[static_cast<std::size_t>(e - 1)];
        for (; next_block <= static_cast<std::size_t>(head.block); ++next_block) x = run_stack(model.blocks[next_block], std::move(x));
        const Tensorf logits = run_stack(head.layers, x);
        std::vector<Index> keep_rows, keep_ids;
        for (std::size_t k = 0; k < active.size(); ++k) {
          const auto c = confidence_of(logits.slice(static_cast<Index>(k)));
          if (c.confidence > policy.threshold) {
            record(active[k], e, c);
          } else {
            keep_rows.push_back(static_cast<Index>(k));
            keep_ids.push_back(active[k]);
          }
        }
        if (keep_rows.size() != active.size() && !keep_rows.empty()) x = x.gather(keep_rows);
        active = std::move(keep_ids);
      }
      if (active.empty()) continue;
      for (; next_block < model.blocks.size(); ++next_block) x = run_stack(model.blocks[next_block], std::move(x));
      const Tensorf logits = run_stack(model.classifier, std::move(x));
      for (std::size_t k = 0; k < active.size(); ++k) record(active[k], model.final_exit(), confidence_of(logits.slice(static_cast<Index>(k))));
    }
  }
  out.summary = summarise(out.results, model.final_exit(), labels);
  return out;
}

void write_results_csv(std::ostream& os, const std::vector<InferenceResult>& results, const std::vector<Index>* labels) {
  os << "sample_id,exit_taken,confidence,predicted,correct,flops,latency_us\n";
  os << std::setprecision(6) << std::fixed;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    os << i << ',' << r.exit_taken << ',' << r.confidence << ',' << r.predicted << ',';
    if (labels) os << ((*labels)[i] == r.predicted ? 1 : 0);
    os << ',' << r.flops << ',' << r.latency_us << '\n';
  }
}

}  // namespace mexit
