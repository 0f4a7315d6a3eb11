#include "mexit/profiler.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace mexit {

std::vector<double> default_threshold_grid() {
  std::vector<double> g;
  for (int k = 0; k <= 20; ++k) g.push_back(k / 20.0);
  return g;
}

std::int64_t ProfileReport::flops_to_exit(Index exit, const std::vector<Index>& selected) const {
  std::int64_t total = prefix_flops[static_cast<std::size_t>(exit - 1)];
  for (Index s : selected)
    if (s <= exit) total += head_flops[static_cast<std::size_t>(s - 1)];
  if (exit == final_exit()) total += head_flops.back();
  return total;
}

double ProfileReport::latency_to_exit(Index exit, const std::vector<Index>& selected) const {
  double total = base_latency_us + prefix_latency_us[static_cast<std::size_t>(exit - 1)];
  for (Index s : selected)
    if (s <= exit) total += head_latency_us[static_cast<std::size_t>(s - 1)];
  if (exit == final_exit()) total += head_latency_us.back();
  return total;
}

OperatingPoint ProfileReport::evaluate(const std::vector<Index>& selected, double threshold) const {
  OperatingPoint op;
  op.threshold = threshold;
  const auto slots = static_cast<std::size_t>(final_exit());
  op.captured.assign(slots, 0);
  op.captured_correct.assign(slots, 0);
  Index correct = 0;
  for (const auto& s : samples) {
    Index exit = final_exit();
    for (Index e : selected)
      if (s.confidence[static_cast<std::size_t>(e - 1)] > threshold) {
        exit = e;
        break;
      }
    const auto k = static_cast<std::size_t>(exit - 1);
    ++op.captured[k];
    if (s.predicted[k] == s.reference) {
      ++op.captured_correct[k];
      ++correct;
    }
  }
  const auto n = static_cast<double>(samples.size());
  std::int64_t flops = 0;
  double latency = 0.0;
  for (std::size_t k = 0; k < slots; ++k) {
    op.exit_rate.push_back(static_cast<double>(op.captured[k]) / n);
    flops += static_cast<std::int64_t>(op.captured[k]) * flops_to_exit(static_cast<Index>(k + 1), selected);
    latency += static_cast<double>(op.captured[k]) * latency_to_exit(static_cast<Index>(k + 1), selected);
  }
  op.accuracy = static_cast<double>(correct) / n;
  op.mean_flops = static_cast<double>(flops) / n;
  op.mean_latency_us = latency / n;
  return op;
}

ProfileReport profile(const Model& model, const Dataset& calib, const ProfileOptions& options) {
  if (calib.size() < 1) throw ConfigError("profile: calibration set is empty");
  ProfileReport r;
  r.num_exits = model.num_exits();
  r.thresholds = options.thresholds.empty() ? default_threshold_grid() : options.thresholds;
  for (double t : r.thresholds)
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("profile: thresholds must lie in [0, 1]");
  r.profiled_exits = options.selected_exits;
  if (r.profiled_exits.empty())
    for (Index e = 1; e <= model.num_exits(); ++e) r.profiled_exits.push_back(e);
  ExitPolicy{r.profiled_exits, 0.0}.validate(model);
  const bool labelled = options.use_labels && calib.has_labels();
  r.reference_mode = labelled ? ReferenceMode::HardLabels : ReferenceMode::FinalExitAsTruth;

  PersonalisationConfig loss_cfg = options.loss;
  if (!labelled) loss_cfg.alpha = 0.0;
  if (loss_cfg.alpha == 0.0 && loss_cfg.beta == 0.0 && loss_cfg.gamma == 0.0) loss_cfg.beta = 1.0;
  loss_cfg.validate();

  const auto slots = static_cast<std::size_t>(model.final_exit());
  ForwardTimings total_time;
  total_time.block_seconds.assign(model.blocks.size(), 0.0);
  total_time.head_seconds.assign(slots, 0.0);
  const bool measured = options.latency.mode == LatencyModel::Mode::Measured;

  for (Index at = 0; at < calib.size(); at += options.batch_size) {
    const Index count = std::min(options.batch_size, calib.size() - at);
    ForwardTimings t;
    const auto outs = forward_all_exits(model, calib.images.rows(at, count), measured ? &t : nullptr);
    if (measured) {
      for (std::size_t b = 0; b < t.block_seconds.size(); ++b) total_time.block_seconds[b] += t.block_seconds[b];
      for (std::size_t h = 0; h < slots; ++h) total_time.head_seconds[h] += t.head_seconds[h];
    }
    for (Index s = 0; s < count; ++s) {
      SampleRecord rec;
      std::vector<Vector<float>> logits;
      for (const auto& o : outs) {
        const auto c = confidence_of(o.slice(s));
        rec.predicted.push_back(c.predicted);
        rec.confidence.push_back(c.confidence);
        logits.emplace_back(o.slice(s));
      }
      rec.reference = labelled ? calib.labels[static_cast<std::size_t>(at + s)] : rec.predicted.back();
      std::optional<Index> y;
      if (labelled) y = rec.reference;
      if (model.num_exits() > 0) rec.loss = personalisation_loss(logits, y, loss_cfg).per_exit;
      r.samples.push_back(std::move(rec));
    }
  }

  const auto n = static_cast<double>(calib.size());
  const auto blocks = block_flops(model);
  std::vector<double> block_us(blocks.size());
  for (std::size_t b = 0; b < blocks.size(); ++b)
    block_us[b] = measured ? 1e6 * total_time.block_seconds[b] / n
                           : options.latency.us_per_mflop * static_cast<double>(blocks[b]) / 1e6;
  r.base_latency_us = measured ? 0.0 : options.latency.base_us;
  for (Index e = 1; e <= model.final_exit(); ++e) {
    const auto k = static_cast<std::size_t>(e - 1);
    const std::size_t end = e == model.final_exit() ? blocks.size() : static_cast<std::size_t>(model.exits[k].block) + 1;
    r.prefix_flops.push_back(backbone_prefix_flops(model, e));
    r.head_flops.push_back(mexit::head_flops(model, e));
    r.params.push_back(params_to_exit(model, e));
    r.prefix_latency_us.push_back(std::accumulate(block_us.begin(), block_us.begin() + static_cast<std::ptrdiff_t>(end), 0.0));
    r.head_latency_us.push_back(measured ? 1e6 * total_time.head_seconds[k] / n
                                         : options.latency.us_per_mflop * static_cast<double>(r.head_flops.back()) / 1e6);
    Index correct = 0;
    double conf = 0.0, loss = 0.0;
    for (const auto& s : r.samples) {
      correct += s.predicted[k] == s.reference ? 1 : 0;
      conf += s.confidence[k];
      if (e <= model.num_exits()) loss += s.loss[k];
    }
    r.exit_accuracy.push_back(static_cast<double>(correct) / n);
    r.mean_confidence.push_back(conf / n);
    if (e <= model.num_exits()) r.mean_loss.push_back(loss / n);
  }
  for (double t : r.thresholds) r.per_threshold.push_back(r.evaluate(r.profiled_exits, t));
  return r;
}

std::vector<std::size_t> pareto_front(const std::vector<std::pair<double, double>>& points) {
  if (points.empty()) throw ConfigError("pareto_front: no points");
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].first != points[b].first) return points[a].first < points[b].first;
    return points[a].second > points[b].second;
  });
  std::vector<std::size_t> front;
  for (std::size_t i : order)
    if (front.empty() || points[i].second > points[front.back()].second) front.push_back(i);
  return front;
}

namespace {

CalibrationResult finish(const ProfileReport& report, const std::vector<Index>& selected, double threshold,
                         std::vector<ParetoPoint> pareto) {
  CalibrationResult c;
  c.threshold = threshold;
  c.selected_exits = selected;
  const auto op = report.evaluate(selected, threshold);
  c.expected_accuracy = op.accuracy;
  c.expected_latency_us = op.mean_latency_us;
  c.expected_flops = op.mean_flops;
  c.reference_accuracy = report.final_accuracy();
  c.pareto = std::move(pareto);
  c.baseline_loss = report.mean_loss;
  return c;
}

}  // namespace

CalibrationResult calibrate_threshold(const ProfileReport& report, double tolerance_points,
                                      const std::vector<Index>& selected_in) {
  if (tolerance_points < 0.0) throw ConfigError("accuracy drop tolerance must be >= 0");
  const auto& selected = selected_in.empty() && report.profiled_exits.size() > 0 ? report.profiled_exits : selected_in;
  std::vector<OperatingPoint> ops;
  std::vector<std::pair<double, double>> points;
  for (double t : report.thresholds) {
    ops.push_back(report.evaluate(selected, t));
    points.emplace_back(ops.back().mean_latency_us, ops.back().accuracy);
  }
  const double floor = report.final_accuracy() - tolerance_points / 100.0;
  std::vector<ParetoPoint> pareto;
  double chosen = 1.0;
  bool found = false;
  for (std::size_t i : pareto_front(points)) {
    pareto.push_back({ops[i].mean_latency_us, ops[i].accuracy, ops[i].threshold});
    if (ops[i].accuracy >= floor && (!found || ops[i].threshold < chosen)) {
      chosen = ops[i].threshold;
      found = true;
    }
  }
  return finish(report, selected, found ? chosen : 1.0, std::move(pareto));
}

std::vector<Index> prune_exits(const ProfileReport& report, const std::vector<Index>& selected, double threshold,
                               double min_exit_rate, double max_accuracy_gap_points) {
  const auto op = report.evaluate(selected, threshold);
  const double floor = report.final_accuracy() - max_accuracy_gap_points / 100.0;
  std::vector<Index> kept;
  for (Index e : selected) {
    const auto k = static_cast<std::size_t>(e - 1);
    if (op.exit_rate[k] < min_exit_rate) continue;
    if (op.captured[k] > 0 &&
        static_cast<double>(op.captured_correct[k]) / static_cast<double>(op.captured[k]) < floor)
      continue;
    kept.push_back(e);
  }
  return kept;
}

CalibrationResult calibrate(const ProfileReport& report, const CalibrationOptions& options) {
  std::vector<Index> selected = report.profiled_exits;
  CalibrationResult result = calibrate_threshold(report, options.tolerance_points, selected);
  for (std::size_t round = 0; round <= static_cast<std::size_t>(report.num_exits); ++round) {
    auto kept = prune_exits(report, selected, result.threshold, options.min_exit_rate, options.max_accuracy_gap_points);
    if (kept == selected) break;
    selected = std::move(kept);
    if (selected.empty()) return finish(report, selected, 1.0, result.pareto);
    result = calibrate_threshold(report, options.tolerance_points, selected);
  }
  return result;
}

void write_profile_csv(std::ostream& os, const ProfileReport& r) {
  os << "threshold,accuracy,mean_latency_us,mean_flops";
  for (Index e = 1; e <= r.final_exit(); ++e) os << ",rate_exit_" << e;
  os << '\n' << std::setprecision(6) << std::fixed;
  for (const auto& op : r.per_threshold) {
    os << op.threshold << ',' << op.accuracy << ',' << op.mean_latency_us << ',' << op.mean_flops;
    for (double rate : op.exit_rate) os << ',' << rate;
    os << '\n';
  }
}

void write_exit_stats_csv(std::ostream& os, const ProfileReport& r) {
  os << "exit_id,prefix_flops,head_flops,params,latency_us,accuracy,mean_confidence,mean_loss\n";
  os << std::setprecision(6) << std::fixed;
  const std::vector<Index> only_self;
  for (Index e = 1; e <= r.final_exit(); ++e) {
    const auto k = static_cast<std::size_t>(e - 1);
    os << e << ',' << r.prefix_flops[k] << ',' << r.head_flops[k] << ',' << r.params[k] << ','
       << r.latency_to_exit(e, e == r.final_exit() ? only_self : std::vector<Index>{e}) << ',' << r.exit_accuracy[k] << ','
       << r.mean_confidence[k] << ',';
    if (e <= r.num_exits) os << r.mean_loss[k];
    os << '\n';
  }
}

void write_pareto_csv(std::ostream& os, const CalibrationResult& c) {
  os << "latency_us,accuracy,threshold\n" << std::setprecision(6) << std::fixed;
  for (const auto& p : c.pareto) os << p.latency_us << ',' << p.accuracy << ',' << p.threshold << '\n';
}

void write_calibration_summary(std::ostream& os, const CalibrationResult& c) {
  os << std::setprecision(17);
  os << "threshold = " << c.threshold << '\n';
  os << "selected_exits = ";
  for (std::size_t i = 0; i < c.selected_exits.size(); ++i) os << (i ? "," : "") << c.selected_exits[i];
  os << '\n';
  os << "expected_accuracy = " << c.expected_accuracy << '\n';
  os << "expected_latency_us = " << c.expected_latency_us << '\n';
  os << "expected_flops = " << c.expected_flops << '\n';
  os << "reference_accuracy = " << c.reference_accuracy << '\n';
  os << "baseline_loss = ";
  for (std::size_t i = 0; i < c.baseline_loss.size(); ++i) os << (i ? "," : "") << c.baseline_loss[i];
  os << '\n';
}

CalibrationResult read_calibration_summary(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto parse = [](const std::string& key, const std::string& text) {
    std::istringstream ss(text);
    double v = 0.0;
    if (!(ss >> v) || !(ss >> std::ws).eof()) throw LoadError("calibration summary: bad value for '" + key + "': " + text);
    return v;
  };
  auto num = [&](const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw LoadError("calibration summary is missing '" + key + "'");
    return parse(key, it->second);
  };
  auto list = [&](const std::string& key) {
    std::vector<std::string> out;
    std::istringstream ss(kv[key]);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(item);
    return out;
  };
  CalibrationResult c;
  c.threshold = num("threshold");
  for (const auto& s : list("selected_exits")) {
    const double e = parse("selected_exits", s);
    if (e != std::floor(e) || e < 1) throw LoadError("calibration summary: bad exit id " + s);
    c.selected_exits.push_back(static_cast<Index>(e));
  }
  c.expected_accuracy = num("expected_accuracy");
  c.expected_latency_us = num("expected_latency_us");
  c.expected_flops = num("expected_flops");
  c.reference_accuracy = num("reference_accuracy");
  for (const auto& s : list("baseline_loss")) c.baseline_loss.push_back(parse("baseline_loss", s));
  return c;
}

}  // namespace mexit
