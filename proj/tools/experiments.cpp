#include "experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "mexit/checkpoint.hpp"

namespace mexit::cli {

namespace fs = std::filesystem;

int log_level() {
  const char* v = std::getenv("MEXIT_LOG");
  if (!v || !*v) return 1;
  return std::atoi(v);
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cout << msg << std::endl;
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cout << msg << std::endl;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Dataset without_indices(const Dataset& d, const std::vector<Index>& drop) {
  const std::set<Index> gone(drop.begin(), drop.end());
  std::vector<Index> keep;
  for (Index i = 0; i < d.size(); ++i)
    if (!gone.count(i)) keep.push_back(i);
  return d.subset(keep);
}

template <typename Fn>
void for_each_parallel(std::size_t n, int threads, Fn fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  for (int t = 0; t < std::min<int>(threads, static_cast<int>(n)); ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string exits_text(const std::vector<Index>& exits) {
  std::string s;
  for (std::size_t i = 0; i < exits.size(); ++i) s += (i ? " " : "") + std::to_string(exits[i]);
  return s;
}

}  // namespace

OutputDir::OutputDir(std::string dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

std::string OutputDir::path(const std::string& name) {
  const auto p = (fs::path(dir_) / name).string();
  if (std::find(files_.begin(), files_.end(), p) == files_.end()) files_.push_back(p);
  return p;
}

void OutputDir::write(const std::string& name, const std::function<void(std::ostream&)>& body) {
  const auto p = path(name);
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open for writing: " + p);
  body(os);
  if (!os) throw ConfigError("write failed: " + p);
}

void OutputDir::rollback() {
  std::error_code ec;
  for (const auto& f : files_) fs::remove(f, ec);
  files_.clear();
}

void write_svg_chart(std::ostream& os, const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<Series>& series) {
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  const double W = 640, H = 420, left = 70, right = 160, top = 40, bottom = 60;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x), x1 = std::max(x1, x);
      y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };

  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - bottom + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
  }
  os << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 20 << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  os << "<text transform=\"translate(18," << (top + H - bottom) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* c = colours[i % 7];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : series[i].points) os << px(x) << ',' << py(y) << ' ';
    os << "\"/>\n";
    for (auto [x, y] : series[i].points) os << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << c << "\"/>\n";
    const double ly = top + 16 * static_cast<double>(i);
    os << "<rect x=\"" << W - right + 12 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << c << "\"/>\n";
    os << "<text x=\"" << W - right + 28 << "\" y=\"" << ly + 9 << "\">" << series[i].name << "</text>\n";
  }
  os << "</svg>\n";
}

GlobalData make_global_data(const ExperimentConfig& cfg) {
  GlobalData d;
  const auto& spec = cfg.data.synthetic;
  if (!cfg.data.train_images.empty()) {
    const Dataset all = load_dataset(cfg.data.train_images, cfg.data.train_labels, spec.num_classes);
    // Global training and user pool must not overlap; the first part trains.
    const Index n_train = std::min(cfg.data.train_samples, all.size() / 2);
    std::vector<Index> a, b;
    for (Index i = 0; i < all.size(); ++i) (i < n_train ? a : b).push_back(i);
    d.train = all.subset(a);
    d.pool = all.subset(b);
  } else {
    d.train = generate_synthetic(spec, cfg.data.train_samples, derive_seed(cfg.seed, 1));
    d.pool = generate_synthetic(spec, cfg.data.pool_samples, derive_seed(cfg.seed, 3));
  }
  if (!cfg.data.test_images.empty())
    d.test = load_dataset(cfg.data.test_images, cfg.data.test_labels, spec.num_classes);
  else
    d.test = generate_synthetic(spec, cfg.data.test_samples, derive_seed(cfg.seed, 2));
  return d;
}

std::vector<UserSplit> make_users(const ExperimentConfig& cfg, const Dataset& pool) {
  return partition_users(pool, cfg.users.n_users, cfg.users.samples_per_user, cfg.users.test_per_user, cfg.users.sigma,
                         derive_seed(cfg.seed, 4));
}

Model build_model(const ExperimentConfig& cfg, const Dataset& reference) {
  BackboneSpec spec = cfg.model.backbone;
  spec.input_shape = reference.sample_shape();
  spec.num_classes = reference.num_classes;
  Model m = make_backbone<float>(spec, derive_seed(cfg.seed, 10));
  if (cfg.model.num_exits > 0) attach_exits(m, cfg.model.num_exits, derive_seed(cfg.seed, 11), cfg.model.head_channels);
  return m;
}

Model obtain_global_model(const ExperimentConfig& cfg, const GlobalData& data, TrainingLog* log) {
  if (!cfg.model.checkpoint.empty()) {
    Model m = load_checkpoint(cfg.model.checkpoint);
    if (m.input_shape != data.train.sample_shape() || m.num_classes != data.train.num_classes)
      throw ConfigError("checkpoint " + cfg.model.checkpoint + " does not match the configured data");
    return m;
  }
  Model m = build_model(cfg, data.train);
  GlobalTrainConfig g = cfg.global;
  g.seed = derive_seed(cfg.seed, 12);
  const auto t0 = std::chrono::steady_clock::now();
  auto l = train_global(m, data.train, g);
  log_info("global training: " + std::to_string(data.train.size()) + " samples, " + std::to_string(g.epochs) +
           " epochs, " + std::to_string(seconds_since(t0)) + " s");
  if (log) *log = std::move(l);
  return m;
}

UserData user_data(const ExperimentConfig& cfg, const UserSplit& user, Index user_index) {
  UserData u;
  std::tie(u.train, u.calib) =
      split_calibration(user.train, cfg.users.calib_fraction, derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(user_index)));
  u.test = user.test;
  return u;
}

const std::vector<std::string> kPersonalisationModes = {"hard_labels", "self_distillation", "self_supervised"};

PersonalisationConfig mode_config(const ExperimentConfig& cfg, const std::string& mode) {
  PersonalisationConfig p = cfg.personalise;
  if (mode == "hard_labels") {
    p.alpha = 1.0, p.beta = 0.0, p.gamma = 0.0;
  } else if (mode == "self_distillation") {
    p.alpha = 0.0, p.beta = 1.0, p.gamma = 0.0;
  } else if (mode == "self_supervised") {
    p.alpha = 0.0, p.beta = 1.0, p.gamma = 1.0;
  } else if (mode != "configured") {
    throw ConfigError("unknown personalisation mode '" + mode + "'");
  }
  return p;
}

std::vector<AccuracyRow> accuracy_vs_samples(const ExperimentConfig& cfg, const Model& global, const GlobalData& data,
                                             const std::vector<UserSplit>& users) {
  const auto& user = users[static_cast<std::size_t>(cfg.experiment.sweep_user)];
  const Dataset source = without_indices(data.pool, user.test_indices);
  std::vector<AccuracyRow> rows;
  const auto base = exit_accuracies(global, user.test);
  for (std::size_t e = 0; e < base.size(); ++e) rows.push_back({0, static_cast<Index>(e + 1), "global", base[e]});
  const std::vector<std::string> modes = {"hard_labels", "self_distillation"};
  std::vector<std::pair<Index, std::string>> jobs;
  for (Index n : cfg.experiment.sample_counts)
    for (const auto& mode : modes) jobs.emplace_back(n, mode);
  std::vector<std::vector<double>> acc(jobs.size());
  for_each_parallel(jobs.size(), cfg.threads, [&](std::size_t j) {
    const auto [n, mode] = jobs[j];
    const Dataset train = sample_user_dataset(source, user.distribution, n, derive_seed(cfg.seed, 200 + static_cast<std::uint64_t>(n)));
    Model p = global;
    auto pc = mode_config(cfg, mode);
    pc.seed = derive_seed(cfg.seed, 300 + static_cast<std::uint64_t>(n));
    const auto t0 = std::chrono::steady_clock::now();
    personalise_exits(p, train, {}, pc);
    log_debug("personalised " + mode + " on " + std::to_string(n) + " samples in " + std::to_string(seconds_since(t0)) + " s");
    acc[j] = exit_accuracies(p, user.test);
  });
  for (std::size_t j = 0; j < jobs.size(); ++j)
    for (std::size_t e = 0; e < acc[j].size(); ++e) rows.push_back({jobs[j].first, static_cast<Index>(e + 1), jobs[j].second, acc[j][e]});
  return rows;
}

void write_accuracy_vs_samples(OutputDir& out, const ExperimentConfig& cfg, const std::vector<AccuracyRow>& rows) {
  out.write("accuracy_vs_samples.csv", [&](std::ostream& os) {
    os << "n_samples,exit_id,mode,accuracy\n" << std::fixed << std::setprecision(6);
    for (const auto& r : rows) os << r.n_samples << ',' << r.exit_id << ',' << r.mode << ',' << r.accuracy << '\n';
  });
  if (!cfg.experiment.svg) return;
  std::vector<Series> series;
  for (const auto& r : rows) {
    if (r.mode == "global") continue;
    const auto name = r.mode + " exit " + std::to_string(r.exit_id);
    auto it = std::find_if(series.begin(), series.end(), [&](const Series& s) { return s.name == name; });
    if (it == series.end()) it = series.insert(series.end(), Series{name, {}});
    it->points.emplace_back(std::log2(static_cast<double>(r.n_samples)), r.accuracy);
  }
  out.write("accuracy_vs_samples.svg", [&](std::ostream& os) {
    write_svg_chart(os, "Accuracy vs personalisation samples", "log2(samples)", "accuracy", series);
  });
}

std::vector<PersonalisationRow> personalisation_gains(const ExperimentConfig& cfg, const Model& global,
                                                      const std::vector<UserSplit>& users) {
  std::vector<std::pair<std::size_t, std::string>> jobs;
  for (std::size_t u = 0; u < users.size(); ++u)
    for (const auto& mode : kPersonalisationModes) jobs.emplace_back(u, mode);
  std::vector<std::vector<PersonalisationRow>> parts(jobs.size());
  for_each_parallel(jobs.size(), cfg.threads, [&](std::size_t j) {
    const auto [u, mode] = jobs[j];
    const auto ud = user_data(cfg, users[u], static_cast<Index>(u));
    const auto before = exit_accuracies(global, ud.test);
    Model p = global;
    auto pc = mode_config(cfg, mode);
    pc.seed = derive_seed(cfg.seed, 400 + u);
    personalise_exits(p, ud.train, {}, pc);
    const auto after = exit_accuracies(p, ud.test);
    const auto agree = exit_agreement(p, ud.test);
    for (std::size_t e = 0; e < after.size(); ++e)
      parts[j].push_back({static_cast<Index>(u), users[u].distribution.center, mode, static_cast<Index>(e + 1), before[e],
                          after[e], agree[e]});
  });
  std::vector<PersonalisationRow> rows;
  for (auto& p : parts) rows.insert(rows.end(), p.begin(), p.end());
  return rows;
}

void write_personalisation(OutputDir& out, const ExperimentConfig& cfg, const std::vector<PersonalisationRow>& rows) {
  out.write("personalisation.csv", [&](std::ostream& os) {
    os << "user,center,mode,exit_id,accuracy_global,accuracy_personalised,agreement_with_final\n"
       << std::fixed << std::setprecision(6);
    for (const auto& r : rows)
      os << r.user << ',' << r.center << ',' << r.mode << ',' << r.exit_id << ',' << r.accuracy_global << ','
         << r.accuracy_personalised << ',' << r.agreement << '\n';
  });
  if (!cfg.experiment.svg) return;
  std::vector<Series> series;
  for (const auto& mode : std::vector<std::string>{"global", "hard_labels", "self_distillation", "self_supervised"}) {
    Series s{mode, {}};
    std::map<Index, std::pair<double, int>> mean;
    for (const auto& r : rows) {
      if (r.mode != (mode == "global" ? "hard_labels" : mode)) continue;
      auto& [sum, n] = mean[r.exit_id];
      sum += mode == "global" ? r.accuracy_global : r.accuracy_personalised;
      ++n;
    }
    for (auto& [e, v] : mean) s.points.emplace_back(static_cast<double>(e), v.first / v.second);
    series.push_back(std::move(s));
  }
  out.write("personalisation.svg", [&](std::ostream& os) {
    write_svg_chart(os, "Per-exit accuracy on user data", "exit", "mean accuracy", series);
  });
}

void write_cost(OutputDir& out, const ExperimentConfig& cfg, const Model& m) {
  const auto backbone = static_cast<double>(backbone_params(m));
  const auto total_flops = static_cast<double>(flops_to_exit(m, m.final_exit(), {}));
  out.write("cost.csv", [&](std::ostream& os) {
    os << "exit_id,block,prefix_flops,head_flops,flops_to_exit,params_to_exit,head_params,head_param_fraction,flops_fraction\n"
       << std::fixed << std::setprecision(6);
    for (Index e = 1; e <= m.final_exit(); ++e) {
      const bool early = e <= m.num_exits();
      const auto f = flops_to_exit(m, e, early ? std::vector<Index>{e} : std::vector<Index>{});
      os << e << ',' << (early ? m.exits[static_cast<std::size_t>(e - 1)].block : static_cast<Index>(m.blocks.size()) - 1)
         << ',' << backbone_prefix_flops(m, e) << ',' << head_flops(m, e) << ',' << f << ',' << params_to_exit(m, e) << ','
         << head_params(m, e) << ',' << static_cast<double>(head_params(m, e)) / backbone << ','
         << static_cast<double>(f) / total_flops << '\n';
    }
  });
  if (!cfg.experiment.svg) return;
  Series s{"flops fraction", {}};
  for (Index e = 1; e <= m.final_exit(); ++e)
    s.points.emplace_back(static_cast<double>(e),
                          static_cast<double>(flops_to_exit(m, e, e <= m.num_exits() ? std::vector<Index>{e} : std::vector<Index>{})) / total_flops);
  out.write("cost.svg", [&](std::ostream& os) { write_svg_chart(os, "Inference cost per exit", "exit", "fraction of full FLOPs", {s}); });
}

std::vector<TrainingCostRow> training_cost(const ExperimentConfig& cfg, const Model& global, const GlobalData& data) {
  const Index n = std::min(cfg.experiment.training_cost_samples, data.train.size());
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  const Dataset subset = data.train.subset(idx);
  const int epochs = cfg.experiment.training_cost_epochs;
  std::vector<TrainingCostRow> rows;

  {
    Model m = global;
    GlobalTrainConfig g = cfg.global;
    g.epochs = epochs;
    g.seed = derive_seed(cfg.seed, 500);
    g.lr_decay_epochs.clear();
    const auto t0 = std::chrono::steady_clock::now();
    train_global(m, subset, g);
    rows.push_back({"full", "all", false, n, epochs, epochs * training_flops(global, TrainingMode::Full, n), 1.0, seconds_since(t0)});
  }
  std::vector<std::vector<Index>> exit_sets;
  if (global.num_exits() > 0) exit_sets.push_back({1});
  std::vector<Index> all;
  for (Index e = 1; e <= global.num_exits(); ++e) all.push_back(e);
  if (all.size() > 1) exit_sets.push_back(all);
  for (const auto& exits : exit_sets)
    for (const auto& mode : std::vector<std::string>{"hard_labels", "self_distillation"}) {
      Model m = global;
      auto pc = mode_config(cfg, mode);
      pc.epochs = epochs;
      pc.exits = exits;
      pc.seed = derive_seed(cfg.seed, 501);
      const auto t0 = std::chrono::steady_clock::now();
      personalise_exits(m, subset, {}, pc);
      const double secs = seconds_since(t0);
      const auto f = epochs * training_flops(global, TrainingMode::ExitsOnly, n, exits, pc.needs_teacher());
      rows.push_back({"exits_only_" + mode, exits_text(exits), pc.needs_teacher(), n, epochs, f,
                      static_cast<double>(rows.front().flops) / static_cast<double>(f), secs});
    }
  for (const auto& r : rows)
    log_info("training " + r.mode + " exits [" + r.exits + "]: " + std::to_string(r.seconds) + " s wall clock, " +
             std::to_string(rows.front().seconds / r.seconds) + "x vs full");
  return rows;
}

void write_training_cost(OutputDir& out, const ExperimentConfig& cfg, const std::vector<TrainingCostRow>& rows) {
  out.write("training_cost.csv", [&](std::ostream& os) {
    os << "mode,exits,teacher,samples,epochs,training_flops,flops_speedup_vs_full\n" << std::fixed << std::setprecision(6);
    for (const auto& r : rows)
      os << r.mode << ',' << r.exits << ',' << (r.teacher ? 1 : 0) << ',' << r.samples << ',' << r.epochs << ',' << r.flops
         << ',' << r.speedup << '\n';
  });
  if (!cfg.experiment.svg) return;
  Series s{"speedup", {}};
  for (std::size_t i = 0; i < rows.size(); ++i) s.points.emplace_back(static_cast<double>(i), rows[i].speedup);
  out.write("training_cost.svg", [&](std::ostream& os) {
    write_svg_chart(os, "Analytic training speedup (row order of training_cost.csv)", "configuration", "x vs full", {s});
  });
}

std::pair<ProfileReport, CalibrationResult> profile_and_calibrate(const ExperimentConfig& cfg, const Model& model,
                                                                  const Dataset& calib,
                                                                  const PersonalisationConfig& loss_cfg) {
  ProfileOptions po;
  po.thresholds = cfg.calibration.grid();
  po.loss = loss_cfg;
  po.latency = cfg.latency;
  auto report = profile(model, calib, po);
  auto result = calibrate(report, cfg.calibration.options);
  return {std::move(report), std::move(result)};
}

SweepResult threshold_sweep(const ExperimentConfig& cfg, const Model& global, const std::vector<UserSplit>& users) {
  const auto u = static_cast<std::size_t>(cfg.experiment.sweep_user);
  const auto ud = user_data(cfg, users[u], static_cast<Index>(u));
  Model p = global;
  auto pc = mode_config(cfg, "configured");
  pc.seed = derive_seed(cfg.seed, 400 + u);
  personalise_exits(p, ud.train, {}, pc);

  SweepResult r;
  std::tie(r.report, r.calibration) = profile_and_calibrate(cfg, p, ud.calib, pc);
  std::vector<Index> all;
  for (Index e = 1; e <= global.num_exits(); ++e) all.push_back(e);
  auto sweep = [&](const std::string& name, const Model& m, const std::vector<Index>& exits, const std::vector<double>& grid) {
    for (double t : grid) {
      const auto b = infer_batch(m, ud.test.images, {exits, t}, cfg.latency, &ud.test.labels);
      r.rows.push_back({name, t, *b.summary.accuracy, b.summary.mean_latency_us, b.summary.mean_flops, b.summary.exit_rate});
    }
  };
  const auto grid = cfg.calibration.grid();
  sweep("global", global, all, grid);
  sweep("personalised", p, all, grid);
  sweep("calibrated", p, r.calibration.selected_exits, {r.calibration.threshold});
  return r;
}

void write_threshold_sweep(OutputDir& out, const ExperimentConfig& cfg, const SweepResult& r) {
  out.write("threshold_sweep.csv", [&](std::ostream& os) {
    os << "model,threshold,accuracy,mean_latency_us,mean_flops";
    for (Index e = 1; e <= r.report.final_exit(); ++e) os << ",rate_exit_" << e;
    os << '\n' << std::fixed << std::setprecision(6);
    for (const auto& row : r.rows) {
      os << row.model << ',' << row.threshold << ',' << row.accuracy << ',' << row.mean_latency_us << ',' << row.mean_flops;
      for (double v : row.exit_rate) os << ',' << v;
      os << '\n';
    }
  });
  out.write("profile.csv", [&](std::ostream& os) { write_profile_csv(os, r.report); });
  out.write("exit_stats.csv", [&](std::ostream& os) { write_exit_stats_csv(os, r.report); });
  out.write("pareto.csv", [&](std::ostream& os) { write_pareto_csv(os, r.calibration); });
  out.write("calibration.txt", [&](std::ostream& os) { write_calibration_summary(os, r.calibration); });
  if (!cfg.experiment.svg) return;
  std::vector<Series> series;
  for (const auto& name : {"global", "personalised"}) {
    Series s{name, {}};
    for (const auto& row : r.rows)
      if (row.model == name) s.points.emplace_back(row.mean_latency_us, row.accuracy);
    series.push_back(std::move(s));
  }
  Series front{"pareto (calibration set)", {}};
  for (const auto& p : r.calibration.pareto) front.points.emplace_back(p.latency_us, p.accuracy);
  series.push_back(std::move(front));
  out.write("threshold_sweep.svg", [&](std::ostream& os) {
    write_svg_chart(os, "Accuracy vs inference latency", "mean latency (us)", "accuracy", series);
  });
}

SimulationResult simulate(const ExperimentConfig& cfg, const Model& global, const GlobalData& data,
                          const std::vector<UserSplit>& users, OutputDir* out) {
  const auto u = static_cast<std::size_t>(cfg.experiment.sweep_user);
  const auto& user = users[u];
  const auto ud = user_data(cfg, user, static_cast<Index>(u));
  const bool labelled = cfg.simulate.labelled;
  auto pc = mode_config(cfg, "configured");
  if (!labelled && pc.needs_labels()) pc = mode_config(cfg, "self_distillation");
  pc.seed = derive_seed(cfg.seed, 600);

  std::vector<std::unique_ptr<Model>> models;
  models.push_back(std::make_unique<Model>(global));
  personalise_exits(*models.back(), ud.train, {}, pc);
  auto calibrate_on = [&](const Model& m, const Dataset& calib) {
    return profile_and_calibrate(cfg, m, labelled ? calib : calib.without_labels(), pc).second;
  };
  const auto calibration = calibrate_on(*models.back(), ud.calib);

  OrchestratorConfig oc = cfg.simulate.orchestrator;
  oc.thr_conf_active = calibration.threshold;
  oc.thr_conf_raised = std::max(oc.thr_conf_raised, calibration.threshold);
  oc.loss = pc;
  oc.latency = cfg.latency;
  oc.seed = derive_seed(cfg.seed, 601);
  Orchestrator orch(*models.back(), oc, calibration);

  const Dataset source = without_indices(data.pool, user.test_indices);
  const Index K = global.num_classes;
  const Index n_before = cfg.simulate.shift_at > 0 ? std::min(cfg.simulate.shift_at, cfg.simulate.events) : cfg.simulate.events;
  const Index n_after = cfg.simulate.events - n_before;
  const Dataset before = sample_user_dataset(source, user.distribution, n_before, derive_seed(cfg.seed, 602));
  Dataset after;
  if (n_after > 0) {
    const auto shifted = user_distribution_at(K, user.distribution.sigma, (user.distribution.center + cfg.simulate.shift_by) % K);
    after = sample_user_dataset(source, shifted, n_after, derive_seed(cfg.seed, 603));
  }

  SimulationResult result;
  auto handle = [&](const StepOutcome& s) {
    if (s.drift && !result.first_drift_step) result.first_drift_step = static_cast<Index>(orch.log().size());
    if (std::find(s.actions.begin(), s.actions.end(), Action::RunPersonalisation) == s.actions.end()) return;
    Dataset buffered = orch.buffered_dataset();
    if (!labelled) buffered = buffered.without_labels();
    if (buffered.size() < 4) return;
    auto [train, calib] = split_calibration(buffered, cfg.users.calib_fraction, derive_seed(cfg.seed, 700 + static_cast<std::uint64_t>(result.personalisations)));
    auto next = std::make_unique<Model>(*models.back());
    personalise_exits(*next, train, {}, pc);
    const auto c = calibrate_on(*next, calib);
    models.push_back(std::move(next));
    orch.complete_personalisation(*models.back(), c);
    ++result.personalisations;
  };
  for (Index i = 0; i < cfg.simulate.events; ++i) {
    const bool first = i < n_before;
    const Dataset& src = first ? before : after;
    const Index row = first ? i : i - n_before;
    std::optional<Index> label;
    if (labelled) label = src.labels[static_cast<std::size_t>(row)];
    handle(orch.step(Event::sample(src.images.rows(row, 1), label)));
    if (cfg.simulate.tick_every > 0 && (i + 1) % cfg.simulate.tick_every == 0) handle(orch.step(Event::tick()));
    if (cfg.simulate.plug_every > 0 && (i + 1) % cfg.simulate.plug_every == 0) handle(orch.step(Event::plugged_in()));
  }
  result.log = orch.log();
  result.explorations = orch.exploration_count();
  if (out) {
    out->write("events.csv", [&](std::ostream& os) { orch.write_log_csv(os); });
    out->write("simulate_summary.csv", [&](std::ostream& os) {
      os << "events,shift_at,explorations,first_drift_step,personalisations\n";
      os << cfg.simulate.events << ',' << cfg.simulate.shift_at << ',' << result.explorations << ','
         << (result.first_drift_step ? std::to_string(*result.first_drift_step) : "") << ',' << result.personalisations << '\n';
    });
    if (cfg.experiment.svg) {
      Series thr{"active threshold", {}};
      for (const auto& row : result.log) thr.points.emplace_back(static_cast<double>(row.step), row.active_thr);
      out->write("events.svg", [&](std::ostream& os) { write_svg_chart(os, "Active confidence threshold", "step", "threshold", {thr}); });
    }
  }
  return result;
}

const std::vector<std::string> kExperiments = {"accuracy-vs-samples", "personalisation", "cost", "training-cost",
                                               "threshold-sweep", "all"};

void run_experiment(const std::string& name, const ExperimentConfig& cfg, OutputDir& out) {
  if (std::find(kExperiments.begin(), kExperiments.end(), name) == kExperiments.end())
    throw ConfigError("unknown experiment '" + name + "'");
  const auto t0 = std::chrono::steady_clock::now();
  const GlobalData data = make_global_data(cfg);
  const Model global = obtain_global_model(cfg, data);
  const bool all = name == "all";
  if (all || name == "cost") write_cost(out, cfg, global);
  if (all || name == "training-cost") write_training_cost(out, cfg, training_cost(cfg, global, data));
  const bool needs_users = all || name == "accuracy-vs-samples" || name == "personalisation" || name == "threshold-sweep";
  if (needs_users) {
    if (global.num_exits() < 1) throw ConfigError("experiment " + name + " needs model.num_exits >= 1");
    const auto users = make_users(cfg, data.pool);
    if (all || name == "accuracy-vs-samples")
      write_accuracy_vs_samples(out, cfg, accuracy_vs_samples(cfg, global, data, users));
    if (all || name == "personalisation") write_personalisation(out, cfg, personalisation_gains(cfg, global, users));
    if (all || name == "threshold-sweep") write_threshold_sweep(out, cfg, threshold_sweep(cfg, global, users));
  }
  log_info("experiment " + name + " finished in " + std::to_string(seconds_since(t0)) + " s");
}

}  // namespace mexit::cli
