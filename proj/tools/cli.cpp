#include "cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "experiments.hpp"
#include "mexit/checkpoint.hpp"

namespace mexit::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  std::vector<std::string> sets;
  std::string model_path;
  Index user = 0;
  std::string mode = "configured";
  std::optional<double> threshold;
  std::string calibration_path;
  bool grid = false;
  std::string experiment;
  bool print_defaults = false;
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  for (const auto& s : o.sets) apply_override(cfg, s);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (o.threads) cfg.threads = *o.threads;
  cfg.validate();
  return cfg;
}

Model resolve_model(const ExperimentConfig& cfg, const Options& o, bool prefer_user) {
  std::vector<std::string> candidates;
  if (!o.model_path.empty()) candidates.push_back(o.model_path);
  if (prefer_user) candidates.push_back((fs::path(cfg.out) / ("user" + std::to_string(o.user) + ".ckpt")).string());
  if (!cfg.model.checkpoint.empty()) candidates.push_back(cfg.model.checkpoint);
  candidates.push_back((fs::path(cfg.out) / "global.ckpt").string());
  for (const auto& c : candidates) {
    if (c == o.model_path || fs::exists(c)) {
      log_info("model: " + c);
      return load_checkpoint(c);
    }
  }
  throw ConfigError("no model checkpoint found; run train-global first or pass --model");
}

UserData resolve_user(const ExperimentConfig& cfg, Index user, GlobalData* keep = nullptr) {
  if (user < 0 || user >= cfg.users.n_users) throw ConfigError("--user must be in [0, users.n_users)");
  GlobalData data = make_global_data(cfg);
  const auto users = make_users(cfg, data.pool);
  auto ud = user_data(cfg, users[static_cast<std::size_t>(user)], user);
  if (keep) *keep = std::move(data);
  return ud;
}

void write_accuracy(OutputDir& out, const std::string& name, const std::vector<double>& acc) {
  out.write(name, [&](std::ostream& os) {
    os << "exit_id,accuracy\n" << std::fixed << std::setprecision(6);
    for (std::size_t e = 0; e < acc.size(); ++e) os << e + 1 << ',' << acc[e] << '\n';
  });
}

void cmd_gen_data(const ExperimentConfig& cfg, OutputDir& out) {
  const auto data = make_global_data(cfg);
  const auto users = make_users(cfg, data.pool);
  auto save = [&](const Dataset& d, const std::string& prefix) {
    out.path(prefix + "-images.idx");
    out.path(prefix + "-labels.idx");
    save_dataset(d, (fs::path(out.dir()) / prefix).string());
  };
  save(data.train, "global-train");
  save(data.test, "global-test");
  save(data.pool, "pool");
  for (std::size_t u = 0; u < users.size(); ++u) {
    const auto ud = user_data(cfg, users[u], static_cast<Index>(u));
    const auto p = "user" + std::to_string(u);
    save(ud.train, p + "-train");
    save(ud.calib, p + "-calib");
    save(ud.test, p + "-test");
  }
  write_manifest(users, out.path("users.txt"));
  log_info("wrote " + std::to_string(out.files().size()) + " files to " + out.dir());
}

void cmd_train_global(const ExperimentConfig& cfg, OutputDir& out) {
  const auto data = make_global_data(cfg);
  ExperimentConfig fresh = cfg;
  fresh.model.checkpoint.clear();
  TrainingLog log;
  const Model m = obtain_global_model(fresh, data, &log);
  save_checkpoint(m, out.path("global.ckpt"));
  out.write("train_log.csv", [&](std::ostream& os) { log.write_csv(os); });
  write_accuracy(out, "exit_accuracy.csv", exit_accuracies(m, data.test));
  write_cost(out, cfg, m);
}

void cmd_personalise(const ExperimentConfig& cfg, const Options& o, OutputDir& out) {
  Model m = resolve_model(cfg, o, false);
  const auto ud = resolve_user(cfg, o.user);
  auto pc = mode_config(cfg, o.mode);
  pc.seed = derive_seed(cfg.seed, 400 + static_cast<std::uint64_t>(o.user));
  const auto before = exit_accuracies(m, ud.test);
  auto log = personalise_exits(m, ud.train, ud.calib, pc);
  log_info("personalisation took " + std::to_string(log.seconds) + " s");
  const auto after = exit_accuracies(m, ud.test);
  const auto tag = "user" + std::to_string(o.user);
  save_checkpoint(m, out.path(tag + ".ckpt"));
  out.write("personalise_log_" + tag + ".csv", [&](std::ostream& os) { log.write_csv(os); });
  out.write("exit_accuracy_" + tag + ".csv", [&](std::ostream& os) {
    os << "exit_id,accuracy_before,accuracy_after\n" << std::fixed << std::setprecision(6);
    for (std::size_t e = 0; e < after.size(); ++e) os << e + 1 << ',' << before[e] << ',' << after[e] << '\n';
  });
}

void cmd_profile(const ExperimentConfig& cfg, const Options& o, OutputDir& out, bool calibrate_too) {
  const Model m = resolve_model(cfg, o, true);
  const auto ud = resolve_user(cfg, o.user);
  auto [report, calibration] = profile_and_calibrate(cfg, m, ud.calib, mode_config(cfg, o.mode));
  out.write("profile.csv", [&](std::ostream& os) { write_profile_csv(os, report); });
  out.write("exit_stats.csv", [&](std::ostream& os) { write_exit_stats_csv(os, report); });
  if (!calibrate_too) return;
  out.write("pareto.csv", [&](std::ostream& os) { write_pareto_csv(os, calibration); });
  out.write("calibration.txt", [&](std::ostream& os) { write_calibration_summary(os, calibration); });
  log_info("threshold " + std::to_string(calibration.threshold) + ", expected accuracy " +
           std::to_string(calibration.expected_accuracy));
}

void cmd_infer(const ExperimentConfig& cfg, const Options& o, OutputDir& out) {
  const Model m = resolve_model(cfg, o, true);
  const auto ud = resolve_user(cfg, o.user);
  ExitPolicy policy;
  for (Index e = 1; e <= m.num_exits(); ++e) policy.selected_exits.push_back(e);
  if (!o.calibration_path.empty()) {
    std::ifstream in(o.calibration_path);
    if (!in) throw ConfigError("cannot open " + o.calibration_path);
    policy = read_calibration_summary(in).policy();
  }
  if (o.threshold) policy.threshold = *o.threshold;
  if (o.grid) {
    out.write("infer_sweep.csv", [&](std::ostream& os) {
      os << "threshold,accuracy,mean_latency_us,mean_flops\n" << std::fixed << std::setprecision(6);
      for (double t : cfg.calibration.grid()) {
        const auto b = infer_batch(m, ud.test.images, {policy.selected_exits, t}, cfg.latency, &ud.test.labels);
        os << t << ',' << *b.summary.accuracy << ',' << b.summary.mean_latency_us << ',' << b.summary.mean_flops << '\n';
      }
    });
    return;
  }
  const auto b = infer_batch(m, ud.test.images, policy, cfg.latency, &ud.test.labels);
  out.write("infer_results.csv", [&](std::ostream& os) { write_results_csv(os, b.results, &ud.test.labels); });
  log_info("accuracy " + std::to_string(*b.summary.accuracy) + ", mean flops " + std::to_string(b.summary.mean_flops));
}

void cmd_simulate(const ExperimentConfig& cfg, const Options& o, OutputDir& out) {
  const Model m = resolve_model(cfg, o, false);
  const auto data = make_global_data(cfg);
  const auto users = make_users(cfg, data.pool);
  const auto r = simulate(cfg, m, data, users, &out);
  log_info("explorations " + std::to_string(r.explorations) + ", personalisations " + std::to_string(r.personalisations) +
           (r.first_drift_step ? ", first drift at step " + std::to_string(*r.first_drift_step) : ", no drift"));
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Early-exit network personalisation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "master seed");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--threads", o.threads, "worker threads for independent runs");
  app.add_option("--set", o.sets, "override a config value, section.key=value");

  auto add_model = [&](CLI::App* s) { s->add_option("--model", o.model_path, "model checkpoint"); };
  auto add_user = [&](CLI::App* s) { s->add_option("--user", o.user, "user index"); };
  auto add_mode = [&](CLI::App* s) {
    s->add_option("--mode", o.mode, "configured, hard_labels, self_distillation or self_supervised");
  };

  auto* gen = app.add_subcommand("gen-data", "write global, pool and per-user IDX datasets");
  auto* train = app.add_subcommand("train-global", "train the multi-exit global model");
  auto* pers = app.add_subcommand("personalise", "personalise the early exits for one user");
  add_model(pers), add_user(pers), add_mode(pers);
  auto* prof = app.add_subcommand("profile", "profile every exit on a user's calibration split");
  add_model(prof), add_user(prof), add_mode(prof);
  auto* cal = app.add_subcommand("calibrate", "profile, choose the threshold and prune exits");
  add_model(cal), add_user(cal), add_mode(cal);
  auto* inf = app.add_subcommand("infer", "early-exit inference on a user's test split");
  add_model(inf), add_user(inf);
  inf->add_option("--threshold", o.threshold, "confidence threshold");
  inf->add_option("--calibration", o.calibration_path, "calibration summary to take the policy from");
  inf->add_flag("--grid", o.grid, "sweep the threshold grid");
  auto* sim = app.add_subcommand("simulate", "run the orchestrator over a scripted event stream");
  add_model(sim);
  auto* exp = app.add_subcommand("experiment", "run a reproduction experiment");
  exp->add_option("name", o.experiment, "experiment name")->required()->check(CLI::IsMember(kExperiments));
  auto* conf = app.add_subcommand("config", "configuration helpers");
  conf->add_flag("--print-defaults", o.print_defaults, "print every key with its default value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::unique_ptr<OutputDir> out;
  try {
    if (*conf) {
      if (!o.print_defaults) throw ConfigError("config: nothing to do (try --print-defaults)");
      write_config(std::cout, ExperimentConfig{});
      return 0;
    }
    const auto cfg = resolve_config(o);
    out = std::make_unique<OutputDir>(cfg.out);
    if (*gen) cmd_gen_data(cfg, *out);
    else if (*train) cmd_train_global(cfg, *out);
    else if (*pers) cmd_personalise(cfg, o, *out);
    else if (*prof) cmd_profile(cfg, o, *out, false);
    else if (*cal) cmd_profile(cfg, o, *out, true);
    else if (*inf) cmd_infer(cfg, o, *out);
    else if (*sim) cmd_simulate(cfg, o, *out);
    else if (*exp) run_experiment(o.experiment, cfg, *out);
    return 0;
  } catch (const ConfigError& e) {
    if (out) out->rollback();
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    if (out) out->rollback();
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace mexit::cli
