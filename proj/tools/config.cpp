#include "config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

namespace mexit::cli {

namespace {

std::string format(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}
std::string format(Index v) { return std::to_string(v); }
std::string format(int v) { return std::to_string(v); }
std::string format(std::uint64_t v) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(const std::string& v) { return v; }
std::string format(LatencyModel::Mode m) { return m == LatencyModel::Mode::Synthetic ? "synthetic" : "measured"; }
template <typename T>
std::string format(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format(v[i]);
  return s;
}

template <typename T>
T parse_number(const std::string& s) {
  T v{};
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last) throw ConfigError("cannot parse '" + s + "' as a number");
  return v;
}

void parse(const std::string& s, double& v) { v = parse_number<double>(s); }
void parse(const std::string& s, Index& v) { v = parse_number<Index>(s); }
void parse(const std::string& s, int& v) { v = parse_number<int>(s); }
void parse(const std::string& s, std::uint64_t& v) { v = parse_number<std::uint64_t>(s); }
void parse(const std::string& s, std::string& v) { v = s; }
void parse(const std::string& s, bool& v) {
  if (s == "true" || s == "1" || s == "yes") v = true;
  else if (s == "false" || s == "0" || s == "no") v = false;
  else throw ConfigError("cannot parse '" + s + "' as a boolean");
}
void parse(const std::string& s, LatencyModel::Mode& m) {
  if (s == "synthetic") m = LatencyModel::Mode::Synthetic;
  else if (s == "measured") m = LatencyModel::Mode::Measured;
  else throw ConfigError("latency mode must be synthetic or measured, got '" + s + "'");
}
template <typename T>
void parse(const std::string& s, std::vector<T>& v) {
  v.clear();
  std::istringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    if (b == std::string::npos) continue;
    T x{};
    parse(item.substr(b, item.find_last_not_of(' ') - b + 1), x);
    v.push_back(x);
  }
}

struct Field {
  std::string section, key;
  std::function<std::string(ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename Ref>
Field bind(std::string section, std::string key, Ref ref) {
  return {std::move(section), std::move(key), [ref](ExperimentConfig& c) { return format(ref(c)); },
          [ref](ExperimentConfig& c, const std::string& s) { parse(s, ref(c)); }};
}

#define MEXIT_FIELD(section, key, expr) bind(section, key, [](ExperimentConfig& c) -> auto& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      MEXIT_FIELD("general", "seed", c.seed),
      MEXIT_FIELD("general", "out", c.out),
      MEXIT_FIELD("general", "threads", c.threads),

      MEXIT_FIELD("data", "num_classes", c.data.synthetic.num_classes),
      MEXIT_FIELD("data", "sample_shape", c.data.synthetic.sample_shape),
      MEXIT_FIELD("data", "blobs_per_class", c.data.synthetic.blobs_per_class),
      MEXIT_FIELD("data", "blob_sigma", c.data.synthetic.blob_sigma),
      MEXIT_FIELD("data", "position_jitter", c.data.synthetic.position_jitter),
      MEXIT_FIELD("data", "amplitude_jitter", c.data.synthetic.amplitude_jitter),
      MEXIT_FIELD("data", "pixel_noise", c.data.synthetic.pixel_noise),
      MEXIT_FIELD("data", "distractor_blobs", c.data.synthetic.distractor_blobs),
      MEXIT_FIELD("data", "task_seed", c.data.synthetic.task_seed),
      MEXIT_FIELD("data", "train_samples", c.data.train_samples),
      MEXIT_FIELD("data", "test_samples", c.data.test_samples),
      MEXIT_FIELD("data", "pool_samples", c.data.pool_samples),
      MEXIT_FIELD("data", "train_images", c.data.train_images),
      MEXIT_FIELD("data", "train_labels", c.data.train_labels),
      MEXIT_FIELD("data", "test_images", c.data.test_images),
      MEXIT_FIELD("data", "test_labels", c.data.test_labels),

      MEXIT_FIELD("users", "n_users", c.users.n_users),
      MEXIT_FIELD("users", "samples_per_user", c.users.samples_per_user),
      MEXIT_FIELD("users", "test_per_user", c.users.test_per_user),
      MEXIT_FIELD("users", "sigma", c.users.sigma),
      MEXIT_FIELD("users", "calib_fraction", c.users.calib_fraction),

      MEXIT_FIELD("model", "widths", c.model.backbone.widths),
      MEXIT_FIELD("model", "pool_after", c.model.backbone.pool_after),
      MEXIT_FIELD("model", "num_exits", c.model.num_exits),
      MEXIT_FIELD("model", "head_channels", c.model.head_channels),
      MEXIT_FIELD("model", "checkpoint", c.model.checkpoint),

      MEXIT_FIELD("global", "epochs", c.global.epochs),
      MEXIT_FIELD("global", "lr", c.global.lr),
      MEXIT_FIELD("global", "momentum", c.global.momentum),
      MEXIT_FIELD("global", "batch_size", c.global.batch_size),
      MEXIT_FIELD("global", "exit_weights", c.global.exit_weights),
      MEXIT_FIELD("global", "lr_decay_epochs", c.global.lr_decay_epochs),
      MEXIT_FIELD("global", "lr_decay", c.global.lr_decay),
      MEXIT_FIELD("global", "freeze_backbone", c.global.freeze_backbone),

      MEXIT_FIELD("personalise", "alpha", c.personalise.alpha),
      MEXIT_FIELD("personalise", "beta", c.personalise.beta),
      MEXIT_FIELD("personalise", "gamma", c.personalise.gamma),
      MEXIT_FIELD("personalise", "temperature", c.personalise.temperature),
      MEXIT_FIELD("personalise", "epochs", c.personalise.epochs),
      MEXIT_FIELD("personalise", "lr", c.personalise.lr),
      MEXIT_FIELD("personalise", "momentum", c.personalise.momentum),
      MEXIT_FIELD("personalise", "batch_size", c.personalise.batch_size),
      MEXIT_FIELD("personalise", "exits", c.personalise.exits),

      MEXIT_FIELD("calibration", "tolerance_points", c.calibration.options.tolerance_points),
      MEXIT_FIELD("calibration", "min_exit_rate", c.calibration.options.min_exit_rate),
      MEXIT_FIELD("calibration", "max_accuracy_gap_points", c.calibration.options.max_accuracy_gap_points),
      MEXIT_FIELD("calibration", "grid_step", c.calibration.grid_step),

      MEXIT_FIELD("latency", "mode", c.latency.mode),
      MEXIT_FIELD("latency", "base_us", c.latency.base_us),
      MEXIT_FIELD("latency", "us_per_mflop", c.latency.us_per_mflop),

      MEXIT_FIELD("simulate", "p_expl", c.simulate.orchestrator.p_expl),
      MEXIT_FIELD("simulate", "thr_conf_raised", c.simulate.orchestrator.thr_conf_raised),
      MEXIT_FIELD("simulate", "drift_factor", c.simulate.orchestrator.drift_factor),
      MEXIT_FIELD("simulate", "drift_window", c.simulate.orchestrator.drift_window),
      MEXIT_FIELD("simulate", "min_new_samples", c.simulate.orchestrator.min_new_samples),
      MEXIT_FIELD("simulate", "deviation_limit", c.simulate.orchestrator.deviation_limit),
      MEXIT_FIELD("simulate", "ewma_smoothing", c.simulate.orchestrator.ewma_smoothing),
      MEXIT_FIELD("simulate", "events", c.simulate.events),
      MEXIT_FIELD("simulate", "shift_at", c.simulate.shift_at),
      MEXIT_FIELD("simulate", "shift_by", c.simulate.shift_by),
      MEXIT_FIELD("simulate", "plug_every", c.simulate.plug_every),
      MEXIT_FIELD("simulate", "tick_every", c.simulate.tick_every),
      MEXIT_FIELD("simulate", "labelled", c.simulate.labelled),

      MEXIT_FIELD("experiment", "sample_counts", c.experiment.sample_counts),
      MEXIT_FIELD("experiment", "training_cost_samples", c.experiment.training_cost_samples),
      MEXIT_FIELD("experiment", "training_cost_epochs", c.experiment.training_cost_epochs),
      MEXIT_FIELD("experiment", "sweep_user", c.experiment.sweep_user),
      MEXIT_FIELD("experiment", "svg", c.experiment.svg),
  };
  return all;
}

#undef MEXIT_FIELD

const Field& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return f;
  throw ConfigError("unknown config key '" + section + "." + key + "'");
}

}  // namespace

std::vector<double> CalibConfig::grid() const {
  if (!(grid_step > 0.0 && grid_step <= 1.0)) throw ConfigError("calibration.grid_step must be in (0, 1]");
  std::vector<double> g;
  const auto steps = static_cast<int>(std::floor(1.0 / grid_step + 1e-9));
  for (int k = 0; k <= steps; ++k) g.push_back(std::min(1.0, k * grid_step));
  if (g.back() < 1.0) g.push_back(1.0);
  return g;
}

void ExperimentConfig::validate() const {
  if (threads < 1) throw ConfigError("general.threads must be >= 1");
  if (out.empty()) throw ConfigError("general.out must not be empty");
  if (data.train_samples < 1 || data.test_samples < 1 || data.pool_samples < 1)
    throw ConfigError("data sample counts must be >= 1");
  if (data.train_images.empty() != data.train_labels.empty())
    throw ConfigError("data.train_images and data.train_labels must be given together");
  if (data.test_images.empty() != data.test_labels.empty())
    throw ConfigError("data.test_images and data.test_labels must be given together");
  if (users.n_users < 1) throw ConfigError("users.n_users must be >= 1");
  if (users.test_per_user < 1 || users.samples_per_user <= users.test_per_user)
    throw ConfigError("users.samples_per_user must exceed users.test_per_user >= 1");
  if (!(users.sigma > 0.0)) throw ConfigError("users.sigma must be positive");
  if (!(users.calib_fraction > 0.0 && users.calib_fraction < 1.0))
    throw ConfigError("users.calib_fraction must be in (0, 1)");
  if (model.num_exits < 0) throw ConfigError("model.num_exits must be >= 0");
  if (model.head_channels < 1) throw ConfigError("model.head_channels must be >= 1");
  personalise.validate();
  (void)calibration.grid();
  if (calibration.options.tolerance_points < 0.0) throw ConfigError("calibration.tolerance_points must be >= 0");
  if (!(latency.us_per_mflop >= 0.0 && latency.base_us >= 0.0)) throw ConfigError("latency costs must be >= 0");
  if (simulate.events < 1) throw ConfigError("simulate.events must be >= 1");
  if (simulate.shift_at < 0 || simulate.plug_every < 0 || simulate.tick_every < 0)
    throw ConfigError("simulate event spacings must be >= 0");
  for (Index n : experiment.sample_counts)
    if (n < 1) throw ConfigError("experiment.sample_counts must be >= 1");
  if (experiment.training_cost_samples < 1 || experiment.training_cost_epochs < 1)
    throw ConfigError("experiment training cost sizes must be >= 1");
  if (experiment.sweep_user < 0 || experiment.sweep_user >= users.n_users)
    throw ConfigError("experiment.sweep_user must index one of the users");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

ExperimentConfig parse_config(std::istream& is) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' outside of a [section]");
    for (const auto& [key, value] : body) {
      try {
        find_field(section, key).set(cfg, value.data());
      } catch (const ConfigError& e) {
        throw ConfigError("config " + section + "." + key + ": " + e.what());
      }
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in);
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override must look like section.key=value, got '" + assignment + "'");
  find_field(assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1)).set(cfg, assignment.substr(eq + 1));
}

void write_config(std::ostream& os, const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      os << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.get(copy) << '\n';
  }
}

}  // namespace mexit::cli
