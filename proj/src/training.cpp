#include "mexit/training.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>

namespace mexit {
namespace {

std::vector<std::vector<Index>> epoch_batches(Index n, int batch_size, std::mt19937_64& rng) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<Index>> batches;
  for (std::size_t at = 0; at < perm.size(); at += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(perm.size(), at + static_cast<std::size_t>(batch_size));
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(at), perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

void step_stack(LayerStack<float>& stack, const std::vector<LayerGrads<float>>& grads,
                std::vector<LayerGrads<float>>& velocity, double lr, double momentum) {
  for (std::size_t k = 0; k < stack.size(); ++k)
    if (stack[k].has_params()) sgd_step(stack[k], grads[k], velocity[k], lr, momentum);
}

std::vector<Index> labels_of(const Dataset& d, const std::vector<Index>& idx) {
  std::vector<Index> y;
  y.reserve(idx.size());
  for (Index i : idx) y.push_back(d.labels[static_cast<std::size_t>(i)]);
  return y;
}

}  // namespace

void TrainingLog::write_csv(std::ostream& os) const {
  os << "epoch,exit_id,mean_loss,accuracy\n";
  os << std::setprecision(6) << std::fixed;
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.exit_id << ',' << r.mean_loss << ',';
    if (r.accuracy) os << *r.accuracy;
    os << '\n';
  }
}

void TrainingLog::write_csv(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot open for writing: " + path);
  write_csv(os);
}

std::vector<double> default_exit_weights(const Model& m) {
  const auto f = block_flops(m);
  const auto total = static_cast<double>(std::accumulate(f.begin(), f.end(), std::int64_t{0}));
  std::vector<double> w;
  for (Index e = 1; e <= m.num_exits(); ++e) w.push_back(static_cast<double>(backbone_prefix_flops(m, e)) / total);
  w.push_back(1.0);
  return w;
}

void GlobalTrainConfig::validate(const Model& m) const {
  if (!exit_weights.empty()) {
    if (static_cast<Index>(exit_weights.size()) != m.final_exit())
      throw ConfigError("global training needs " + std::to_string(m.final_exit()) + " exit weights");
    for (double w : exit_weights)
      if (w < 0.0) throw ConfigError("exit weights must be nonnegative");
    if (!(exit_weights.back() > 0.0)) throw ConfigError("final exit weight must be positive");
  }
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(lr_decay > 0.0)) throw ConfigError("lr decay factor must be positive");
}

TrainingLog train_global(Model& model, const Dataset& data, const GlobalTrainConfig& cfg) {
  cfg.validate(model);
  if (data.size() < 1) throw ConfigError("global training needs a nonempty dataset");
  if (!data.has_labels()) throw ConfigError("global training needs labelled data");
  const auto weights = cfg.exit_weights.empty() ? default_exit_weights(model) : cfg.exit_weights;
  const auto t0 = std::chrono::steady_clock::now();
  auto velocity = ModelGrads<float>::zeros_like(model);
  std::mt19937_64 rng(cfg.seed);
  TrainingLog log;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double lr = cfg.lr;
    for (int d : cfg.lr_decay_epochs)
      if (epoch >= d) lr *= cfg.lr_decay;
    std::vector<double> loss(weights.size(), 0.0);
    std::vector<Index> correct(weights.size(), 0);
    for (const auto& idx : epoch_batches(data.size(), cfg.batch_size, rng)) {
      auto grads = ModelGrads<float>::zeros_like(model);
      const auto stats = global_batch(model, data.images.gather(idx), labels_of(data, idx), weights, cfg.freeze_backbone, grads);
      for (std::size_t e = 0; e < weights.size(); ++e) {
        loss[e] += stats.loss_sum[e];
        correct[e] += stats.correct[e];
      }
      for (std::size_t e = 0; e < model.exits.size(); ++e)
        if (weights[e] > 0.0) step_stack(model.exits[e].layers, grads.exits[e], velocity.exits[e], lr, cfg.momentum);
      if (!cfg.freeze_backbone) {
        for (std::size_t b = 0; b < model.blocks.size(); ++b)
          step_stack(model.blocks[b], grads.blocks[b], velocity.blocks[b], lr, cfg.momentum);
        step_stack(model.classifier, grads.classifier, velocity.classifier, lr, cfg.momentum);
      }
    }
    const auto n = static_cast<double>(data.size());
    for (std::size_t e = 0; e < weights.size(); ++e) {
      const bool trained = weights[e] > 0.0 && (!cfg.freeze_backbone || e + 1 < weights.size());
      if (trained) log.rows.push_back({epoch, static_cast<Index>(e + 1), loss[e] / n, static_cast<double>(correct[e]) / n});
    }
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

TrainingLog personalise_exits(Model& model, const Dataset& user_data, const Dataset& calib_holdout,
                              const PersonalisationConfig& cfg) {
  cfg.validate();
  if (user_data.size() < 1) throw ConfigError("personalisation needs nonempty user data");
  if (cfg.needs_labels() && !user_data.has_labels())
    throw ConfigError("supervised personalisation (alpha > 0) requires labelled user data");
  if (model.num_exits() < 1) throw ConfigError("model has no early exits to personalise");
  std::vector<Index> trained = cfg.exits;
  if (trained.empty())
    for (Index e = 1; e <= model.num_exits(); ++e) trained.push_back(e);
  std::sort(trained.begin(), trained.end());
  trained.erase(std::unique(trained.begin(), trained.end()), trained.end());
  for (Index e : trained)
    if (e < 1 || e > model.num_exits()) throw ConfigError("cannot personalise exit " + std::to_string(e));

  const auto t0 = std::chrono::steady_clock::now();
  auto velocity = ModelGrads<float>::zeros_like(model);
  std::mt19937_64 rng(cfg.seed);
  TrainingLog log;
  const bool eval_holdout = calib_holdout.size() > 0 && calib_holdout.has_labels();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<double> loss(static_cast<std::size_t>(model.final_exit()), 0.0);
    std::vector<Index> correct(loss.size(), 0);
    for (const auto& idx : epoch_batches(user_data.size(), cfg.batch_size, rng)) {
      auto grads = ModelGrads<float>::zeros_like(model);
      std::vector<Index> y;
      if (user_data.has_labels()) y = labels_of(user_data, idx);
      const auto stats = personalisation_batch(model, user_data.images.gather(idx), y.empty() ? nullptr : &y, cfg, trained, grads);
      for (Index e : trained) {
        const auto k = static_cast<std::size_t>(e - 1);
        loss[k] += stats.loss_sum[k];
        correct[k] += stats.correct[k];
        step_stack(model.exits[k].layers, grads.exits[k], velocity.exits[k], cfg.lr, cfg.momentum);
      }
    }
    std::vector<double> holdout_acc;
    if (eval_holdout) holdout_acc = exit_accuracies(model, calib_holdout);
    const auto n = static_cast<double>(user_data.size());
    for (Index e : trained) {
      const auto k = static_cast<std::size_t>(e - 1);
      TrainLogRow row{epoch, e, loss[k] / n, std::nullopt};
      if (eval_holdout)
        row.accuracy = holdout_acc[k];
      else if (user_data.has_labels())
        row.accuracy = static_cast<double>(correct[k]) / n;
      log.rows.push_back(row);
    }
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

std::int64_t training_flops(const Model& m, TrainingMode mode, Index n_samples, const std::vector<Index>& exits,
                            bool needs_teacher) {
  const auto blocks = block_flops(m);
  const std::int64_t backbone = std::accumulate(blocks.begin(), blocks.end(), std::int64_t{0});
  if (mode == TrainingMode::Full) {
    std::int64_t forward = backbone + head_flops(m, m.final_exit());
    for (Index e = 1; e <= m.num_exits(); ++e) forward += head_flops(m, e);
    return n_samples * 3 * forward;
  }
  std::vector<Index> trained = exits;
  if (trained.empty())
    for (Index e = 1; e <= m.num_exits(); ++e) trained.push_back(e);
  std::int64_t prefix = 0;
  if (needs_teacher) {
    prefix = backbone + head_flops(m, m.final_exit());
  } else {
    for (Index e : trained) prefix = std::max(prefix, backbone_prefix_flops(m, e));
  }
  std::int64_t heads = 0;
  for (Index e : trained) heads += head_flops(m, e);
  return n_samples * (prefix + 3 * heads);
}

std::vector<double> exit_accuracies(const Model& model, const Dataset& data, Index batch_size) {
  if (!data.has_labels()) throw ConfigError("exit accuracy needs labelled data");
  std::vector<Index> correct(static_cast<std::size_t>(model.final_exit()), 0);
  for (Index at = 0; at < data.size(); at += batch_size) {
    const Index count = std::min(batch_size, data.size() - at);
    const auto outs = forward_all_exits(model, data.images.rows(at, count));
    for (std::size_t e = 0; e < outs.size(); ++e)
      for (Index s = 0; s < count; ++s)
        if (argmax(outs[e].slice(s)) == data.labels[static_cast<std::size_t>(at + s)]) ++correct[e];
  }
  std::vector<double> acc;
  for (Index c : correct) acc.push_back(static_cast<double>(c) / static_cast<double>(data.size()));
  return acc;
}

std::vector<double> exit_agreement(const Model& model, const Dataset& data, Index batch_size) {
  std::vector<Index> agree(static_cast<std::size_t>(model.final_exit()), 0);
  for (Index at = 0; at < data.size(); at += batch_size) {
    const Index count = std::min(batch_size, data.size() - at);
    const auto outs = forward_all_exits(model, data.images.rows(at, count));
    for (Index s = 0; s < count; ++s) {
      const Index ref = argmax(outs.back().slice(s));
      for (std::size_t e = 0; e < outs.size(); ++e)
        if (argmax(outs[e].slice(s)) == ref) ++agree[e];
    }
  }
  std::vector<double> out;
  for (Index a : agree) out.push_back(static_cast<double>(a) / static_cast<double>(data.size()));
  return out;
}

}  // namespace mexit
