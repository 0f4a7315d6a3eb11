#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mexit/data.hpp"
#include "mexit/losses.hpp"
#include "mexit/model.hpp"

namespace mexit {

/// Gradient (or momentum) storage shaped like a whole model.
template <typename Scalar>
struct ModelGrads {
  std::vector<std::vector<LayerGrads<Scalar>>> blocks;
  std::vector<LayerGrads<Scalar>> classifier;
  std::vector<std::vector<LayerGrads<Scalar>>> exits;

  static ModelGrads zeros_like(const ModelGraph<Scalar>& m) {
    auto zeros = [](const LayerStack<Scalar>& s) {
      std::vector<LayerGrads<Scalar>> g;
      for (const auto& l : s) g.push_back(LayerGrads<Scalar>::zeros_like(l));
      return g;
    };
    ModelGrads g;
    for (const auto& b : m.blocks) g.blocks.push_back(zeros(b));
    g.classifier = zeros(m.classifier);
    for (const auto& e : m.exits) g.exits.push_back(zeros(e.layers));
    return g;
  }
};

/// Loss summary of one minibatch.
struct BatchStats {
  std::vector<double> loss_sum;      // per exit ordinal - 1, summed over samples
  std::vector<Index> correct;        // per exit, against labels when present
  Index samples = 0;
};

namespace detail {

template <typename Scalar>
struct CachedStack {
  std::vector<LayerCache<Scalar>> caches;
  Tensor<Scalar> output;
};

template <typename Scalar>
CachedStack<Scalar> forward_cached(const LayerStack<Scalar>& stack, Tensor<Scalar> x) {
  CachedStack<Scalar> r;
  for (const auto& l : stack) {
    auto f = forward_layer(l, x, true);
    r.caches.push_back(std::move(f.cache));
    x = std::move(f.output);
  }
  r.output = std::move(x);
  return r;
}

/// Backward through a stack, accumulating into `grads`; returns the input
/// gradient unless `need_input_grad` is false.
template <typename Scalar>
Tensor<Scalar> backward_stack(const LayerStack<Scalar>& stack, const CachedStack<Scalar>& fwd, Tensor<Scalar> g,
                              std::vector<LayerGrads<Scalar>>& grads, bool need_input_grad) {
  for (std::size_t k = stack.size(); k-- > 0;) {
    auto b = backward_layer(stack[k], g, fwd.caches[k], need_input_grad || k > 0);
    grads[k].add(b.grads);
    g = std::move(b.grad_input);
  }
  return g;
}

template <typename Scalar>
Vector<Scalar> row(const Tensor<Scalar>& logits, Index s) {
  return logits.slice(s);
}

}  // namespace detail

/// Mean personalisation loss over a batch and its gradient w.r.t. the heads
/// of `trained` exits (1-based). Backbone blocks run without caches and
/// receive no gradient. Gradients are accumulated into `grads.exits`.
template <typename Scalar>
BatchStats personalisation_batch(const ModelGraph<Scalar>& m, const Tensor<Scalar>& images,
                                 const std::vector<Index>* labels, const PersonalisationConfig& cfg,
                                 const std::vector<Index>& trained, ModelGrads<Scalar>& grads) {
  const Index n = images.dim(0);
  const Index final_exit = m.final_exit();
  Index last_block = -1;
  for (Index e : trained) last_block = std::max(last_block, m.exits[static_cast<std::size_t>(e - 1)].block);
  const bool teacher = cfg.needs_teacher();
  const std::size_t end = teacher ? m.blocks.size() : static_cast<std::size_t>(last_block + 1);

  std::vector<std::optional<detail::CachedStack<Scalar>>> heads(m.exits.size());
  Tensor<Scalar> x = images;
  Tensor<Scalar> teacher_logits;
  for (std::size_t b = 0; b < end; ++b) {
    x = run_stack(m.blocks[b], std::move(x));
    for (Index e : trained)
      if (m.exits[static_cast<std::size_t>(e - 1)].block == static_cast<Index>(b))
        heads[static_cast<std::size_t>(e - 1)] = detail::forward_cached(m.exits[static_cast<std::size_t>(e - 1)].layers, x);
  }
  if (teacher) teacher_logits = run_stack(m.classifier, std::move(x));

  BatchStats stats;
  stats.loss_sum.assign(static_cast<std::size_t>(final_exit), 0.0);
  stats.correct.assign(static_cast<std::size_t>(final_exit), 0);
  stats.samples = n;
  std::vector<Tensor<Scalar>> grad_logits(m.exits.size());
  for (Index e : trained) grad_logits[static_cast<std::size_t>(e - 1)] = Tensor<Scalar>({n, m.num_classes});

  const Vector<Scalar> zero = Vector<Scalar>::Zero(m.num_classes);
  for (Index s = 0; s < n; ++s) {
    std::vector<Vector<Scalar>> outs;
    for (Index e : trained) outs.push_back(detail::row(heads[static_cast<std::size_t>(e - 1)]->output, s));
    outs.push_back(teacher ? detail::row(teacher_logits, s) : zero);
    std::optional<Index> y;
    if (labels) y = (*labels)[static_cast<std::size_t>(s)];
    const auto loss = personalisation_loss(outs, y, cfg);
    for (std::size_t k = 0; k < trained.size(); ++k) {
      const auto e = static_cast<std::size_t>(trained[k] - 1);
      if (!std::isfinite(loss.per_exit[k]))
        throw TrainingError("non-finite personalisation loss at exit " + std::to_string(trained[k]));
      stats.loss_sum[e] += loss.per_exit[k];
      if (y && argmax(outs[k]) == *y) ++stats.correct[e];
      grad_logits[e].slice(s) = loss.grads[k] / static_cast<Scalar>(n);
    }
  }
  for (Index e : trained) {
    const auto k = static_cast<std::size_t>(e - 1);
    detail::backward_stack(m.exits[k].layers, *heads[k], std::move(grad_logits[k]), grads.exits[k], false);
  }
  return stats;
}

/// Mean weighted cross-entropy sum_i w_i CE(exit_i) over a batch with
/// gradients for every trainable parameter. `weights` has M+1 entries; exits
/// with zero weight are skipped entirely. With `freeze_backbone` only the
/// early-exit heads receive gradients.
template <typename Scalar>
BatchStats global_batch(const ModelGraph<Scalar>& m, const Tensor<Scalar>& images, const std::vector<Index>& labels,
                        const std::vector<double>& weights, bool freeze_backbone, ModelGrads<Scalar>& grads) {
  const Index n = images.dim(0);
  const auto n_exits = static_cast<std::size_t>(m.final_exit());
  if (weights.size() != n_exits) throw ConfigError("need one loss weight per exit (M+1)");

  std::vector<detail::CachedStack<Scalar>> blocks;
  std::vector<std::optional<detail::CachedStack<Scalar>>> heads(m.exits.size());
  Tensor<Scalar> x = images;
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    if (freeze_backbone) {
      x = run_stack(m.blocks[b], std::move(x));
    } else {
      blocks.push_back(detail::forward_cached(m.blocks[b], std::move(x)));
      x = blocks.back().output;
    }
    for (std::size_t e = 0; e < m.exits.size(); ++e)
      if (m.exits[e].block == static_cast<Index>(b) && weights[e] > 0.0) heads[e] = detail::forward_cached(m.exits[e].layers, x);
  }
  const bool train_final = !freeze_backbone && weights.back() > 0.0;
  std::optional<detail::CachedStack<Scalar>> final_head;
  if (train_final) final_head = detail::forward_cached(m.classifier, std::move(x));

  BatchStats stats;
  stats.loss_sum.assign(n_exits, 0.0);
  stats.correct.assign(n_exits, 0);
  stats.samples = n;
  auto loss_grads = [&](const Tensor<Scalar>& logits, std::size_t e) {
    Tensor<Scalar> g({n, m.num_classes});
    for (Index s = 0; s < n; ++s) {
      const auto l = supervised_loss(logits.slice(s), labels[static_cast<std::size_t>(s)]);
      if (!std::isfinite(l.loss)) throw TrainingError("non-finite loss at exit " + std::to_string(e + 1));
      stats.loss_sum[e] += l.loss;
      if (argmax(logits.slice(s)) == labels[static_cast<std::size_t>(s)]) ++stats.correct[e];
      g.slice(s) = l.grad * static_cast<Scalar>(weights[e] / static_cast<double>(n));
    }
    return g;
  };

  if (freeze_backbone) {
    for (std::size_t e = 0; e < m.exits.size(); ++e)
      if (heads[e]) detail::backward_stack(m.exits[e].layers, *heads[e], loss_grads(heads[e]->output, e), grads.exits[e], false);
    return stats;
  }

  Tensor<Scalar> g;
  if (train_final) g = detail::backward_stack(m.classifier, *final_head, loss_grads(final_head->output, n_exits - 1), grads.classifier, true);
  for (std::size_t b = m.blocks.size(); b-- > 0;) {
    for (std::size_t e = m.exits.size(); e-- > 0;) {
      if (m.exits[e].block != static_cast<Index>(b) || !heads[e]) continue;
      Tensor<Scalar> gh = detail::backward_stack(m.exits[e].layers, *heads[e], loss_grads(heads[e]->output, e), grads.exits[e], true);
      if (g.empty())
        g = std::move(gh);
      else
        g.vec() += gh.vec();
    }
    if (g.empty()) continue;  // nothing downstream of this block carries loss
    g = detail::backward_stack(m.blocks[b], blocks[b], std::move(g), grads.blocks[b], b > 0);
  }
  return stats;
}

struct TrainLogRow {
  int epoch = 0;
  Index exit_id = 0;
  double mean_loss = 0.0;
  std::optional<double> accuracy;
};

struct TrainingLog {
  std::vector<TrainLogRow> rows;
  double seconds = 0.0;
  void write_csv(std::ostream& os) const;
  void write_csv(const std::string& path) const;
};

struct GlobalTrainConfig {
  std::vector<double> exit_weights;  // M+1 entries; empty selects the defaults
  int epochs = 10;
  double lr = 0.02;
  double momentum = 0.9;
  std::vector<int> lr_decay_epochs;  // multiply lr by lr_decay at these epochs (1-based)
  double lr_decay = 0.1;
  int batch_size = 32;
  bool freeze_backbone = false;
  std::uint64_t seed = 1;

  void validate(const Model& m) const;
};

/// w_i = cumulative backbone FLOP fraction at exit i; w_{M+1} = 1.
std::vector<double> default_exit_weights(const Model& m);

/// Joint multi-exit training (or exits-only when freeze_backbone is set).
TrainingLog train_global(Model& model, const Dataset& data, const GlobalTrainConfig& cfg);

/// Frozen-backbone personalisation of the early-exit heads. `calib_holdout`
/// (may be empty) is used only to report per-epoch accuracy.
TrainingLog personalise_exits(Model& model, const Dataset& user_data, const Dataset& calib_holdout,
                              const PersonalisationConfig& cfg);

enum class TrainingMode { Full, ExitsOnly };

/// Analytic training cost: forward FLOPs of the required prefix plus 2x
/// forward FLOPs for the backward pass over trained layers. Full mode trains
/// the whole multi-exit model; ExitsOnly trains `exits` (all when empty),
/// running the full forward pass only when a teacher is needed.
std::int64_t training_flops(const Model& model, TrainingMode mode, Index n_samples, const std::vector<Index>& exits = {},
                            bool needs_teacher = false);

/// Accuracy of every exit on labelled data.
std::vector<double> exit_accuracies(const Model& model, const Dataset& data, Index batch_size = 64);

/// Fraction of samples where each exit's top-1 matches the final exit's.
std::vector<double> exit_agreement(const Model& model, const Dataset& data, Index batch_size = 64);

}  // namespace mexit
