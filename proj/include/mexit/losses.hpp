#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mexit/layers.hpp"

namespace mexit {

/// Loss value (accumulated in double) and its gradient w.r.t. the student logits.
template <typename Scalar>
struct LossGrad {
  double loss = 0.0;
  Vector<Scalar> grad;
};

namespace detail {

inline Vector<double> log_softmax(const Vector<double>& z) {
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

}  // namespace detail

/// Cross-entropy -log softmax(z)[y].
template <typename Derived>
LossGrad<typename Derived::Scalar> supervised_loss(const Eigen::MatrixBase<Derived>& logits, Index label) {
  using Scalar = typename Derived::Scalar;
  if (label < 0 || label >= logits.size())
    throw ConfigError("label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) + " classes");
  const Vector<double> logp = detail::log_softmax(logits.template cast<double>());
  Vector<double> g = logp.array().exp();
  g[label] -= 1.0;
  return {-logp[label], g.cast<Scalar>()};
}

/// T^2 * KL(softmax(teacher/T) || softmax(student/T)); the teacher is a constant.
template <typename DerivedS, typename DerivedT>
LossGrad<typename DerivedS::Scalar> distill_loss(const Eigen::MatrixBase<DerivedS>& student,
                                                 const Eigen::MatrixBase<DerivedT>& teacher, double temperature) {
  using Scalar = typename DerivedS::Scalar;
  if (!(temperature > 0.0)) throw ConfigError("distillation temperature must be positive");
  if (student.size() != teacher.size()) throw ConfigError("student and teacher logits differ in length");
  const Vector<double> logq = detail::log_softmax(student.template cast<double>() / temperature);
  const Vector<double> logp = detail::log_softmax(teacher.template cast<double>() / temperature);
  const Vector<double> p = logp.array().exp();
  double kl = 0.0;
  for (Index k = 0; k < p.size(); ++k)
    if (p[k] > 0.0) kl += p[k] * (logp[k] - logq[k]);
  kl = std::max(kl, 0.0);
  const Vector<double> g = temperature * (logq.array().exp() - p.array());
  return {temperature * temperature * kl, g.cast<Scalar>()};
}

/// Cross-entropy against the teacher's top-1 class (lowest index on ties).
template <typename DerivedS, typename DerivedT>
LossGrad<typename DerivedS::Scalar> self_superv_loss(const Eigen::MatrixBase<DerivedS>& student,
                                                     const Eigen::MatrixBase<DerivedT>& teacher) {
  if (student.size() != teacher.size()) throw ConfigError("student and teacher logits differ in length");
  return supervised_loss(student, argmax(teacher));
}

/// Weights of the hybrid exit loss plus the optimiser settings used to fit it.
struct PersonalisationConfig {
  double alpha = 0.0;   // supervised
  double beta = 1.0;    // self-distillation
  double gamma = 0.0;   // self-supervision
  double temperature = 4.0;
  int epochs = 10;
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 32;
  std::uint64_t seed = 1;
  std::vector<Index> exits;  // exit ordinals to train; empty means all early exits

  bool needs_labels() const { return alpha > 0.0; }
  bool needs_teacher() const { return beta > 0.0 || gamma > 0.0; }

  void validate() const {
    if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw ConfigError("loss weights must be nonnegative");
    if (alpha > 0.0 && gamma > 0.0)
      throw ConfigError("supervised (alpha) and self-supervised (gamma) terms are mutually exclusive");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  }

  static PersonalisationConfig hard_labels() {
    PersonalisationConfig c;
    c.alpha = 1.0;
    c.beta = 0.0;
    return c;
  }
  static PersonalisationConfig self_distillation() { return {}; }
};

template <typename Scalar>
struct PersonalisationLoss {
  std::vector<double> per_exit;        // exits 1..M
  std::vector<Vector<Scalar>> grads;   // d loss_i / d logits_i
  double total = 0.0;
};

/// Hybrid per-exit loss
///   alpha*[gamma==0]*CE(y) + beta*distill(final, T) + gamma*[alpha==0]*CE(top1(final))
/// for exits 1..M; `exit_logits` holds M+1 vectors, the last being the teacher.
template <typename Scalar>
PersonalisationLoss<Scalar> personalisation_loss(const std::vector<Vector<Scalar>>& exit_logits,
                                                 std::optional<Index> label, const PersonalisationConfig& cfg) {
  cfg.validate();
  if (exit_logits.size() < 2) throw ConfigError("personalisation loss needs at least one early exit and the final exit");
  if (cfg.needs_labels() && !label) throw ConfigError("supervised personalisation (alpha > 0) requires labels");
  const auto& teacher = exit_logits.back();
  const double w_sup = cfg.gamma == 0.0 ? cfg.alpha : 0.0;
  const double w_self = cfg.alpha == 0.0 ? cfg.gamma : 0.0;

  PersonalisationLoss<Scalar> out;
  for (std::size_t i = 0; i + 1 < exit_logits.size(); ++i) {
    const auto& z = exit_logits[i];
    double loss = 0.0;
    Vector<Scalar> g = Vector<Scalar>::Zero(z.size());
    if (w_sup > 0.0) {
      auto l = supervised_loss(z, *label);
      loss += w_sup * l.loss;
      g += static_cast<Scalar>(w_sup) * l.grad;
    }
    if (cfg.beta > 0.0) {
      auto l = distill_loss(z, teacher, cfg.temperature);
      loss += cfg.beta * l.loss;
      g += static_cast<Scalar>(cfg.beta) * l.grad;
    }
    if (w_self > 0.0) {
      auto l = self_superv_loss(z, teacher);
      loss += w_self * l.loss;
      g += static_cast<Scalar>(w_self) * l.grad;
    }
    out.per_exit.push_back(loss);
    out.grads.push_back(std::move(g));
    out.total += loss;
  }
  return out;
}

}  // namespace mexit
