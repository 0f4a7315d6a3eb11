#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mexit/losses.hpp"

using namespace mexit;

namespace {

Vector<double> vec(std::initializer_list<double> v) {
  Vector<double> out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

Vector<double> random_logits(std::mt19937_64& rng, Index k, double scale = 2.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector<double> z(k);
  for (Index i = 0; i < k; ++i) z[i] = normal(rng);
  return z;
}

// KL(p || q) written out term by term
double kl_reference(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

}  // namespace

TEST(SupervisedLoss, PerfectPredictionIsZero) {
  EXPECT_NEAR(supervised_loss(vec({0, 200, 0}), 1).loss, 0.0, 1e-12);
}

TEST(SupervisedLoss, UniformTenClasses) {
  EXPECT_NEAR(supervised_loss(Vector<double>::Zero(10), 4).loss, std::log(10.0), 1e-12);
}

TEST(SupervisedLoss, TwoClassClosedForm) {
  const double expected = -std::log(1.0 / (1.0 + std::exp(1.0)));
  EXPECT_NEAR(supervised_loss(vec({1, 0}), 1).loss, expected, 1e-12);
  EXPECT_NEAR(expected, 1.313262, 1e-6);
}

TEST(SupervisedLoss, LabelOutOfRange) {
  EXPECT_THROW(supervised_loss(vec({1, 0}), 2), ConfigError);
  EXPECT_THROW(supervised_loss(vec({1, 0}), -1), ConfigError);
}

TEST(SupervisedLoss, FloatMatchesDouble) {
  Vector<float> z(3);
  z << 1.5f, -0.5f, 0.25f;
  EXPECT_NEAR(supervised_loss(z, 0).loss, supervised_loss(z.cast<double>().eval(), 0).loss, 1e-6);
}

TEST(DistillLoss, IdenticalIsZero) {
  std::mt19937_64 rng(1);
  const auto z = random_logits(rng, 10);
  EXPECT_NEAR(distill_loss(z, z, 4.0).loss, 0.0, 1e-12);
}

TEST(DistillLoss, HandComputedKl) {
  const double expected = kl_reference({2.0 / 3, 1.0 / 3}, {0.5, 0.5});
  EXPECT_NEAR(distill_loss(vec({0, 0}), vec({std::log(2.0), 0}), 1.0).loss, expected, 1e-12);
  EXPECT_NEAR(expected, 0.056633, 1e-6);
}

TEST(DistillLoss, MatchesTermwiseKlAtSeveralTemperatures) {
  std::mt19937_64 rng(2);
  for (double t : {1.0, 2.0, 4.0}) {
    const auto s = random_logits(rng, 6), te = random_logits(rng, 6);
    const Vector<double> ps = softmax(s, t), pt = softmax(te, t);
    const double kl = kl_reference({pt.data(), pt.data() + 6}, {ps.data(), ps.data() + 6});
    EXPECT_NEAR(distill_loss(s, te, t).loss, t * t * kl, 1e-10);
  }
}

TEST(DistillLoss, GradientStaysOrderOneAcrossTemperatures) {
  std::mt19937_64 rng(3);
  const auto s = random_logits(rng, 10, 3.0), te = random_logits(rng, 10, 3.0);
  std::vector<double> norms, values;
  for (double t : {1.0, 2.0, 4.0}) {
    const auto l = distill_loss(s, te, t);
    norms.push_back(l.grad.norm());
    values.push_back(l.loss);
  }
  EXPECT_NE(values[0], values[1]);
  EXPECT_NE(values[1], values[2]);
  for (double n : norms) {
    EXPECT_GT(n, 0.05);
    EXPECT_LT(n, 5.0);
  }
}

TEST(DistillLoss, Errors) {
  EXPECT_THROW(distill_loss(vec({0, 0}), vec({0, 0}), 0.0), ConfigError);
  EXPECT_THROW(distill_loss(vec({0, 0}), vec({0, 0, 0}), 1.0), ConfigError);
}

TEST(DistillLossProperty, NonNegativeAndZeroOnlyWhenEqual) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto s = random_logits(rng, 5), te = random_logits(rng, 5);
    const double t = 0.5 + 4.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const double l = distill_loss(s, te, t).loss;
    EXPECT_GE(l, 0.0);
    const double gap = (softmax(s, t) - softmax(te, t)).cwiseAbs().maxCoeff();
    if (gap > 1e-3) {
      EXPECT_GT(l, 0.0);
    }
    // shifting the student by a constant leaves the softened distribution unchanged
    EXPECT_NEAR(distill_loss(Vector<double>(s.array() + 3.0), s, t).loss, 0.0, 1e-7);
  }
}

TEST(SelfSupervLoss, UniformStudent) {
  Vector<double> teacher = Vector<double>::Zero(10);
  teacher[3] = 5.0;
  EXPECT_NEAR(self_superv_loss(Vector<double>::Zero(10), teacher).loss, std::log(10.0), 1e-12);
}

TEST(SelfSupervLoss, StudentEqualsTeacher) {
  const auto z = vec({0.5, 4.0, -1.0});
  EXPECT_NEAR(self_superv_loss(z, z).loss, -std::log(softmax(z)[1]), 1e-12);
}

TEST(SelfSupervLoss, OnlyTeacherArgmaxMatters) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = random_logits(rng, 7), te = random_logits(rng, 7);
    Vector<double> moved = te * 3.0;
    moved[argmax(te)] += 1.0;
    EXPECT_EQ(self_superv_loss(s, te).loss, self_superv_loss(s, moved).loss);
  }
}

TEST(SelfSupervLoss, TiesGoToLowestClass) {
  EXPECT_NEAR(self_superv_loss(vec({0, 1, 0}), vec({2, 2, 0})).loss, supervised_loss(vec({0, 1, 0}), 0).loss, 1e-12);
}

class GatingReductions : public ::testing::TestWithParam<int> {};

TEST_P(GatingReductions, MatchClosedForms) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()));
  std::vector<Vector<double>> outs;
  for (int e = 0; e < 4; ++e) outs.push_back(random_logits(rng, 10));
  const Index y = std::uniform_int_distribution<Index>(0, 9)(rng);
  const auto& teacher = outs.back();

  const auto sup = personalisation_loss(outs, y, PersonalisationConfig::hard_labels());
  const auto dist = personalisation_loss(outs, std::nullopt, PersonalisationConfig::self_distillation());
  PersonalisationConfig mixed;
  mixed.alpha = 0.0, mixed.beta = 0.5, mixed.gamma = 1.0;
  const auto mix = personalisation_loss(outs, std::nullopt, mixed);
  PersonalisationConfig sup_dist;
  sup_dist.alpha = 2.0, sup_dist.beta = 0.25;
  const auto sd = personalisation_loss(outs, y, sup_dist);

  double total = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double ce = supervised_loss(outs[i], y).loss;
    const double kd = distill_loss(outs[i], teacher, 4.0).loss;
    const double ss = self_superv_loss(outs[i], teacher).loss;
    EXPECT_NEAR(sup.per_exit[i], ce, 1e-12);
    EXPECT_NEAR(dist.per_exit[i], kd, 1e-12);
    EXPECT_NEAR(mix.per_exit[i], 0.5 * kd + ss, 1e-12);
    EXPECT_NEAR(sd.per_exit[i], 2.0 * ce + 0.25 * kd, 1e-12);
    total += mix.per_exit[i];
  }
  EXPECT_EQ(mix.per_exit.size(), 3u);
  EXPECT_NEAR(mix.total, total, 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Seeds, GatingReductions, ::testing::Range(0, 20));

TEST(PersonalisationLoss, SupervisedWithoutLabelIsConfigError) {
  std::vector<Vector<double>> outs{vec({0, 1}), vec({1, 0})};
  EXPECT_THROW(personalisation_loss(outs, std::nullopt, PersonalisationConfig::hard_labels()), ConfigError);
}

TEST(PersonalisationLoss, AlphaAndGammaTogetherRejected) {
  PersonalisationConfig c;
  c.alpha = 1.0, c.gamma = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  std::vector<Vector<double>> outs{vec({0, 1}), vec({1, 0})};
  EXPECT_THROW(personalisation_loss(outs, Index{0}, c), ConfigError);
}

TEST(PersonalisationLoss, NeedsAnEarlyExit) {
  std::vector<Vector<double>> outs{vec({0, 1})};
  EXPECT_THROW(personalisation_loss(outs, std::nullopt, PersonalisationConfig{}), ConfigError);
}

TEST(PersonalisationLoss, ConfigValidation) {
  auto bad = [](auto mutate) {
    PersonalisationConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](auto& c) { c.beta = -1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.temperature = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.lr = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.momentum = 1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.epochs = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.batch_size = 0; }).validate(), ConfigError);
  EXPECT_NO_THROW(PersonalisationConfig{}.validate());
}

TEST(LossGradients, LogitGradientsMatchCentralDifferences) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = random_logits(rng, 6);
    const auto te = random_logits(rng, 6);
    const Index y = trial % 6;
    const double h = 1e-6;
    const auto ce = supervised_loss(s, y);
    const auto kd = distill_loss(s, te, 2.0);
    for (Index k = 0; k < 6; ++k) {
      Vector<double> up = s, down = s;
      up[k] += h, down[k] -= h;
      const double n_ce = (supervised_loss(up, y).loss - supervised_loss(down, y).loss) / (2 * h);
      const double n_kd = (distill_loss(up, te, 2.0).loss - distill_loss(down, te, 2.0).loss) / (2 * h);
      EXPECT_LT(gradcheck::rel_error(ce.grad[k], n_ce), 1e-5);
      EXPECT_LT(gradcheck::rel_error(kd.grad[k], n_kd), 1e-5);
    }
  }
}

class HeadGradients : public ::testing::TestWithParam<std::tuple<int, int>> {};

TEST_P(HeadGradients, MatchFiniteDifferences) {
  const auto cases = gradcheck::loss_cases();
  const auto& c = cases[static_cast<std::size_t>(std::get<0>(GetParam()))];
  const auto seed = static_cast<std::uint64_t>(std::get<1>(GetParam()));
  EXPECT_LT(gradcheck::personalisation_gradient_error(c.cfg, seed), 1e-3) << c.name;
}

INSTANTIATE_TEST_SUITE_P(LossForms, HeadGradients, ::testing::Combine(::testing::Range(0, 3), ::testing::Range(1, 11)));

class JointGradients : public ::testing::TestWithParam<int> {};

TEST_P(JointGradients, MatchFiniteDifferences) {
  EXPECT_LT(gradcheck::global_gradient_error(static_cast<std::uint64_t>(GetParam())), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Seeds, JointGradients, ::testing::Range(1, 6));
