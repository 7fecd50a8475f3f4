#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "support.hpp"
#include "tes/attacks.hpp"
#include "tes/data.hpp"
#include "tes/models.hpp"

namespace {

using namespace tes;
using namespace tes::attacks;
using models::AdversarialGenerator;
using models::ArchId;
using models::Classifier;

constexpr std::size_t kPixels = data::kSide * data::kSide;

std::vector<double> random_image(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> x(kPixels);
  for (double& v : x) v = u(rng);
  return x;
}

std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t k) {
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<double> p(k);
  double s = 0.0;
  for (double& v : p) s += (v = g(rng));
  for (double& v : p) v /= s;
  return p;
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Small untrained models shared by the search tests.
struct Fixture {
  Classifier source = models::init_classifier(ArchId::ConvA, 10, 1);
  Classifier target = models::init_classifier(ArchId::ConvB, 5, 2);
  AdversarialGenerator generator = models::init_generator(models::GeneratorSpec{}, 3);
  SoftLabelTable table;
  std::vector<double> image;
  std::size_t label = 0;

  Fixture() {
    std::mt19937_64 rng(4);
    for (int k = 0; k < 5; ++k) table.labels.push_back(random_simplex(rng, 10));
    table.counts.assign(5, 1);
    image = random_image(rng);
    label = models::predict_label(target, image);
  }
};

// ---- oracle -------------------------------------------------------------------------

TEST(QueryOracle, CountsEveryCallAndRefusesPastBudget) {
  std::size_t calls = 0;
  QueryOracle oracle(
      [&](std::span<const double>) {
        ++calls;
        return std::vector<double>{0.5, 0.5};
      },
      3);
  std::vector<double> x(kPixels, 0.5);
  for (int i = 0; i < 3; ++i) {
    ASSERT_TRUE(oracle.query(x).has_value());
    EXPECT_EQ(oracle.queries_used(), std::size_t(i + 1));
  }
  EXPECT_FALSE(oracle.query(x).has_value());
  EXPECT_FALSE(oracle.query(x).has_value());
  EXPECT_EQ(oracle.queries_used(), 3u);
  EXPECT_EQ(oracle.refused(), 2u);
  EXPECT_EQ(calls, 3u);
  EXPECT_EQ(oracle.remaining(), 0u);
}

TEST(QueryOracle, ReturnsProbabilitiesOfWrappedModel) {
  Fixture f;
  QueryOracle oracle(f.target, 10);
  const auto scores = oracle.query(f.image);
  ASSERT_TRUE(scores);
  EXPECT_EQ(*scores, models::predict_scores(f.target, f.image));
}

// ---- soft labels --------------------------------------------------------------------

// ConvA whose 2-way logits are [c*S + b, -(c*S + b)] with S the sum of the
// even-position pixels, so constant images give chosen scores exactly.
Classifier linear_probe(double v_hi, double v_lo) {
  Classifier m = models::init_classifier(ArchId::ConvA, 2, 0);
  for (auto& p : m.params.items()) p.value.fill(0.0);
  m.params.at("conv1.weight")[4] = 1.0;  // [0,0,1,1]
  m.params.at("conv2.weight")[4] = 1.0;  // [0,0,1,1]
  auto& fc = m.params.at("fc1.weight");  // [1024,64]
  for (std::size_t i = 0; i < 64; ++i) fc[i * 64] = 1.0;
  // p0 = sigmoid(2(slope * S + offset)); the two images sit at logit gaps +l and -l.
  const double l = std::log(1.5);
  const double s_hi = 64 * v_hi, s_lo = 64 * v_lo;
  const double slope = l / (s_hi - s_lo);
  const double offset = l / 2.0 - slope * s_hi;
  m.params.at("head.weight")[0] = slope;
  m.params.at("head.weight")[1] = -slope;
  m.params.at("head.bias")[0] = offset;
  m.params.at("head.bias")[1] = -offset;
  return m;
}

TEST(SoftLabels, MeanOfTwoSamples) {
  const Classifier m = linear_probe(0.75, 0.25);
  std::vector<double> hi(kPixels, 0.75), lo(kPixels, 0.25);
  const auto s_hi = models::predict_scores(m, hi);
  const auto s_lo = models::predict_scores(m, lo);
  ASSERT_NEAR(s_hi[0], 0.6, 1e-12);
  ASSERT_NEAR(s_lo[0], 0.4, 1e-12);
  data::Dataset d;
  d.class_count = 1;
  d.train = {{hi, 0}, {lo, 0}};
  const auto table = compute_soft_labels(m, d);
  EXPECT_NEAR(table[0][0], 0.5, 1e-12);
  EXPECT_NEAR(table[0][1], 0.5, 1e-12);
  EXPECT_EQ(table.counts[0], 2u);
}

TEST(SoftLabels, RowsSumToOneAndMatchShuffledRecount) {
  auto spec = data::default_target_specs(0)[1];
  spec.train_per_class = 15;
  spec.test_per_class = 2;
  const auto d = data::generate_domain(spec);
  const Classifier m = models::init_classifier(ArchId::ConvA, 10, 8);
  const auto table = compute_soft_labels(m, d);
  ASSERT_EQ(table.target_classes(), 5u);
  ASSERT_EQ(table.source_classes(), 10u);

  std::vector<std::size_t> order(d.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(5));
  std::vector<std::vector<double>> acc(5, std::vector<double>(10, 0.0));
  std::vector<std::size_t> n(5, 0);
  for (std::size_t i : order) {
    const auto p = models::predict_scores(m, d.train[i].pixels);
    for (std::size_t j = 0; j < 10; ++j) acc[d.train[i].label][j] += p[j];
    ++n[d.train[i].label];
  }
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_NEAR(std::accumulate(table[k].begin(), table[k].end(), 0.0), 1.0, 1e-9);
    EXPECT_EQ(table.counts[k], n[k]);
    for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(table[k][j], acc[k][j] / n[k], 1e-12);
  }
}

TEST(SoftLabels, BuiltFromTrainSplitOnly) {
  auto spec = data::default_target_specs(0)[0];
  spec.train_per_class = 5;
  spec.test_per_class = 3;
  auto d = data::generate_domain(spec);
  const Classifier m = models::init_classifier(ArchId::ConvA, 10, 8);
  const auto before = compute_soft_labels(m, d);
  for (auto& s : d.test) std::fill(s.pixels.begin(), s.pixels.end(), 0.0);
  EXPECT_EQ(compute_soft_labels(m, d).labels, before.labels);
}

TEST(SoftLabels, EmptyClassRejected) {
  auto spec = data::default_target_specs(0)[0];
  spec.train_per_class = 2;
  auto d = data::generate_domain(spec);
  d.train.erase(std::remove_if(d.train.begin(), d.train.end(), [](const auto& s) { return s.label == 3; }),
                d.train.end());
  EXPECT_THROW(compute_soft_labels(models::init_classifier(ArchId::ConvA, 10, 1), d), std::invalid_argument);
}

// ---- success predicate and black-box loss ------------------------------------------

TEST(BlackBoxLoss, ConfidentCorrectIsFarFromAdversarial) {
  std::vector<double> s{0.0, 1.0, 0.0};
  const double m = black_box_margin(s, 1, models::AttackMode::untargeted);
  EXPECT_NEAR(m, std::log(1.0) - std::log(1e-12), 1e-9);
  EXPECT_GT(black_box_loss(s, 1, 0.0, models::AttackMode::untargeted), 0.0);
}

TEST(BlackBoxLoss, UniformScoresGiveZero) {
  std::vector<double> s(4, 0.25);
  EXPECT_EQ(black_box_loss(s, 2, 0.3, models::AttackMode::untargeted), 0.0);
  EXPECT_EQ(black_box_loss(s, 2, 0.3, models::AttackMode::targeted), 0.0);
}

TEST(BlackBoxLoss, NegativeMarginIffSuccessOverSimplex) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20000; ++trial) {
    const std::size_t k = 2 + trial % 9;
    const auto s = random_simplex(rng, k);
    const std::size_t y = trial % k;
    for (auto mode : {models::AttackMode::untargeted, models::AttackMode::targeted}) {
      const bool success = is_adversarial(s, y, mode);
      ASSERT_EQ(black_box_margin(s, y, mode) < 0.0, success);
      // A positive floor keeps the sign of the margin.
      ASSERT_EQ(black_box_loss(s, y, 0.5, mode) < 0.0, success);
      ASSERT_GE(black_box_loss(s, y, 0.0, mode), 0.0);
    }
  }
}

TEST(BlackBoxLoss, SuccessPredicate) {
  std::vector<double> s{0.2, 0.5, 0.3};
  EXPECT_TRUE(is_adversarial(s, 0, models::AttackMode::untargeted));
  EXPECT_FALSE(is_adversarial(s, 1, models::AttackMode::untargeted));
  EXPECT_TRUE(is_adversarial(s, 1, models::AttackMode::targeted));
  EXPECT_FALSE(is_adversarial(s, 2, models::AttackMode::targeted));
}

// ---- subspace and sampler ----------------------------------------------------------

TEST(Subspace, NormalizesSimpleGradient) {
  std::vector<double> g(32, 0.0);
  g[0] = 3;
  g[1] = 4;
  const auto u = guided_subspace(g);
  EXPECT_FALSE(u.degenerate);
  EXPECT_DOUBLE_EQ(u.basis[0], 0.6);
  EXPECT_DOUBLE_EQ(u.basis[1], 0.8);
  for (std::size_t i = 2; i < 32; ++i) EXPECT_EQ(u.basis[i], 0.0);
}

TEST(Subspace, UnitNormAndAgreesWithHouseholderQr) {
  std::mt19937_64 rng(22);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> g(32);
    const double scale = std::pow(10.0, trial % 9 - 4);
    for (double& v : g) v = n(rng) * scale;
    const auto u = guided_subspace(g);
    EXPECT_NEAR(norm(u.basis), 1.0, 1e-12);
    Eigen::MatrixXd a = Eigen::Map<Eigen::VectorXd>(g.data(), 32);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::VectorXd q = qr.householderQ() * Eigen::VectorXd::Unit(32, 0);
    if (q.dot(Eigen::Map<Eigen::VectorXd>(g.data(), 32)) < 0) q = -q;
    double dot = 0.0;
    for (std::size_t i = 0; i < 32; ++i) {
      EXPECT_NEAR(u.basis[i], q[i], 1e-12);
      dot += u.basis[i] * g[i];
    }
    EXPECT_GT(dot, 0.0);
  }
}

TEST(Subspace, TinyGradientIsDegenerate) {
  std::vector<double> g(32, 1e-14);
  const auto u = guided_subspace(g);
  EXPECT_TRUE(u.degenerate);
  Rng a(1), b(1);
  Subspace unit{std::vector<double>(32, 0.0), false};
  unit.basis[0] = 1.0;
  // Degenerate sampling is isotropic: identical to alpha = 1.
  EXPECT_EQ(sample_noise(u, 0.3, 1.0, 32, 5, a), sample_noise(unit, 1.0, 1.0, 32, 5, b));
}

/// sigma^2 [(alpha/d) I + (1 - alpha) U U^T].
Eigen::MatrixXd structured_covariance(const std::vector<double>& u, double alpha, double sigma) {
  const std::size_t d = u.size();
  Eigen::Map<const Eigen::VectorXd> uv(u.data(), d);
  Eigen::MatrixXd s = (alpha / d) * Eigen::MatrixXd::Identity(d, d) + (1.0 - alpha) * uv * uv.transpose();
  return sigma * sigma * s;
}

Eigen::MatrixXd empirical_covariance(const std::vector<std::vector<double>>& draws) {
  const std::size_t d = draws.front().size();
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(d, d);
  for (const auto& v : draws) {
    Eigen::Map<const Eigen::VectorXd> x(v.data(), d);
    c.noalias() += x * x.transpose();
  }
  return c / static_cast<double>(draws.size());
}

TEST(Sampler, TraceOfSigmaIsOne) {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double alpha : {0.1, 0.5, 0.75, 1.0})
    for (std::size_t d : {4u, 32u, 256u}) {
      std::vector<double> g(d);
      for (double& v : g) v = n(rng);
      EXPECT_NEAR(structured_covariance(guided_subspace(g).basis, alpha, 1.0).trace(), 1.0, 1e-12);
    }
}

TEST(Sampler, EmpiricalCovarianceMatchesSigma) {
  const std::size_t d = 32;
  std::mt19937_64 rng(24);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> g(d);
  for (double& v : g) v = n(rng);
  const Subspace u = guided_subspace(g);
  for (double alpha : {0.1, 0.5, 0.75, 1.0})
    for (double sigma : {0.1, 1.0}) {
      Rng r(stream_key({25, static_cast<std::uint64_t>(alpha * 100), static_cast<std::uint64_t>(sigma * 10)}));
      const auto draws = sample_noise(u, alpha, sigma, d, 100000, r);
      const Eigen::MatrixXd expect = structured_covariance(u.basis, alpha, sigma);
      const double err = (empirical_covariance(draws) - expect).norm() / expect.norm();
      EXPECT_LT(err, 0.02) << "alpha " << alpha << " sigma " << sigma;
    }
}

TEST(Sampler, NegatedGradientGivesSameDistribution) {
  const std::size_t d = 32;
  std::vector<double> g(d, 0.0);
  g[3] = 1.0;
  g[7] = -2.0;
  std::vector<double> neg = g;
  for (double& v : neg) v = -v;
  Rng a(26), b(26);
  const auto pos_draws = sample_noise(guided_subspace(g), 0.25, 1.0, d, 100000, a);
  const auto neg_draws = sample_noise(guided_subspace(neg), 0.25, 1.0, d, 100000, b);
  const Eigen::MatrixXd expect = structured_covariance(guided_subspace(g).basis, 0.25, 1.0);
  EXPECT_LT((empirical_covariance(neg_draws) - expect).norm() / expect.norm(), 0.02);
  EXPECT_LT((empirical_covariance(pos_draws) - expect).norm() / expect.norm(), 0.02);
}

TEST(Sampler, DeterministicAndFixedConsumption) {
  std::vector<double> g(8, 1.0);
  const auto u = guided_subspace(g);
  Rng a(27), b(27), c(27);
  EXPECT_EQ(sample_noise(u, 0.5, 1.0, 8, 4, a), sample_noise(u, 0.5, 1.0, 8, 4, b));
  sample_noise(u, 0.9, 0.3, 8, 4, c);
  EXPECT_EQ(a(), c());  // same number of draws whatever alpha and sigma are
}

// ---- gradient estimate --------------------------------------------------------------

TEST(Estimator, ConstantLossGivesZero) {
  Rng rng(28);
  std::vector<double> g(16, 1.0);
  const auto noise = sample_noise(guided_subspace(g), 0.5, 1.0, 16, 20, rng);
  std::vector<double> z(16, 0.0);
  const auto est = antithetic_gradient(noise, 1.0, 1.0, [](std::span<const double>) { return 3.0; }, z);
  for (double v : est) EXPECT_EQ(v, 0.0);
}

TEST(Estimator, AntitheticSymmetry) {
  Rng rng(29);
  std::vector<double> g(16, 1.0);
  auto noise = sample_noise(guided_subspace(g), 0.5, 1.0, 16, 20, rng);
  std::vector<double> z(16, 0.1);
  auto loss = [](std::span<const double> p) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::sin(p[i] * (i + 1));
    return s;
  };
  const auto a = antithetic_gradient(noise, 2.0, 1.0, loss, z);
  for (auto& v : noise)
    for (double& x : v) x = -x;
  const auto b = antithetic_gradient(noise, 2.0, 1.0, loss, z);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Estimator, LinearLossExpectationIsTwoBetaSigmaB) {
  const std::size_t d = 32, P = 20, batches = 100000;
  std::mt19937_64 init(30);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> b(d), grad(d);
  for (double& v : b) v = n(init);
  for (double& v : grad) v = n(init);
  const Subspace u = guided_subspace(grad);
  const double alpha = 0.5, sigma = 1.0;
  auto loss = [&](std::span<const double> z) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += b[i] * z[i];
    return s;
  };
  const std::vector<double> z(d, 0.0);
  for (double beta : {1.0, 2.0}) {
    Rng rng(stream_key({31, static_cast<std::uint64_t>(beta)}));
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (std::size_t k = 0; k < batches; ++k) {
      const auto noise = sample_noise(u, alpha, sigma, d, P, rng);
      const auto est = antithetic_gradient(noise, beta, sigma, loss, z);
      mean += Eigen::Map<const Eigen::VectorXd>(est.data(), d);
    }
    mean /= static_cast<double>(batches);
    const Eigen::VectorXd expect =
        2.0 * beta * structured_covariance(u.basis, alpha, 1.0) * Eigen::Map<const Eigen::VectorXd>(b.data(), d);
    EXPECT_LT((mean - expect).norm() / expect.norm(), 0.05) << "beta " << beta;
  }
}

TEST(Estimator, OracleEstimateSpendsExactlyTwoP) {
  Fixture f;
  QueryOracle oracle(f.target, 100);
  Rng rng(32);
  const auto z = f.generator.encode(f.image);
  std::vector<double> g(32, 1.0);
  const auto noise = sample_noise(guided_subspace(g), 0.5, 1.0, 32, 20, rng);
  const auto est = estimate_gradient(oracle, f.generator, f.image, z, noise, 1.0, 1.0, f.label, 0.0,
                                     models::AttackMode::untargeted, false);
  EXPECT_EQ(oracle.queries_used(), 40u);
  EXPECT_EQ(est.gradient.size(), 32u);
  EXPECT_FALSE(est.budget_exhausted);
}

TEST(Estimator, BudgetExhaustionDiscardsPartialEstimate) {
  Fixture f;
  QueryOracle oracle(f.target, 25);
  Rng rng(33);
  const auto z = f.generator.encode(f.image);
  std::vector<double> g(32, 1.0);
  const auto noise = sample_noise(guided_subspace(g), 0.5, 1.0, 32, 20, rng);
  const auto est = estimate_gradient(oracle, f.generator, f.image, z, noise, 1.0, 1.0, f.label, 0.0,
                                     models::AttackMode::untargeted, false);
  EXPECT_TRUE(est.budget_exhausted);
  EXPECT_TRUE(est.gradient.empty());
  EXPECT_LE(oracle.queries_used(), 25u);
}

// ---- surrogate gradient -------------------------------------------------------------

TEST(SurrogateGradient, MatchesFiniteDifferencesOverLatent) {
  Fixture f;
  const auto z = f.generator.encode(f.image);
  const auto& s = f.table[0];
  const auto grad = surrogate_gradient(f.source, f.generator, f.image, z, s);
  auto kl = [&](const std::vector<double>& zz) {
    const auto p = models::predict_scores(f.source, f.generator.decode_perturb(f.image, zz));
    double v = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] > 0) v += s[j] * (std::log(s[j]) - std::log(p[j]));
    return v;
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    auto up = z, down = z;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    const double fd = (kl(up) - kl(down)) / 2e-5;
    worst = std::max(worst, tes::testing::relative_error(grad[i], fd));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(SurrogateGradient, ZeroAtKlMinimum) {
  Fixture f;
  const auto z = f.generator.encode(f.image);
  const auto p = models::predict_scores(f.source, f.generator.decode_perturb(f.image, z));
  const auto grad = surrogate_gradient(f.source, f.generator, f.image, z, p);
  EXPECT_LT(norm(grad), 1e-12);
}

TEST(SurrogateGradient, DirectionStableUnderSmallEpsilon) {
  Fixture f;
  // Shrink the decoder so tanh stays in its linear regime.
  for (auto& p : f.generator.params.items())
    if (p.name.starts_with("dec."))
      for (double& v : p.value.data()) v *= 0.05;
  std::vector<double> x(kPixels, 0.5);
  std::mt19937_64 rng(34);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> z(32);
  for (double& v : z) v = n(rng);
  auto direction = [&](double eps) {
    AdversarialGenerator g = f.generator;
    g.spec.epsilon = eps;
    auto grad = surrogate_gradient(f.source, g, x, z, f.table[1]);
    const double nn = norm(grad);
    for (double& v : grad) v /= nn;
    return grad;
  };
  const auto a = direction(1e-3), b = direction(2e-3);
  double cos = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) cos += a[i] * b[i];
  EXPECT_LT(std::acos(std::min(1.0, cos)), 1e-3);
}

TEST(SurrogateGradient, KlOrderSwitchChangesObjective) {
  Fixture f;
  const auto z = f.generator.encode(f.image);
  const auto a = surrogate_gradient(f.source, f.generator, f.image, z, f.table[0], KlOrder::soft_label_first);
  const auto b = surrogate_gradient(f.source, f.generator, f.image, z, f.table[0], KlOrder::prediction_first);
  EXPECT_NE(a, b);
}

// ---- attacks ------------------------------------------------------------------------

AttackConfig small_config() {
  AttackConfig c;
  c.budget = 300;
  c.population = 5;
  c.seed = 7;
  return c;
}

void expect_accounting(const AttackResult& r, const AttackConfig& c) {
  const std::size_t per = 2 * c.population + 1;
  EXPECT_LE(r.queries_used, c.budget);
  ASSERT_FALSE(r.trace.empty());
  EXPECT_EQ(r.trace.back().queries, r.queries_used);
  if (r.exit == ExitKind::probe) {
    const std::size_t j = (r.queries_used - 1) % per;
    EXPECT_GE(j, 1u);
    EXPECT_LE(j, 2 * c.population);
  } else {
    EXPECT_EQ(r.queries_used % per, 1u);
  }
  for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_GT(r.trace[i].queries, r.trace[i - 1].queries);
}

TEST(Tes, InitialSuccessCostsOneQuery) {
  Fixture f;
  QueryOracle oracle([&](std::span<const double>) { return std::vector<double>{0.1, 0.9}; }, 100);
  const auto r = tes_attack(f.source, f.generator, f.table, oracle, f.image, 0, small_config());
  EXPECT_TRUE(r.success);
  EXPECT_EQ(r.queries_used, 1u);
  EXPECT_EQ(r.exit, ExitKind::initial_check);
  EXPECT_EQ(r.adversarial_image, ag_attack(f.generator, f.image));
}

TEST(Tes, BudgetExitAccounting) {
  Fixture f;
  // Never fooled: the true class always dominates.
  QueryOracle oracle([&](std::span<const double>) { return std::vector<double>{0.9, 0.05, 0.05}; }, 300);
  const auto c = small_config();
  const auto r = tes_attack(f.source, f.generator, f.table, oracle, f.image, 0, c);
  EXPECT_FALSE(r.success);
  EXPECT_EQ(r.exit, ExitKind::budget);
  EXPECT_FALSE(r.failure_reason.empty());
  EXPECT_EQ(r.queries_used, 1 + (300 - 1) / 11 * 11);
  EXPECT_EQ(r.iterations, (300 - 1) / 11);
  expect_accounting(r, c);
}

TEST(Tes, AccountingOnRealTarget) {
  Fixture f;
  std::mt19937_64 rng(35);
  for (int i = 0; i < 10; ++i) {
    const auto x = random_image(rng);
    const std::size_t y = models::predict_label(f.target, x);
    for (bool probe_stop : {true, false}) {
      AttackConfig c = small_config();
      c.seed = i;
      c.stop_on_probe_success = probe_stop;
      QueryOracle oracle(f.target, c.budget);
      const auto r = tes_attack(f.source, f.generator, f.table, oracle, x, y, c);
      EXPECT_EQ(r.queries_used, oracle.queries_used());
      expect_accounting(r, c);
      if (!probe_stop) {
        EXPECT_NE(r.exit, ExitKind::probe);
      }
      if (r.success) {
        EXPECT_NE(models::predict_label(f.target, r.adversarial_image), y);
      }
      for (std::size_t p = 0; p < kPixels; ++p)
        ASSERT_LE(std::abs(r.adversarial_image[p] - x[p]), c.epsilon);
    }
  }
}

TEST(Tes, OracleSeesOnlyCandidateImages) {
  Fixture f;
  const AttackConfig c = small_config();
  std::size_t calls = 0;
  bool ok = true;
  QueryOracle oracle(
      [&](std::span<const double> img) {
        ++calls;
        if (img.size() != kPixels) ok = false;
        for (std::size_t p = 0; p < img.size(); ++p)
          if (img[p] < 0.0 || img[p] > 1.0 || std::abs(img[p] - f.image[p]) > c.epsilon) ok = false;
        return models::predict_scores(f.target, img);
      },
      c.budget);
  const auto r = tes_attack(f.source, f.generator, f.table, oracle, f.image, f.label, c);
  EXPECT_TRUE(ok);
  EXPECT_EQ(calls, r.queries_used);
}

TEST(Tes, AlphaOneTraceEqualsTremba) {
  Fixture f;
  std::mt19937_64 rng(36);
  for (int i = 0; i < 5; ++i) {
    const auto x = random_image(rng);
    const std::size_t y = models::predict_label(f.target, x);
    AttackConfig c = small_config();
    c.alpha = 1.0;
    c.seed = 100 + i;
    QueryOracle a(f.target, c.budget), b(f.target, c.budget);
    const auto ra = tes_attack(f.source, f.generator, f.table, a, x, y, c);
    const auto rb = tremba_attack(f.generator, b, x, y, c);
    EXPECT_EQ(ra.trace, rb.trace);
    EXPECT_EQ(ra.adversarial_image, rb.adversarial_image);
    EXPECT_EQ(ra.queries_used, rb.queries_used);
  }
}

TEST(Tes, TargetedUsesTargetSoftLabel) {
  SoftLabelTable t;
  t.labels = {{1.0, 0.0}, {0.0, 1.0}};
  AttackConfig c;
  c.mode = models::AttackMode::targeted;
  c.target_class = 1;
  EXPECT_EQ(&guiding_soft_label(t, 0, c), &t.labels[1]);
  c.targeted_uses_target_soft_label = false;
  EXPECT_EQ(&guiding_soft_label(t, 0, c), &t.labels[0]);
  c.mode = models::AttackMode::untargeted;
  EXPECT_EQ(&guiding_soft_label(t, 0, c), &t.labels[0]);
}

TEST(InputSpace, NeverTouchesGenerator) {
  Fixture f;
  const std::size_t enc = AdversarialGenerator::encode_calls();
  const std::size_t dec = AdversarialGenerator::decode_calls();
  AttackConfig c = small_config();
  QueryOracle oracle(f.target, c.budget);
  const auto r = input_space_attack(f.source, f.table, oracle, f.image, f.label, c);
  EXPECT_EQ(AdversarialGenerator::encode_calls(), enc);
  EXPECT_EQ(AdversarialGenerator::decode_calls(), dec);
  expect_accounting(r, c);
  for (std::size_t p = 0; p < kPixels; ++p) ASSERT_LE(std::abs(r.adversarial_image[p] - f.image[p]), c.epsilon);
}

TEST(InputSpace, StartsAtCleanImage) {
  Fixture f;
  InputSpace space(f.image, 8.0 / 255.0, &f.source, f.table[0], KlOrder::soft_label_first);
  EXPECT_EQ(space.dim(), kPixels);
  EXPECT_EQ(space.image(space.initial()), f.image);
}

TEST(Config, Validation) {
  AttackConfig c;
  EXPECT_NO_THROW(c.validate());
  c.population = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AttackConfig{};
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AttackConfig{};
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

// ---- transfer baselines -------------------------------------------------------------

TEST(Transfer, FgsmAndPgdStayInBall) {
  Fixture f;
  std::mt19937_64 rng(37);
  AttackConfig c;
  for (int i = 0; i < 20; ++i) {
    const auto x = random_image(rng);
    for (auto mode : {models::AttackMode::untargeted, models::AttackMode::targeted}) {
      c.mode = mode;
      c.target_class = 2;
      for (const auto& adv : {fgsm_attack(f.source, f.table, x, 1, c), pgd_attack(f.source, f.table, x, 1, c)})
        for (std::size_t p = 0; p < kPixels; ++p) {
          ASSERT_LE(std::abs(adv[p] - x[p]), c.epsilon);
          ASSERT_GE(adv[p], 0.0);
          ASSERT_LE(adv[p], 1.0);
        }
    }
  }
}

TEST(Transfer, FgsmMovesByEpsilonSigns) {
  Fixture f;
  const auto x = f.image;
  AttackConfig c;
  const auto adv = fgsm_attack(f.source, f.table, x, 1, c);
  const auto g = input_gradient(f.source, x, f.table[1]);
  for (std::size_t p = 0; p < kPixels; ++p) {
    if (g[p] == 0.0) continue;
    const double expect = std::clamp(x[p] + c.epsilon * (g[p] > 0 ? 1.0 : -1.0), 0.0, 1.0);
    EXPECT_NEAR(adv[p], expect, 1e-15);
  }
}

TEST(Transfer, AgMatchesGenerator) {
  Fixture f;
  EXPECT_EQ(ag_attack(f.generator, f.image), f.generator.generate(f.image));
}

}  // namespace
