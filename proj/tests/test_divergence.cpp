#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "evb/divergence.hpp"
#include "evb/trainer.hpp"
#include "test_util.hpp"

using evb::DiagGaussian;
using evb::FullGaussian;
using evb::Matrix;
using evb::PpcaModel;
using evb::Rng;
using evb::Vec;

namespace {

PpcaModel make_model(std::size_t nx, std::size_t nz, double sigma, std::uint64_t seed,
                     const Vec& scales = {}) {
  Matrix loadings = evb::random_orthonormal(nx, nz, seed);
  for (std::size_t k = 0; k < nz; ++k) {
    const double s = scales.empty() ? std::pow(2.0, -static_cast<double>(k)) : scales[k];
    for (std::size_t i = 0; i < nx; ++i) loadings(i, k) *= s;
  }
  return PpcaModel(std::move(loadings), sigma);
}

}  // namespace

TEST(KlDiagTest, IdenticalIsExactlyZero) {
  const DiagGaussian g(Vec{0.3, -1.2}, Vec{0.7, 2.1});
  EXPECT_EQ(evb::kl_diag(g, g), 0.0);
}

TEST(KlDiagTest, UnitMeanShiftFrozenAgainstQuadrature) {
  // quadrature oracle value for N(1,1) || N(0,1); closed form gives 0.5
  const double oracle = testutil::quad_kl_1d(1.0, 1.0, 0.0, 1.0);
  EXPECT_NEAR(oracle, 0.5, 1e-10);
  const DiagGaussian v(Vec{1.0}, Vec{1.0});
  const DiagGaussian y(Vec{0.0}, Vec{1.0});
  EXPECT_NEAR(evb::kl_diag(v, y), 0.5, 1e-12);
}

TEST(KlDiagTest, VarianceTwoFrozenAgainstQuadrature) {
  // N(0,2) || N(0,1): (1 - log 2)/2 = 0.15342640972002733
  const double oracle = testutil::quad_kl_1d(0.0, 2.0, 0.0, 1.0);
  EXPECT_NEAR(oracle, 0.15342640972002733, 1e-10);
  const DiagGaussian v(Vec{0.0}, Vec{2.0});
  const DiagGaussian y(Vec{0.0}, Vec{1.0});
  EXPECT_NEAR(evb::kl_diag(v, y), 0.15342640972002733, 1e-12);
}

TEST(KlDiagTest, DimensionMismatchThrows) {
  const DiagGaussian a(Vec{0.0}, Vec{1.0});
  const DiagGaussian b(Vec{0.0, 0.0}, Vec{1.0, 1.0});
  EXPECT_THROW(evb::kl_diag(a, b), std::invalid_argument);
}

TEST(KlDiagTest, NonNegativeOnRandomPairs) {
  Rng rng(303);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + (rng.next_u64() % 6);
    EXPECT_GE(evb::kl_diag(testutil::random_diag(n, rng), testutil::random_diag(n, rng)),
              -1e-10);
  }
}

TEST(KlDenseTest, IdenticalIsZero) {
  Rng rng(11);
  const Matrix cov = testutil::random_spd(3, rng);
  const FullGaussian g(testutil::random_vec(3, rng), cov);
  EXPECT_NEAR(evb::kl_dense(g, g), 0.0, 1e-12);
}

TEST(KlDenseTest, OneDimMatchesDiagAndQuadrature) {
  Matrix c2(1, 1), c1(1, 1);
  c2(0, 0) = 2.0;
  c1(0, 0) = 1.0;
  const FullGaussian v(Vec{0.0}, c2);
  const FullGaussian w(Vec{0.0}, c1);
  EXPECT_NEAR(evb::kl_dense(v, w), 0.15342640972002733, 1e-12);
}

TEST(KlDenseTest, CorrelatedTwoDimMatchesMonteCarlo) {
  Matrix cv(2, 2), cw(2, 2);
  cv(0, 0) = 1.3;
  cv(1, 1) = 0.8;
  cv(0, 1) = cv(1, 0) = 0.5;
  cw(0, 0) = 1.0;
  cw(1, 1) = 1.5;
  cw(0, 1) = cw(1, 0) = -0.2;
  const FullGaussian v(Vec{0.4, -0.2}, cv);
  const FullGaussian w(Vec{-0.1, 0.3}, cw);

  Rng rng(777);
  const std::size_t n = 10000000;
  double sum = 0.0, sumsq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec z = v.sample(rng);
    const double f = v.logpdf(z) - w.logpdf(z);
    sum += f;
    sumsq += f * f;
  }
  const double mean = sum / static_cast<double>(n);
  const double se = std::sqrt((sumsq / n - mean * mean) / static_cast<double>(n));
  EXPECT_NEAR(evb::kl_dense(v, w), mean, 3.0 * se);
}

TEST(KlDenseTest, NonSpdCovarianceThrows) {
  Matrix bad(2, 2);
  bad(0, 0) = 1.0;
  bad(1, 1) = -1.0;
  EXPECT_THROW(FullGaussian(Vec{0.0, 0.0}, bad), std::runtime_error);
}

TEST(KlPosteriorSvdTest, SelfDivergenceIsZero) {
  // distinct column norms -> the posterior is diagonal in the latent basis
  const PpcaModel m = make_model(10, 3, 0.25, 42);
  Rng rng(5);
  const Vec x = testutil::random_vec(10, rng);
  const FullGaussian w = m.posterior(x);
  Vec diag(3);
  for (std::size_t k = 0; k < 3; ++k) diag[k] = w.covariance(k, k);
  const DiagGaussian v(w.mean, diag);
  EXPECT_NEAR(evb::kl_to_posterior_svd(v, m, x), 0.0, 1e-10);
}

TEST(KlPosteriorSvdTest, UnitSingularValuesWeightHalf) {
  // lambda_l = 1 for every l: the mean-term weights are all 1/2. With the
  // encoder at the posterior variance and zero mean, and x = sigma * u_1,
  // the divergence reduces to (1/2) * (1/2) = 0.25 exactly.
  const double sigma = 0.3;
  Matrix loadings = evb::random_orthonormal(7, 3, 1001).scaled(sigma);
  const PpcaModel m(loadings, sigma);
  for (double l : m.svd().singular_values) EXPECT_NEAR(l, 1.0, 1e-12);

  Vec x(7);
  for (std::size_t i = 0; i < 7; ++i) x[i] = sigma * m.svd().u(i, 0);
  const DiagGaussian v(Vec(3, 0.0), Vec(3, 0.5));
  EXPECT_NEAR(evb::kl_to_posterior_svd(v, m, x), 0.25, 1e-12);
}

TEST(KlPosteriorSvdTest, MatchesDenseOracle) {
  Rng rng(606);
  for (int t = 0; t < 10; ++t) {
    const std::size_t nx = 8 + (rng.next_u64() % 25);
    const std::size_t nz = 1 + (rng.next_u64() % 5);
    const PpcaModel m = make_model(nx, nz, 0.1 + rng.uniform(), rng.next_u64());
    const DiagGaussian v = testutil::random_diag(nz, rng);
    const Vec x = testutil::random_vec(nx, rng);
    const double fast = evb::kl_to_posterior_svd(v, m, x);
    const double dense = testutil::dense_posterior_kl(v, m, x);
    EXPECT_NEAR(fast, dense, 1e-8 * std::max(1.0, std::abs(dense)));
    EXPECT_GE(fast, -1e-10);
  }
}

TEST(KlPosteriorSvdTest, RankDeficientLoadingsThrow) {
  Matrix loadings(5, 2);
  loadings(0, 0) = 1.0;  // second column zero
  const PpcaModel m(loadings, 0.5);
  const DiagGaussian v(Vec(2, 0.0), Vec(2, 1.0));
  EXPECT_THROW(evb::kl_to_posterior_svd(v, m, Vec(5, 0.1)), std::runtime_error);
}

TEST(KlPosteriorSvdTest, TraceCoefficientsMatchDenseProduct) {
  // sum_l a_l S_l == Tr[(I + Lambda^T Lambda) diag(S)]
  const PpcaModel m = make_model(9, 4, 0.4, 99);
  Rng rng(17);
  Vec s(4);
  for (double& v : s) v = std::exp(rng.normal());
  const auto terms = evb::detail::posterior_kl_terms(Vec(4, 0.0), s, m, Vec(9, 0.0));
  double lhs = 0.0;
  for (std::size_t l = 0; l < 4; ++l) lhs += terms.trace_coeff[l] * s[l];
  const Matrix j = evb::woodbury_latent_inverse(m.loadings().scaled(1.0 / m.sigma()));
  double rhs = 0.0;
  for (std::size_t l = 0; l < 4; ++l) rhs += j(l, l) * s[l];
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(rhs)));
}

TEST(KlPosteriorGapTest, SecondEncoderEqualToFirst) {
  const PpcaModel m = make_model(8, 2, 0.3, 7);
  Rng rng(23);
  const DiagGaussian v = testutil::random_diag(2, rng);
  const Vec x = testutil::random_vec(8, rng);
  EXPECT_EQ(evb::kl_posterior_gap(v, v, m, x), evb::kl_to_posterior_svd(v, m, x));
}

TEST(KlPosteriorGapTest, EncoderAtPosteriorGivesMinusPairTerm) {
  const PpcaModel m = make_model(8, 2, 0.3, 7);
  Rng rng(29);
  const Vec x = testutil::random_vec(8, rng);
  const FullGaussian w = m.posterior(x);
  Vec diag(2);
  for (std::size_t k = 0; k < 2; ++k) diag[k] = w.covariance(k, k);
  const DiagGaussian v(w.mean, diag);
  const DiagGaussian y = testutil::random_diag(2, rng);
  const double gap = evb::kl_posterior_gap(v, y, m, x);
  EXPECT_NEAR(gap, -evb::kl_diag(v, y), 1e-10);
  EXPECT_LE(gap, 1e-10);
}

TEST(KlPosteriorGapTest, MatchesMonteCarloExpectation) {
  const PpcaModel m = make_model(6, 2, 0.5, 911);
  Rng rng(31);
  const DiagGaussian v = testutil::random_diag(2, rng);
  const DiagGaussian y = testutil::random_diag(2, rng);
  const Vec x = testutil::random_vec(6, rng);
  const FullGaussian w = m.posterior(x);

  const std::size_t n = 1000000;
  double sum = 0.0, sumsq = 0.0;
  Rng mc(32);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec z = v.sample(mc);
    const double f = y.logpdf(z) - w.logpdf(z);
    sum += f;
    sumsq += f * f;
  }
  const double mean = sum / static_cast<double>(n);
  const double se = std::sqrt((sumsq / n - mean * mean) / static_cast<double>(n));
  EXPECT_NEAR(evb::kl_posterior_gap(v, y, m, x), mean, 3.0 * se);
}

TEST(JsdTest, RequiresMinimumSamples) {
  const DiagGaussian g(Vec{0.0}, Vec{1.0});
  EXPECT_THROW(evb::jsd_mc(g, g, 99, 1), std::invalid_argument);
}

TEST(JsdTest, IdenticalComponentsNearZero) {
  const DiagGaussian g(Vec{0.2, -0.7}, Vec{1.4, 0.6});
  const auto est = evb::jsd_mc(g, g, 10000, 77);
  EXPECT_NEAR(est.value, 0.0, 3.0 * est.se + 1e-12);
}

TEST(JsdTest, SeparatedComponentsReachLog2) {
  const DiagGaussian a(Vec{0.0}, Vec{1.0});
  const DiagGaussian b(Vec{100.0}, Vec{1.0});
  const auto est = evb::jsd_mc(a, b, 10000, 78);
  EXPECT_NEAR(est.value, std::numbers::ln2, 3.0 * est.se + 1e-12);
}

TEST(JsdTest, SymmetricUnderSwap) {
  const DiagGaussian a(Vec{0.4, 0.0}, Vec{1.0, 2.0});
  const DiagGaussian b(Vec{-0.3, 0.5}, Vec{0.5, 1.0});
  const auto ab = evb::jsd_mc(a, b, 40000, 79);
  const auto ba = evb::jsd_mc(b, a, 40000, 80);
  EXPECT_NEAR(ab.value, ba.value, 3.0 * std::hypot(ab.se, ba.se) + 1e-12);
}

TEST(JsdTest, BoundedByLog2OnRandomPairs) {
  Rng rng(81);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + (rng.next_u64() % 4);
    const auto est =
        evb::jsd_mc(testutil::random_diag(n, rng), testutil::random_diag(n, rng), 4000,
                    rng.next_u64());
    EXPECT_LE(est.value, std::numbers::ln2 + 3.0 * est.se + 1e-12);
    EXPECT_GE(est.value, -3.0 * est.se - 1e-12);
  }
}

TEST(TraceLogdetResidualTest, EqualInputsGiveZero) {
  Rng rng(91);
  const Matrix s = testutil::random_spd(4, rng);
  EXPECT_NEAR(evb::trace_logdet_residual(s, s), 0.0, 1e-10);
}

TEST(TraceLogdetResidualTest, OneDimFrozenValue) {
  Matrix si(1, 1), sj(1, 1);
  si(0, 0) = 2.0;
  sj(0, 0) = 1.0;
  // 2 - 1 - log 2 = 0.3068528194400547
  EXPECT_NEAR(evb::trace_logdet_residual(si, sj), 0.3068528194400547, 1e-12);
}

TEST(TraceLogdetResidualTest, NonNegativeOnRandomPairs) {
  Rng rng(92);
  double worst = 1e300;
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + (rng.next_u64() % 8);
    const double r =
        evb::trace_logdet_residual(testutil::random_spd(n, rng), testutil::random_spd(n, rng));
    worst = std::min(worst, r);
    EXPECT_GE(r, -1e-10);
  }
}

TEST(TraceLogdetResidualTest, TwiceTheZeroMeanDenseKl) {
  Rng rng(93);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + (rng.next_u64() % 5);
    const Matrix si = testutil::random_spd(n, rng);
    const Matrix sj = testutil::random_spd(n, rng);
    const double residual = evb::trace_logdet_residual(si, sj);
    const double kl = evb::kl_dense(FullGaussian(Vec(n, 0.0), si), FullGaussian(Vec(n, 0.0), sj));
    EXPECT_NEAR(residual, 2.0 * kl, 1e-10 * std::max(1.0, residual));
  }
}

TEST(TraceLogdetResidualTest, RejectsIndefiniteInput) {
  Rng rng(94);
  const Matrix good = testutil::random_spd(3, rng);
  Matrix bad = testutil::random_symmetric(3, rng);
  bad(0, 0) = -4.0;
  EXPECT_THROW(evb::trace_logdet_residual(good, bad), std::runtime_error);
  EXPECT_THROW(evb::trace_logdet_residual(bad, good), std::runtime_error);
}
