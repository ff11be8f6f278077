#pragma once

// Self-contained property suites: oracle agreement for the SVD-path
// divergence, the Woodbury identity, trace+log-det positivity, gradient
// fidelity against central finite differences, Monte Carlo JSD sanity, the
// noiseless posterior limit and the second-order collapse of the divergence.
// The CLI `check` subcommand prints one line per suite; the acceptance tests
// assert the same numbers.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "evb/divergence.hpp"
#include "evb/linalg.hpp"
#include "evb/nets.hpp"
#include "evb/objectives.hpp"
#include "evb/ppca.hpp"
#include "evb/rng.hpp"
#include "evb/trainer.hpp"

namespace evb::check {

struct SuiteResult {
  std::string name;
  std::size_t trials = 0;
  std::size_t failures = 0;
  double worst = 0.0;  // suite-specific extreme (see summary)
  double elapsed_s = 0.0;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Random model with orthonormal loading directions and a decaying spectrum.
inline PpcaModel random_model(std::size_t n_x, std::size_t n_z, double sigma, Rng& rng) {
  Matrix loadings = random_orthonormal(n_x, n_z, rng.next_u64());
  for (std::size_t k = 0; k < n_z; ++k) {
    const double scale = std::pow(2.0, -static_cast<double>(k)) * (0.5 + rng.uniform());
    for (std::size_t i = 0; i < n_x; ++i) loadings(i, k) *= scale;
  }
  return PpcaModel(std::move(loadings), sigma);
}

// Dense route for D[v || posterior(x)]: explicit beta and I - beta C through
// an n_x-sized inversion, then the generic Gaussian-Gaussian closed form.
inline double dense_posterior_kl(const DiagGaussian& v, const PpcaModel& m,
                                 std::span<const double> x) {
  const Matrix& c = m.loadings();
  const std::size_t nx = m.n_x(), nz = m.n_z();
  Matrix big(nx, nx);
  for (std::size_t i = 0; i < nx; ++i) {
    for (std::size_t j = 0; j < nx; ++j) {
      double s = i == j ? m.sigma() * m.sigma() : 0.0;
      for (std::size_t k = 0; k < nz; ++k) s += c(i, k) * c(j, k);
      big(i, j) = s;
    }
  }
  const Matrix big_inv = chol_inverse(big);
  const Matrix beta = c.transpose() * big_inv;  // n_z x n_x
  Matrix cov = Matrix::identity(nz) - beta * c;
  for (std::size_t i = 0; i < nz; ++i)
    for (std::size_t j = i + 1; j < nz; ++j) {
      const double a = 0.5 * (cov(i, j) + cov(j, i));
      cov(i, j) = a;
      cov(j, i) = a;
    }
  return kl_dense(FullGaussian::from_diag(v), FullGaussian(mat_vec(beta, x), std::move(cov)));
}

inline Matrix random_spd(std::size_t n, Rng& rng) {
  const Matrix q = random_orthonormal(n, n, rng.next_u64());
  Matrix a(n, n);
  Vec eig(n);
  for (double& e : eig) e = std::exp(2.5 * (2.0 * rng.uniform() - 1.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += q(i, k) * eig[k] * q(j, k);
      a(i, j) = s;
      a(j, i) = s;
    }
  return a;
}

}  // namespace detail

// SVD-path divergence vs the dense oracle over random instances.
inline SuiteResult svd_divergence_suite(std::size_t trials, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = "svd-divergence-vs-dense";
  Rng rng(seed);
  const std::array<std::size_t, 3> nxs{8, 16, 32};
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t nx = nxs[t % nxs.size()];
    const std::size_t nz = 1 + (rng.next_u64() % 8);
    const double sigma = 0.05 * std::pow(2.0 / 0.05, rng.uniform());  // [0.05, 2]
    const PpcaModel model = detail::random_model(nx, nz, sigma, rng);
    Vec mean(nz), var(nz), x(nx);
    for (double& m : mean) m = rng.normal();
    for (double& v : var) v = std::exp(0.8 * rng.normal());
    for (double& xi : x) xi = 1.5 * rng.normal();
    const DiagGaussian v(mean, var);
    const double fast = kl_to_posterior_svd(v, model, x);
    const double dense = detail::dense_posterior_kl(v, model, x);
    const double rel = std::abs(fast - dense) / std::max(std::abs(dense), 1e-300);
    r.worst = std::max(r.worst, rel);
    if (!(rel <= 1e-8)) ++r.failures;
    ++r.trials;
  }
  r.elapsed_s = detail::elapsed_since(t0);
  r.pass = r.failures == 0;
  r.detail = "max rel err " + std::to_string(r.worst);
  return r;
}

// trace+log-det residual is non-negative for random SPD pairs.
inline SuiteResult positivity_suite(std::size_t trials, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = "positivity-residual";
  r.worst = std::numeric_limits<double>::infinity();
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = 1 + (rng.next_u64() % 8);
    const double resid =
        trace_logdet_residual(detail::random_spd(n, rng), detail::random_spd(n, rng));
    r.worst = std::min(r.worst, resid);
    if (!(resid >= -1e-10)) ++r.failures;
    ++r.trials;
  }
  r.elapsed_s = detail::elapsed_since(t0);
  r.pass = r.failures == 0;
  r.detail = "min residual " + std::to_string(r.worst);
  return r;
}

// I + Lambda^T Lambda vs the dense [I - Lambda^T (I + Lambda Lambda^T)^{-1} Lambda]^{-1}.
inline SuiteResult woodbury_suite(std::size_t trials, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = "woodbury-latent-inverse";
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t nx = 2 + (rng.next_u64() % 15);
    const std::size_t nz = 1 + (rng.next_u64() % nx);
    Matrix lambda(nx, nz);
    for (std::size_t i = 0; i < nx; ++i)
      for (std::size_t j = 0; j < nz; ++j) lambda(i, j) = 2.0 * rng.normal();
    const Matrix fast = woodbury_latent_inverse(lambda);

    Matrix big = Matrix::identity(nx);
    for (std::size_t i = 0; i < nx; ++i)
      for (std::size_t j = 0; j < nx; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < nz; ++k) s += lambda(i, k) * lambda(j, k);
        big(i, j) += s;
      }
    const Matrix small = Matrix::identity(nz) - lambda.transpose() * chol_inverse(big) * lambda;
    Matrix sym = small;
    for (std::size_t i = 0; i < nz; ++i)
      for (std::size_t j = i + 1; j < nz; ++j) {
        const double a = 0.5 * (sym(i, j) + sym(j, i));
        sym(i, j) = a;
        sym(j, i) = a;
      }
    const Matrix dense = chol_inverse(sym);
    const double rel = (fast - dense).frobenius() / std::max(dense.frobenius(), 1e-300);
    r.worst = std::max(r.worst, rel);
    if (!(rel <= 1e-8)) ++r.failures;
    ++r.trials;
  }
  r.elapsed_s = detail::elapsed_since(t0);
  r.pass = r.failures == 0;
  r.detail = "max rel frobenius " + std::to_string(r.worst);
  return r;
}

struct GradientCheck {
  ObjectiveKind objective;
  std::size_t coords = 0;
  double frac_within_1e4 = 0.0;
  double worst = 0.0;
  bool pass = false;
};

// Central finite differences (h = 1e-5) against the tape gradients for each
// objective on a tiny instance.
inline std::vector<GradientCheck> gradient_suite(std::uint64_t seed) {
  const std::size_t nx = 6, nz = 2, hidden = 8, batch = 4, mc = 3;
  const double h = 1e-5;

  auto [data, model] = generate_synthetic(nx, nz, 0.3, batch, Rng::derive(seed, 7));
  Batch xs;
  for (std::size_t i = 0; i < data.n_rows; ++i) {
    const auto row = data.row(i);
    xs.emplace_back(row.begin(), row.end());
  }

  std::vector<GradientCheck> out;
  const std::vector<ObjectiveKind> kinds{ObjectiveKind::Elbo, ObjectiveKind::AnchoredElbo,
                                         ObjectiveKind::Eubo, ObjectiveKind::TwinElbo,
                                         ObjectiveKind::JsdEubo};
  for (ObjectiveKind kind : kinds) {
    MlpGaussianNet enc = MlpGaussianNet::glorot({nx, hidden, 2 * nz}, Rng::derive(seed, 1));
    MlpGaussianNet aux = MlpGaussianNet::glorot({nx, hidden, 2 * nz}, Rng::derive(seed, 2));
    MlpGaussianNet dec = MlpGaussianNet::glorot({nz, hidden, 2 * nx}, Rng::derive(seed, 3));
    MlpGaussianNet dec_aux = MlpGaussianNet::glorot({nz, hidden, 2 * nx}, Rng::derive(seed, 4));

    NetSet nets;
    nets.enc = &enc;
    nets.dec = &dec;
    if (kind != ObjectiveKind::Elbo) nets.aux = &aux;
    if (kind == ObjectiveKind::JsdEubo) nets.dec_aux = &dec_aux;
    const PpcaModel* anchor = kind == ObjectiveKind::AnchoredElbo ? &model : nullptr;

    const auto res = evaluate_objective(kind, nets, anchor, xs, mc, seed, true);

    std::vector<std::pair<MlpGaussianNet*, const Vec*>> groups;
    groups.emplace_back(&enc, &res.enc_grad);
    if (nets.aux) groups.emplace_back(&aux, &res.aux_grad);
    groups.emplace_back(&dec, &res.dec_grad);
    if (nets.dec_aux) groups.emplace_back(&dec_aux, &res.dec_aux_grad);

    GradientCheck gc;
    gc.objective = kind;
    std::size_t within = 0;
    for (auto& [net, grad] : groups) {
      for (std::size_t i = 0; i < net->params.size(); ++i) {
        const double orig = net->params[i];
        net->params[i] = orig + h;
        const double fp = evaluate_objective(kind, nets, anchor, xs, mc, seed).est.value;
        net->params[i] = orig - h;
        const double fm = evaluate_objective(kind, nets, anchor, xs, mc, seed).est.value;
        net->params[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double a = (*grad)[i];
        const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6});
        gc.worst = std::max(gc.worst, rel);
        if (rel <= 1e-4) ++within;
        ++gc.coords;
      }
    }
    gc.frac_within_1e4 = static_cast<double>(within) / static_cast<double>(gc.coords);
    gc.pass = gc.frac_within_1e4 >= 0.95 && gc.worst <= 1e-2;
    out.push_back(gc);
  }
  return out;
}

// jsd_mc: zero at u = v, log 2 for far-separated components, symmetric in
// its arguments, and the tied jsd-eubo matches the tied eubo.
inline SuiteResult jsd_suite(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = "jsd-sanity";
  r.trials = 4;

  const DiagGaussian a(Vec{0.3, -0.2}, Vec{1.0, 0.5});
  const DiagGaussian b(Vec{-0.4, 0.1}, Vec{0.7, 1.3});
  const DiagGaussian far(Vec{100.0, -100.0}, Vec{1.0, 1.0});

  const auto same = jsd_mc(a, a, 20000, Rng::derive(seed, 1));
  if (!(std::abs(same.value) <= 3.0 * same.se + 1e-9)) ++r.failures;

  const auto sep = jsd_mc(a, far, 20000, Rng::derive(seed, 2));
  if (!(std::abs(sep.value - std::numbers::ln2) <= 3.0 * sep.se + 1e-9)) ++r.failures;

  const auto ab = jsd_mc(a, b, 40000, Rng::derive(seed, 3));
  const auto ba = jsd_mc(b, a, 40000, Rng::derive(seed, 4));
  const double comb = std::sqrt(ab.se * ab.se + ba.se * ba.se);
  if (!(std::abs(ab.value - ba.value) <= 3.0 * comb + 1e-9)) ++r.failures;

  // Tied parameters: the symmetric upper bound collapses onto the eubo case.
  const std::size_t nx = 5, nz = 2;
  MlpGaussianNet enc = MlpGaussianNet::glorot({nx, 8, 2 * nz}, Rng::derive(seed, 11));
  MlpGaussianNet dec = MlpGaussianNet::glorot({nz, 8, 2 * nx}, Rng::derive(seed, 12));
  Rng rng(Rng::derive(seed, 13));
  Batch xs;
  for (int i = 0; i < 16; ++i) {
    Vec x(nx);
    for (double& v : x) v = rng.normal();
    xs.push_back(std::move(x));
  }
  NetSet tied_j;
  tied_j.enc = &enc;
  tied_j.aux = &enc;
  tied_j.dec = &dec;
  tied_j.dec_aux = &dec;
  NetSet tied_e = tied_j;
  tied_e.dec_aux = nullptr;
  const auto ju = evaluate_objective(ObjectiveKind::JsdEubo, tied_j, nullptr, xs, 128,
                                     Rng::derive(seed, 14));
  const auto eu = evaluate_objective(ObjectiveKind::Eubo, tied_e, nullptr, xs, 128,
                                     Rng::derive(seed, 14));
  const double tol = 3.0 * std::sqrt(ju.mc_se * ju.mc_se + eu.mc_se * eu.mc_se) + 1e-9;
  const double diff = std::abs(ju.est.value - eu.est.value);
  if (!(diff <= tol)) ++r.failures;

  r.worst = diff;
  r.elapsed_s = detail::elapsed_since(t0);
  r.pass = r.failures == 0;
  r.detail = "tied jsd-eubo vs eubo gap " + std::to_string(diff);
  return r;
}

// sigma -> 0: posterior mean approaches the pseudo-inverse projection and
// the posterior covariance trace vanishes.
inline SuiteResult noiseless_suite(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = "noiseless-limit";
  Rng rng(seed);
  const std::size_t nx = 12, nz = 3;
  Matrix loadings = random_orthonormal(nx, nz, rng.next_u64());
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t i = 0; i < nx; ++i) loadings(i, k) *= std::pow(2.0, -static_cast<double>(k));

  const PpcaModel tight(loadings, 1e-6);
  const PpcaModel wide(loadings, 1.0);
  for (std::size_t t = 0; t < 20; ++t) {
    Vec x(nx);
    for (double& v : x) v = rng.normal();
    const FullGaussian post = tight.posterior(x);
    const Vec direct = tight.noiseless_posterior(x);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < nz; ++k) {
      num += (post.mean[k] - direct[k]) * (post.mean[k] - direct[k]);
      den += direct[k] * direct[k];
    }
    const double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
    double tr_tight = 0.0, tr_wide = 0.0;
    const FullGaussian post_wide = wide.posterior(x);
    for (std::size_t k = 0; k < nz; ++k) {
      tr_tight += post.covariance(k, k);
      tr_wide += post_wide.covariance(k, k);
    }
    const double tr_rel = tr_tight / tr_wide;
    r.worst = std::max(r.worst, std::max(rel / 1e-4, tr_rel / 1e-6));
    if (!(rel <= 1e-4) || !(tr_rel <= 1e-6)) ++r.failures;
    ++r.trials;
  }
  r.elapsed_s = detail::elapsed_since(t0);
  r.pass = r.failures == 0;
  r.detail = "worst margin ratio " + std::to_string(r.worst);
  return r;
}

struct SecondOrderResult {
  std::array<double, 3> eps{0.04, 0.02, 0.01};
  std::array<double, 3> diffs{};
  std::array<double, 2> factors{};
};

// |D - D^(2)| under a mean perturbation of size eps, and the shrink factor
// per halving.
inline SecondOrderResult second_order_suite() {
  SecondOrderResult r;
  const DiagGaussian v(Vec{0.0}, Vec{1.0});
  for (std::size_t i = 0; i < r.eps.size(); ++i) {
    const DiagGaussian y(Vec{r.eps[i]}, Vec{1.0});
    const SecondOrderGap gap = second_order_gap(v, y);
    r.diffs[i] = std::abs(gap.exact - gap.quadratic);
  }
  r.factors[0] = r.diffs[0] / r.diffs[1];
  r.factors[1] = r.diffs[1] / r.diffs[2];
  return r;
}

inline std::vector<SuiteResult> run_all(std::size_t trials, std::uint64_t seed) {
  std::vector<SuiteResult> out;
  out.push_back(svd_divergence_suite(trials, Rng::derive(seed, 0x51)));
  out.push_back(positivity_suite(std::max<std::size_t>(trials * 10, 1000), Rng::derive(seed, 0x52)));
  out.push_back(woodbury_suite(trials, Rng::derive(seed, 0x53)));

  SuiteResult grad;
  grad.name = "gradient-fidelity";
  grad.pass = true;
  {
    const auto t0 = std::chrono::steady_clock::now();
    for (const GradientCheck& gc : gradient_suite(Rng::derive(seed, 0x54))) {
      ++grad.trials;
      if (!gc.pass) ++grad.failures;
      grad.worst = std::max(grad.worst, gc.worst);
    }
    grad.pass = grad.failures == 0;
    grad.elapsed_s = detail::elapsed_since(t0);
    grad.detail = "worst rel err " + std::to_string(grad.worst);
  }
  out.push_back(grad);

  out.push_back(jsd_suite(Rng::derive(seed, 0x55)));
  out.push_back(noiseless_suite(Rng::derive(seed, 0x56)));

  SuiteResult so;
  so.name = "second-order-collapse";
  {
    const auto t0 = std::chrono::steady_clock::now();
    const SecondOrderResult res = second_order_suite();
    so.trials = res.factors.size();
    for (double f : res.factors) {
      so.worst = std::max(so.worst, f);
      // Super-quadratic decay. Mean-only perturbations are quartic with a
      // small positive correction, factor 16*(1 + eps^2/4), hence the slack
      // above 16.
      if (!(f >= 4.0 && f <= 16.5)) ++so.failures;
    }
    so.pass = so.failures == 0;
    so.elapsed_s = detail::elapsed_since(t0);
    so.detail = "factors " + std::to_string(res.factors[0]) + ", " + std::to_string(res.factors[1]);
  }
  out.push_back(so);
  return out;
}

}  // namespace evb::check
