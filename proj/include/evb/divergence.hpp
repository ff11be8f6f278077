#pragma once

// Divergences between the Gaussian families used throughout: the diagonal
// closed form, the dense generic form (which doubles as the oracle for the
// SVD-reduced path), the divergence from a diagonal encoder to the exact
// P-PCA posterior evaluated purely through the SVD of Lambda = C/sigma, a
// Monte Carlo Jensen-Shannon estimator, and the trace+log-det residual that
// certifies positivity.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "evb/gaussian.hpp"
#include "evb/linalg.hpp"
#include "evb/matrix.hpp"
#include "evb/ppca.hpp"
#include "evb/rng.hpp"

namespace evb {

// Sum over coordinates of
//   (1/2) { log(Vy/Vv) + Vv/Vy - 1 + (My - Mv)^2 / Vy }.
inline double kl_diag(const DiagGaussian& v, const DiagGaussian& y) {
  if (v.dim() != y.dim()) throw std::invalid_argument("kl_diag: dimension mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < v.dim(); ++k) {
    const double dm = y.mean[k] - v.mean[k];
    s += std::log(y.variance[k] / v.variance[k]) + v.variance[k] / y.variance[k] - 1.0 +
         dm * dm / y.variance[k];
  }
  return 0.5 * s;
}

// Standard closed form
//   (1/2) { log|Sw|/|Sv| + Tr(Sw^{-1} Sv) - N + (mw-mv)^T Sw^{-1} (mw-mv) }.
inline double kl_dense(const FullGaussian& v, const FullGaussian& w) {
  if (v.dim() != w.dim()) throw std::invalid_argument("kl_dense: dimension mismatch");
  const std::size_t n = v.dim();
  double trace = 0.0;
  Vec col(n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = v.covariance(i, j);
    const Vec sol = chol_solve(w.chol, col);
    trace += sol[j];
  }
  Vec d(n);
  for (std::size_t k = 0; k < n; ++k) d[k] = v.mean[k] - w.mean[k];
  const Vec sol = chol_solve(w.chol, d);
  return 0.5 * (chol_logdet(w.chol) - chol_logdet(v.chol) + trace -
                static_cast<double>(n) + dot(d, sol));
}

namespace detail {

// Intermediates of the SVD-path divergence; shared with the reverse-mode
// node so value and gradient stay in lockstep.
struct PosteriorKlTerms {
  Vec trace_coeff;  // a_l = sum_j (1 + lambda_j^2) V_lj^2
  Vec h;            // h_l = lambda_l^2 / (1 + lambda_l^2)
  Vec proj;         // t_l = <u_l, xbar - mubar>
  double value = 0.0;
};

inline PosteriorKlTerms posterior_kl_terms(std::span<const double> mean,
                                           std::span<const double> variance,
                                           const PpcaModel& model,
                                           std::span<const double> x) {
  const std::size_t nz = model.n_z();
  if (mean.size() != nz || variance.size() != nz)
    throw std::invalid_argument("kl_to_posterior_svd: encoder dimension mismatch");
  if (x.size() != model.n_x())
    throw std::invalid_argument("kl_to_posterior_svd: x dimension mismatch");
  const ThinSvd& svd = model.svd();
  const Vec& lam = svd.singular_values;

  double lam_max = 0.0;
  for (double l : lam) lam_max = std::max(lam_max, l);
  for (double l : lam)
    if (!(l > 1e-13 * std::max(lam_max, 1e-300)) || lam_max == 0.0)
      throw std::runtime_error("kl_to_posterior_svd: rank-deficient loadings (Lambda^T not invertible)");

  PosteriorKlTerms t;
  t.trace_coeff.assign(nz, 0.0);
  t.h.resize(nz);
  for (std::size_t l = 0; l < nz; ++l) {
    t.h[l] = lam[l] * lam[l] / (1.0 + lam[l] * lam[l]);
    for (std::size_t j = 0; j < nz; ++j)
      t.trace_coeff[l] += (1.0 + lam[j] * lam[j]) * svd.v(l, j) * svd.v(l, j);
  }

  // mubar = [I + UL(UL)^T] U L^{-1} V^T mu  ==  U (L^{-1} + L) V^T mu
  Vec w = mat_t_vec(svd.v, mean);
  for (std::size_t l = 0; l < nz; ++l) w[l] *= 1.0 / lam[l] + lam[l];
  const Vec mubar = mat_vec(svd.u, w);

  Vec resid(model.n_x());
  for (std::size_t i = 0; i < model.n_x(); ++i) resid[i] = x[i] / model.sigma() - mubar[i];
  t.proj = mat_t_vec(svd.u, resid);

  double d1 = 0.0, d2 = 0.0;
  for (std::size_t l = 0; l < nz; ++l) {
    d1 += t.trace_coeff[l] * variance[l] - 1.0 -
          std::log((1.0 + lam[l] * lam[l]) * variance[l]);
    d2 += t.h[l] * t.proj[l] * t.proj[l];
  }
  t.value = 0.5 * (d1 + d2);
  return t;
}

}  // namespace detail

// D[v || posterior(x)] assembled entirely from the SVD factors of C/sigma:
// trace and log-det terms from (I + Lambda^T Lambda), the mean term from
// projections onto the left singular vectors with weights h_l. Never builds
// an n_x x n_x inverse. Agrees with kl_dense on the same distributions.
inline double kl_to_posterior_svd(const DiagGaussian& v, const PpcaModel& model,
                                  std::span<const double> x) {
  return detail::posterior_kl_terms(v.mean, v.variance, model, x).value;
}

// D[v || posterior(x)] - D[v || y]: the correction that turns a two-encoder
// lower bound into one anchored at the exact model posterior. Equals
// E_v[log y - log posterior] identically.
inline double kl_posterior_gap(const DiagGaussian& v, const DiagGaussian& y,
                               const PpcaModel& model, std::span<const double> x) {
  return kl_to_posterior_svd(v, model, x) - kl_diag(v, y);
}

struct McEstimate {
  double value = 0.0;
  double se = 0.0;
  std::size_t n_samples = 0;
};

// Jensen-Shannon divergence J = (1/2) D[u||m] + (1/2) D[v||m], m = (u+v)/2,
// by Monte Carlo with the exact mixture log-density and antithetic pairs.
// Always in [0, log 2].
inline McEstimate jsd_mc(const DiagGaussian& u, const DiagGaussian& v,
                         std::size_t n_samples, std::uint64_t seed) {
  if (u.dim() != v.dim()) throw std::invalid_argument("jsd_mc: dimension mismatch");
  if (n_samples < 100) throw std::invalid_argument("jsd_mc: need n_samples >= 100");

  const auto mix_log = [&](std::span<const double> z) {
    const double lu = u.logpdf(z), lv = v.logpdf(z);
    const double m = std::max(lu, lv);
    return m + std::log(0.5 * std::exp(lu - m) + 0.5 * std::exp(lv - m));
  };

  // even pair count so both components carry equal weight
  std::size_t pairs = std::max<std::size_t>(n_samples / 2, 2);
  pairs += pairs % 2;
  double sum = 0.0, sumsq = 0.0;
  Rng rng(seed);
  Vec zp(u.dim()), zm(u.dim());
  for (std::size_t i = 0; i < pairs; ++i) {
    const DiagGaussian& comp = (i % 2 == 0) ? u : v;
    for (std::size_t k = 0; k < comp.dim(); ++k) {
      const double e = std::sqrt(comp.variance[k]) * rng.normal();
      zp[k] = comp.mean[k] + e;
      zm[k] = comp.mean[k] - e;
    }
    const double f =
        0.5 * ((comp.logpdf(zp) - mix_log(zp)) + (comp.logpdf(zm) - mix_log(zm)));
    sum += f;
    sumsq += f * f;
  }
  McEstimate out;
  out.n_samples = 2 * pairs;
  out.value = sum / static_cast<double>(pairs);
  const double var =
      (sumsq - sum * sum / static_cast<double>(pairs)) / std::max<double>(pairs - 1, 1);
  out.se = std::sqrt(std::max(var, 0.0) / static_cast<double>(pairs));
  return out;
}

// Y - N = sum_l (lambda_l - 1 - log lambda_l) over the eigenvalues of
// Si^{1/2} Sj^{-1} Si^{1/2}; non-negative for any SPD pair. Twice the
// trace+log-det part of the dense Gaussian divergence at equal means.
inline double trace_logdet_residual(const Matrix& sigma_i, const Matrix& sigma_j) {
  if (sigma_i.rows() != sigma_i.cols() || sigma_j.rows() != sigma_j.cols() ||
      sigma_i.rows() != sigma_j.rows())
    throw std::invalid_argument("trace_logdet_residual: shape mismatch");
  const std::size_t n = sigma_i.rows();

  const SymEig ei = sym_eig(sigma_i);
  for (double mu : ei.eigenvalues)
    if (!(mu > 0.0))
      throw std::runtime_error("trace_logdet_residual: sigma_i not positive definite");
  Matrix root(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        s += ei.eigenvectors(i, k) * std::sqrt(ei.eigenvalues[k]) * ei.eigenvectors(j, k);
      root(i, j) = s;
    }

  const Matrix inv_j = chol_inverse(sigma_j);  // throws if not SPD
  Matrix d = root * inv_j * root;
  for (std::size_t i = 0; i < n; ++i)  // symmetrize roundoff
    for (std::size_t j = i + 1; j < n; ++j) {
      const double m = 0.5 * (d(i, j) + d(j, i));
      d(i, j) = m;
      d(j, i) = m;
    }
  const SymEig ed = sym_eig(d);
  double r = 0.0;
  for (double lam : ed.eigenvalues) {
    if (!(lam > 0.0))
      throw std::runtime_error("trace_logdet_residual: similar matrix not positive definite");
    r += lam - 1.0 - std::log(lam);
  }
  return r;
}

}  // namespace evb
