#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "evb/matrix.hpp"
#include "evb/rng.hpp"

namespace evb {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Product of independent 1-D normals: mean/variance per coordinate.
struct DiagGaussian {
  Vec mean;
  Vec variance;

  DiagGaussian() = default;
  DiagGaussian(Vec m, Vec v) : mean(std::move(m)), variance(std::move(v)) {
    if (mean.size() != variance.size())
      throw std::invalid_argument("DiagGaussian: mean/variance length mismatch");
    for (double x : variance)
      if (!(x > 0.0) || !std::isfinite(x))
        throw std::invalid_argument("DiagGaussian: variance must be positive and finite");
    if (!all_finite(mean))
      throw std::invalid_argument("DiagGaussian: non-finite mean");
  }

  std::size_t dim() const { return mean.size(); }

  double logpdf(std::span<const double> x) const {
    if (x.size() != dim()) throw std::invalid_argument("DiagGaussian::logpdf: dimension mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < dim(); ++k) {
      const double d = x[k] - mean[k];
      s += kLog2Pi + std::log(variance[k]) + d * d / variance[k];
    }
    return -0.5 * s;
  }

  Vec sample(Rng& rng) const {
    Vec z(dim());
    for (std::size_t k = 0; k < dim(); ++k)
      z[k] = mean[k] + std::sqrt(variance[k]) * rng.normal();
    return z;
  }

  static DiagGaussian standard(std::size_t dim) {
    return DiagGaussian(Vec(dim, 0.0), Vec(dim, 1.0));
  }
};

// General multivariate normal; the covariance is Cholesky-factored once at
// construction, which doubles as the SPD check.
struct FullGaussian {
  Vec mean;
  Matrix covariance;
  Matrix chol;  // lower factor of covariance

  FullGaussian() = default;
  FullGaussian(Vec m, Matrix cov) : mean(std::move(m)), covariance(std::move(cov)) {
    if (covariance.rows() != covariance.cols() || covariance.rows() != mean.size())
      throw std::invalid_argument("FullGaussian: shape mismatch");
    const double tol = 1e-12 * std::max(1.0, covariance.max_abs());
    if (!covariance.is_symmetric(tol))
      throw std::invalid_argument("FullGaussian: covariance not symmetric");
    chol = cholesky(covariance);
  }

  std::size_t dim() const { return mean.size(); }

  double logpdf(std::span<const double> x) const {
    if (x.size() != dim()) throw std::invalid_argument("FullGaussian::logpdf: dimension mismatch");
    Vec d(dim());
    for (std::size_t k = 0; k < dim(); ++k) d[k] = x[k] - mean[k];
    const Vec sol = chol_solve(chol, d);
    return -0.5 * (static_cast<double>(dim()) * kLog2Pi + chol_logdet(chol) + dot(d, sol));
  }

  Vec sample(Rng& rng) const {
    Vec eps(dim());
    for (double& e : eps) e = rng.normal();
    Vec z = mean;
    for (std::size_t i = 0; i < dim(); ++i)
      for (std::size_t k = 0; k <= i; ++k) z[i] += chol(i, k) * eps[k];
    return z;
  }

  static FullGaussian from_diag(const DiagGaussian& g) {
    Matrix cov(g.dim(), g.dim());
    for (std::size_t k = 0; k < g.dim(); ++k) cov(k, k) = g.variance[k];
    return FullGaussian(g.mean, std::move(cov));
  }
};

}  // namespace evb
