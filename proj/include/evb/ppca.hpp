#pragma once

// Probabilistic PCA in the linear-Gaussian form
//
//   x = C z + v,   z ~ N(0, I_z),  v ~ N(0, sigma^2 I_x)
//
// with C (n_x x n_z) built from the leading eigenvectors of the data
// covariance. The model is fully tractable:
//
//   evidence   p(x)   = N(0, C C^T + sigma^2 I)
//   likelihood p(x|z) = N(C z, sigma^2 I)
//   posterior  p(z|x) = N(beta x, I - beta C),  beta = C^T (C C^T + sigma^2 I)^{-1}
//
// All queries run through the thin SVD of Lambda = C/sigma, so nothing ever
// inverts an n_x x n_x matrix: with Lambda = U L V^T,
//
//   beta            = (1/sigma) V diag(l/(1+l^2)) U^T
//   I - beta C      = V diag(1/(1+l^2)) V^T
//   log|Sigma_x|    = n_x log sigma^2 + sum log(1+l^2)
//   x^T Sigma_x^-1 x = (|x|^2 - sum [l^2/(1+l^2)] <u,x>^2) / sigma^2
//
// The model is immutable after construction and safe to share across threads.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>

#include "evb/dataset.hpp"
#include "evb/gaussian.hpp"
#include "evb/linalg.hpp"
#include "evb/matrix.hpp"
#include "evb/rng.hpp"

namespace evb {

class PpcaModel {
 public:
  PpcaModel(Matrix loadings, double sigma)
      : loadings_(std::move(loadings)), sigma_(sigma) {
    if (!(sigma_ > 0.0) || !std::isfinite(sigma_))
      throw std::invalid_argument("PpcaModel: sigma must be positive");
    if (loadings_.cols() > loadings_.rows())
      throw std::invalid_argument("PpcaModel: latent dimension exceeds data dimension");
    if (loadings_.cols() == 0)
      throw std::invalid_argument("PpcaModel: latent dimension must be >= 1");
    svd_ = thin_svd(loadings_.scaled(1.0 / sigma_));
  }

  std::size_t n_x() const { return loadings_.rows(); }
  std::size_t n_z() const { return loadings_.cols(); }
  double sigma() const { return sigma_; }
  const Matrix& loadings() const { return loadings_; }
  const ThinSvd& svd() const { return svd_; }

  // N(beta x, (I + Lambda^T Lambda)^{-1}); SVD path only.
  FullGaussian posterior(std::span<const double> x) const {
    check_x(x);
    const std::size_t nz = n_z();
    const Vec ux = mat_t_vec(svd_.u, x);  // U^T x
    Vec scaled(nz);
    for (std::size_t l = 0; l < nz; ++l) {
      const double lam = svd_.singular_values[l];
      scaled[l] = ux[l] * lam / (1.0 + lam * lam) / sigma_;
    }
    Vec mean = mat_vec(svd_.v, scaled);
    Matrix cov(nz, nz);
    for (std::size_t i = 0; i < nz; ++i) {
      for (std::size_t j = i; j < nz; ++j) {
        double s = 0.0;
        for (std::size_t l = 0; l < nz; ++l) {
          const double lam = svd_.singular_values[l];
          s += svd_.v(i, l) * svd_.v(j, l) / (1.0 + lam * lam);
        }
        cov(i, j) = s;
        cov(j, i) = s;
      }
    }
    return FullGaussian(std::move(mean), std::move(cov));
  }

  // N(C z, sigma^2 I).
  DiagGaussian likelihood(std::span<const double> z) const {
    if (z.size() != n_z())
      throw std::invalid_argument("PpcaModel::likelihood: dimension mismatch");
    return DiagGaussian(mat_vec(loadings_, z), Vec(n_x(), sigma_ * sigma_));
  }

  // Exact log N(x; 0, C C^T + sigma^2 I).
  double evidence_logpdf(std::span<const double> x) const {
    check_x(x);
    double logdet = static_cast<double>(n_x()) * 2.0 * std::log(sigma_);
    double quad = dot(x, x);
    const Vec ux = mat_t_vec(svd_.u, x);
    for (std::size_t l = 0; l < n_z(); ++l) {
      const double l2 = svd_.singular_values[l] * svd_.singular_values[l];
      logdet += std::log1p(l2);
      quad -= (l2 / (1.0 + l2)) * ux[l] * ux[l];
    }
    quad /= sigma_ * sigma_;
    return -0.5 * (static_cast<double>(n_x()) * kLog2Pi + logdet + quad);
  }

  // z = (C^T C)^{-1} C^T x via the SVD pseudo-inverse; requires full rank.
  Vec noiseless_posterior(std::span<const double> x) const {
    check_x(x);
    const double top = svd_.singular_values.empty() ? 0.0 : svd_.singular_values[0];
    Vec scaled(n_z());
    const Vec ux = mat_t_vec(svd_.u, x);
    for (std::size_t l = 0; l < n_z(); ++l) {
      const double s = svd_.singular_values[l] * sigma_;
      if (!(svd_.singular_values[l] > 1e-12 * std::max(top, 1.0)))
        throw std::runtime_error("PpcaModel::noiseless_posterior: rank-deficient loadings");
      scaled[l] = ux[l] / s;
    }
    return mat_vec(svd_.v, scaled);
  }

  // Rows x_i = C z_i + v_i, deterministic in the seed.
  Dataset sample(std::size_t n, std::uint64_t seed) const {
    if (n < 1) throw std::invalid_argument("PpcaModel::sample: n must be >= 1");
    Rng rng(seed);
    Dataset ds(n, n_x());
    Vec z(n_z());
    for (std::size_t i = 0; i < n; ++i) {
      for (double& zk : z) zk = rng.normal();
      const Vec mean = mat_vec(loadings_, z);
      for (std::size_t j = 0; j < n_x(); ++j)
        ds.at(i, j) = mean[j] + sigma_ * rng.normal();
    }
    return ds;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["n_x"] = n_x();
    j["n_z"] = n_z();
    j["sigma"] = sigma_;
    j["c_r"] = loadings_.data();  // row-major
    return j;
  }

  static PpcaModel from_json(const nlohmann::json& j) {
    const auto rows = j.at("n_x").get<std::size_t>();
    const auto cols = j.at("n_z").get<std::size_t>();
    const auto sigma = j.at("sigma").get<double>();
    auto entries = j.at("c_r").get<Vec>();
    return PpcaModel(Matrix(rows, cols, std::move(entries)), sigma);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("PpcaModel::save: cannot open " + path);
    out << to_json().dump(2) << '\n';
  }

  static PpcaModel load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("PpcaModel::load: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }

 private:
  void check_x(std::span<const double> x) const {
    if (x.size() != n_x()) throw std::invalid_argument("PpcaModel: x dimension mismatch");
    if (!all_finite(x)) throw std::invalid_argument("PpcaModel: non-finite x");
  }

  Matrix loadings_;  // C, n_x x n_z
  double sigma_;
  ThinSvd svd_;  // of C / sigma
};

// C = (1/N) sum x_i x_i^T over centered data.
inline Matrix data_covariance(const Dataset& data) {
  if (data.n_rows < 2) throw std::invalid_argument("data_covariance: need at least 2 rows");
  Dataset centered;
  const Dataset* d = &data;
  if (!data.centered) {
    centered = data;
    centered.center();
    d = &centered;
  }
  const std::size_t n = d->n_rows, p = d->n_cols;
  Matrix c(p, p);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = d->row(i);
    for (std::size_t a = 0; a < p; ++a) {
      const double ra = row[a];
      for (std::size_t b = a; b < p; ++b) c(a, b) += ra * row[b];
    }
  }
  for (std::size_t a = 0; a < p; ++a)
    for (std::size_t b = a; b < p; ++b) {
      c(a, b) /= static_cast<double>(n);
      c(b, a) = c(a, b);
    }
  return c;
}

struct FitOptions {
  // Keep the loading columns as unit eigenvectors instead of scaling column k
  // by sqrt(max(mu_k - sigma^2, 0)).
  bool raw_eigenvectors = false;
};

// sigma^2 = mean of the discarded covariance eigenvalues.
inline double suggest_sigma(const Dataset& data, std::size_t n_z) {
  const Matrix cov = data_covariance(data);
  if (n_z >= cov.rows())
    throw std::invalid_argument("suggest_sigma: needs n_z < n_x (no residual spectrum)");
  const SymEig eig = sym_eig(cov);
  double s = 0.0;
  for (std::size_t k = n_z; k < eig.eigenvalues.size(); ++k)
    s += std::max(eig.eigenvalues[k], 0.0);
  s /= static_cast<double>(eig.eigenvalues.size() - n_z);
  if (!(s > 0.0))
    throw std::invalid_argument("suggest_sigma: residual variance is zero; pass sigma explicitly");
  return std::sqrt(s);
}

inline PpcaModel fit_ppca(const Dataset& data, std::size_t n_z, double sigma,
                          const FitOptions& opts = {}) {
  const Matrix cov = data_covariance(data);
  if (n_z < 1 || n_z > cov.rows())
    throw std::invalid_argument("fit_ppca: n_z out of range");
  if (!(sigma > 0.0)) throw std::invalid_argument("fit_ppca: sigma must be positive");
  const SymEig eig = sym_eig(cov);
  Matrix loadings(cov.rows(), n_z);
  for (std::size_t k = 0; k < n_z; ++k) {
    const double scale =
        opts.raw_eigenvectors ? 1.0 : std::sqrt(std::max(eig.eigenvalues[k] - sigma * sigma, 0.0));
    for (std::size_t i = 0; i < cov.rows(); ++i)
      loadings(i, k) = scale * eig.eigenvectors(i, k);
  }
  return PpcaModel(std::move(loadings), sigma);
}

}  // namespace evb
