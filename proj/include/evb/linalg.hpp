#pragma once

// Symmetric eigendecomposition (cyclic Jacobi), thin SVD (one-sided Jacobi)
// and the Woodbury reduction that maps the latent-space inverse
// [I_z - beta C]^{-1} onto I_z + Lambda^T Lambda. Jacobi is plenty at the
// matrix sizes this library targets (<= a few hundred rows) and converges
// quadratically.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "evb/matrix.hpp"
#include "evb/rng.hpp"

namespace evb {

// Eigenvalues in descending order; eigenvectors_ column k pairs with
// eigenvalues[k]. Vectors are orthonormal, largest-magnitude entry positive.
struct SymEig {
  Vec eigenvalues;
  Matrix eigenvectors;
};

// A = U diag(singular_values) V^T with U (rows x cols) column-orthonormal,
// V (cols x cols) orthogonal, singular values descending and >= 0.
struct ThinSvd {
  Matrix u;
  Vec singular_values;
  Matrix v;
};

namespace detail {

// Make the largest-magnitude entry of column j positive; returns the sign
// applied so callers can compensate in a paired factor.
inline double fix_column_sign(Matrix& m, std::size_t j) {
  std::size_t arg = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double a = std::abs(m(i, j));
    if (a > best) {
      best = a;
      arg = i;
    }
  }
  if (m(arg, j) < 0.0) {
    for (std::size_t i = 0; i < m.rows(); ++i) m(i, j) = -m(i, j);
    return -1.0;
  }
  return 1.0;
}

inline double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

}  // namespace detail

inline SymEig sym_eig(const Matrix& c) {
  if (c.rows() != c.cols())
    throw std::invalid_argument("sym_eig: matrix not square");
  const double sym_tol = 1e-12 * std::max(1.0, c.max_abs());
  if (!c.is_symmetric(sym_tol))
    throw std::invalid_argument("sym_eig: matrix not symmetric");

  const std::size_t n = c.rows();
  Matrix a = c;
  Matrix v = Matrix::identity(n);
  const double stop = 1e-14 * std::max(1.0, a.frobenius());

  for (int sweep = 0; sweep < 100; ++sweep) {
    if (detail::off_diagonal_norm(a) <= stop) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cs = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * cs;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = cs * akp - sn * akq;
          a(k, q) = sn * akp + cs * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = cs * apk - sn * aqk;
          a(q, k) = sn * apk + cs * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = cs * vkp - sn * vkq;
          v(k, q) = sn * vkp + cs * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  SymEig out;
  out.eigenvalues.resize(n);
  out.eigenvectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.eigenvalues[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.eigenvectors(i, k) = v(i, order[k]);
    detail::fix_column_sign(out.eigenvectors, k);
  }
  return out;
}

inline ThinSvd thin_svd(const Matrix& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  if (cols > rows)
    throw std::invalid_argument("thin_svd: more columns than rows");

  Matrix b = a;
  Matrix v = Matrix::identity(cols);

  // One-sided Jacobi: rotate column pairs of B until mutually orthogonal.
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          alpha += b(i, p) * b(i, p);
          beta += b(i, q) * b(i, q);
          gamma += b(i, p) * b(i, q);
        }
        if (std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(zeta * zeta + 1.0));
        const double cs = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = cs * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double bip = b(i, p), biq = b(i, q);
          b(i, p) = cs * bip - sn * biq;
          b(i, q) = sn * bip + cs * biq;
        }
        for (std::size_t i = 0; i < cols; ++i) {
          const double vip = v(i, p), viq = v(i, q);
          v(i, p) = cs * vip - sn * viq;
          v(i, q) = sn * vip + cs * viq;
        }
      }
    }
    if (!rotated) break;
  }

  Vec sv(cols, 0.0);
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += b(i, j) * b(i, j);
    sv[j] = std::sqrt(s);
  }

  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return sv[i] > sv[j]; });

  ThinSvd out;
  out.u = Matrix(rows, cols);
  out.v = Matrix(cols, cols);
  out.singular_values.resize(cols);
  const double rank_tol = (sv.empty() ? 0.0 : sv[order[0]]) * 1e-14;

  for (std::size_t k = 0; k < cols; ++k) {
    const std::size_t j = order[k];
    out.singular_values[k] = sv[j];
    for (std::size_t i = 0; i < cols; ++i) out.v(i, k) = v(i, j);
    if (sv[j] > rank_tol && sv[j] > 0.0) {
      for (std::size_t i = 0; i < rows; ++i) out.u(i, k) = b(i, j) / sv[j];
    }
  }

  // Null columns of U (zero singular values) still need an orthonormal
  // basis: complete from canonical vectors by Gram-Schmidt.
  for (std::size_t k = 0; k < cols; ++k) {
    if (out.singular_values[k] > rank_tol && out.singular_values[k] > 0.0) continue;
    out.singular_values[k] = 0.0;
    for (std::size_t cand = 0; cand < rows; ++cand) {
      Vec e(rows, 0.0);
      e[cand] = 1.0;
      for (std::size_t m = 0; m < cols; ++m) {
        if (m == k) continue;
        double proj = 0.0;
        for (std::size_t i = 0; i < rows; ++i) proj += out.u(i, m) * e[i];
        for (std::size_t i = 0; i < rows; ++i) e[i] -= proj * out.u(i, m);
      }
      const double nrm = norm2(e);
      if (nrm > 0.5) {
        for (std::size_t i = 0; i < rows; ++i) out.u(i, k) = e[i] / nrm;
        break;
      }
    }
  }

  for (std::size_t k = 0; k < cols; ++k) {
    const double sign = detail::fix_column_sign(out.u, k);
    if (sign < 0.0)
      for (std::size_t i = 0; i < cols; ++i) out.v(i, k) = -out.v(i, k);
  }
  return out;
}

// J = [I_z - beta C]^{-1} = I_z + Lambda^T Lambda via the Woodbury identity;
// no N_x-sized inversion ever happens.
inline Matrix woodbury_latent_inverse(const Matrix& lambda) {
  const std::size_t nz = lambda.cols();
  Matrix j = Matrix::identity(nz);
  for (std::size_t a = 0; a < nz; ++a) {
    for (std::size_t b = a; b < nz; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < lambda.rows(); ++i) s += lambda(i, a) * lambda(i, b);
      j(a, b) += s;
      if (a != b) j(b, a) += s;
    }
  }
  return j;
}

// Orthonormalizes the columns of a seeded Gaussian matrix (modified
// Gram-Schmidt, run twice).
inline Matrix random_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (cols > rows) throw std::invalid_argument("random_orthonormal: cols > rows");
  Rng rng(seed);
  Matrix q(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) q(i, j) = rng.normal();
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t m = 0; m < j; ++m) {
        double proj = 0.0;
        for (std::size_t i = 0; i < rows; ++i) proj += q(i, m) * q(i, j);
        for (std::size_t i = 0; i < rows; ++i) q(i, j) -= proj * q(i, m);
      }
      double nrm = 0.0;
      for (std::size_t i = 0; i < rows; ++i) nrm += q(i, j) * q(i, j);
      nrm = std::sqrt(nrm);
      if (nrm < 1e-12) throw std::runtime_error("random_orthonormal: degenerate draw");
      for (std::size_t i = 0; i < rows; ++i) q(i, j) /= nrm;
    }
  }
  return q;
}

}  // namespace evb
