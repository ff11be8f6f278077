#include <gtest/gtest.h>

#include <cmath>

#include "evb/linalg.hpp"
#include "evb/rng.hpp"
#include "test_util.hpp"

using evb::Matrix;
using evb::Rng;
using evb::SymEig;
using evb::ThinSvd;
using evb::Vec;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).max_abs(); }

double orthonormality_defect(const Matrix& q) {
  const Matrix g = q.transpose() * q;
  return max_abs_diff(g, Matrix::identity(q.cols()));
}

Matrix reconstruct(const SymEig& e) {
  const std::size_t n = e.eigenvalues.size();
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        s += e.eigenvectors(i, k) * e.eigenvalues[k] * e.eigenvectors(j, k);
      m(i, j) = s;
    }
  return m;
}

Matrix reconstruct(const ThinSvd& s) {
  const std::size_t rows = s.u.rows(), cols = s.u.cols();
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < cols; ++k)
        acc += s.u(i, k) * s.singular_values[k] * s.v(j, k);
      m(i, j) = acc;
    }
  return m;
}

}  // namespace

TEST(SymEigTest, IdentityHasUnitSpectrum) {
  const SymEig e = evb::sym_eig(Matrix::identity(3));
  for (double mu : e.eigenvalues) EXPECT_NEAR(mu, 1.0, 1e-12);
  EXPECT_LE(orthonormality_defect(e.eigenvectors), 1e-10);
}

TEST(SymEigTest, DiagonalMatrix) {
  Matrix c(2, 2);
  c(0, 0) = 4.0;
  c(1, 1) = 1.0;
  const SymEig e = evb::sym_eig(c);
  EXPECT_NEAR(e.eigenvalues[0], 4.0, 1e-12);
  EXPECT_NEAR(e.eigenvalues[1], 1.0, 1e-12);
  // sign convention: largest-magnitude entry positive
  EXPECT_NEAR(e.eigenvectors(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(e.eigenvectors(1, 1), 1.0, 1e-12);
}

TEST(SymEigTest, RandomSymmetricResidualAndTrace) {
  Rng rng(42);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix c = testutil::random_symmetric(8, rng, 2.0);
    const SymEig e = evb::sym_eig(c);
    for (std::size_t k = 0; k < 8; ++k) {
      Vec col(8);
      for (std::size_t i = 0; i < 8; ++i) col[i] = e.eigenvectors(i, k);
      const Vec cm = evb::mat_vec(c, col);
      for (std::size_t i = 0; i < 8; ++i)
        EXPECT_NEAR(cm[i], e.eigenvalues[k] * col[i], 1e-8);
    }
    EXPECT_LE(orthonormality_defect(e.eigenvectors), 1e-10);
    EXPECT_LE((c - reconstruct(e)).frobenius(), 1e-8 * c.frobenius());
    for (std::size_t k = 0; k + 1 < 8; ++k)
      EXPECT_GE(e.eigenvalues[k], e.eigenvalues[k + 1]);
    double trace = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      trace += c(i, i);
      sum += e.eigenvalues[i];
    }
    EXPECT_NEAR(sum, trace, 1e-8 * std::max(1.0, std::abs(trace)));
  }
}

TEST(SymEigTest, RejectsBadInput) {
  EXPECT_THROW(evb::sym_eig(Matrix(2, 3)), std::invalid_argument);
  Matrix a(2, 2);
  a(0, 1) = 1.0;
  a(1, 0) = 0.5;
  EXPECT_THROW(evb::sym_eig(a), std::invalid_argument);
}

TEST(ThinSvdTest, ZeroMatrix) {
  const ThinSvd s = evb::thin_svd(Matrix(5, 3));
  for (double sv : s.singular_values) EXPECT_EQ(sv, 0.0);
  EXPECT_LE(orthonormality_defect(s.u), 1e-10);
  EXPECT_LE(orthonormality_defect(s.v), 1e-10);
}

TEST(ThinSvdTest, ColumnVector) {
  Matrix a(2, 1);
  a(0, 0) = 3.0;
  a(1, 0) = 4.0;
  const ThinSvd s = evb::thin_svd(a);
  EXPECT_NEAR(s.singular_values[0], 5.0, 1e-12);
  EXPECT_NEAR(s.u(0, 0), 0.6, 1e-12);
  EXPECT_NEAR(s.u(1, 0), 0.8, 1e-12);
  EXPECT_LE((a - reconstruct(s)).frobenius(), 1e-12);
}

TEST(ThinSvdTest, RandomReconstruction) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix a(12, 4);
    for (auto& v : a.data()) v = rng.normal();
    const ThinSvd s = evb::thin_svd(a);
    EXPECT_LE((a - reconstruct(s)).frobenius(), 1e-8 * a.frobenius());
    EXPECT_LE(orthonormality_defect(s.u), 1e-10);
    EXPECT_LE(orthonormality_defect(s.v), 1e-10);
    EXPECT_LE(max_abs_diff(s.v * s.v.transpose(), Matrix::identity(4)), 1e-10);
    for (std::size_t k = 0; k + 1 < 4; ++k)
      EXPECT_GE(s.singular_values[k], s.singular_values[k + 1]);
  }
}

TEST(ThinSvdTest, RepeatedSingularValuesCompareByReconstruction) {
  // a = 2 * orthonormal: both singular values equal; any orthonormal basis of
  // the subspace is acceptable, so only the reconstruction is pinned.
  const Matrix q = evb::random_orthonormal(6, 2, 99);
  const Matrix a = q.scaled(2.0);
  const ThinSvd s = evb::thin_svd(a);
  EXPECT_NEAR(s.singular_values[0], 2.0, 1e-10);
  EXPECT_NEAR(s.singular_values[1], 2.0, 1e-10);
  EXPECT_LE((a - reconstruct(s)).frobenius(), 1e-10);
}

TEST(ThinSvdTest, RejectsWideMatrix) {
  EXPECT_THROW(evb::thin_svd(Matrix(3, 5)), std::invalid_argument);
}

TEST(WoodburyTest, ZeroLambdaGivesIdentity) {
  const Matrix j = evb::woodbury_latent_inverse(Matrix(6, 3));
  EXPECT_LE(max_abs_diff(j, Matrix::identity(3)), 1e-15);
}

TEST(WoodburyTest, SingleColumnAgainstDenseInverse) {
  Matrix lambda(4, 1);
  lambda(0, 0) = 1.7;
  const Matrix j = evb::woodbury_latent_inverse(lambda);
  EXPECT_NEAR(j(0, 0), 1.0 + 1.7 * 1.7, 1e-12);

  // dense oracle: [I_z - L^T (I_x + L L^T)^{-1} L]^{-1}
  Matrix big = Matrix::identity(4);
  big(0, 0) += 1.7 * 1.7;
  const Matrix inner =
      Matrix::identity(1) - lambda.transpose() * evb::chol_inverse(big) * lambda;
  EXPECT_NEAR(j(0, 0), 1.0 / inner(0, 0), 1e-10);
}

TEST(WoodburyTest, RandomAgainstDenseInverse) {
  Rng rng(11);
  Matrix lambda(16, 4);
  for (auto& v : lambda.data()) v = rng.normal();
  const Matrix j = evb::woodbury_latent_inverse(lambda);

  Matrix big = Matrix::identity(16);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t k = 0; k < 16; ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += lambda(i, c) * lambda(k, c);
      big(i, k) += s;
    }
  Matrix inner = Matrix::identity(4) - lambda.transpose() * evb::chol_inverse(big) * lambda;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = i + 1; k < 4; ++k) {
      const double m = 0.5 * (inner(i, k) + inner(k, i));
      inner(i, k) = m;
      inner(k, i) = m;
    }
  const Matrix dense = evb::chol_inverse(inner);
  EXPECT_LE((j - dense).frobenius(), 1e-8 * dense.frobenius());
}

TEST(WoodburyTest, OutputIsSpdWithSpectrumAboveOne) {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t nx = 3 + (rng.next_u64() % 10);
    const std::size_t nz = 1 + (rng.next_u64() % nx);
    Matrix lambda(nx, nz);
    for (auto& v : lambda.data()) v = 2.0 * rng.normal();
    const SymEig e = evb::sym_eig(evb::woodbury_latent_inverse(lambda));
    for (double mu : e.eigenvalues) EXPECT_GE(mu, 1.0 - 1e-10);
  }
}

TEST(MatrixTest, ConstructionRejectsNonFinite) {
  EXPECT_THROW(Matrix(1, 2, Vec{1.0, std::nan("")}), std::invalid_argument);
  EXPECT_THROW(Matrix(1, 1, Vec{1.0, 2.0}), std::invalid_argument);
}

TEST(CholeskyTest, SolveAndLogdet) {
  Rng rng(5);
  const Matrix a = testutil::random_spd(5, rng);
  const Matrix l = evb::cholesky(a);
  const Vec b = testutil::random_vec(5, rng);
  const Vec x = evb::chol_solve(l, b);
  const Vec ax = evb::mat_vec(a, x);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(ax[i], b[i], 1e-9);
  const Matrix inv = evb::chol_inverse(a);
  EXPECT_LE(max_abs_diff(a * inv, Matrix::identity(5)), 1e-9);

  Matrix indefinite = testutil::random_symmetric(4, rng);
  indefinite(0, 0) = -5.0;
  EXPECT_THROW(evb::cholesky(indefinite), std::runtime_error);
}
