#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "ekimf/errors.hpp"

namespace ekimf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Lower-triangular Cholesky factor of a symmetric matrix.
/// Throws NotPositiveDefinite if the input is not symmetric to 1e-12
/// (relative) or any pivot is <= 0.
Matrix cholesky(const Matrix& m);

/// Symmetric positive-definite matrix with its Cholesky factor cached at
/// construction. All solve/root operations go through the factor, so a
/// successfully constructed SpdMatrix can never fail downstream.
///
/// Square-root convention: sqrt_apply(v) = L v and inv_sqrt_apply(v) = L^{-1} v
/// where m = L L^T. L^{-1} satisfies L^{-1} L^{-T} = m^{-1}, so it is a valid
/// (non-symmetric) root of the inverse; the convention is fixed here once and
/// used everywhere Gamma^{-1/2} appears.
class SpdMatrix {
 public:
  explicit SpdMatrix(Matrix m);

  static SpdMatrix identity(int dim, double scale = 1.0);

  int dim() const { return static_cast<int>(m_.rows()); }
  const Matrix& matrix() const { return m_; }
  const Matrix& chol() const { return chol_; }

  /// m^{-1} rhs for a vector or matrix right-hand side.
  Matrix solve(const Eigen::Ref<const Matrix>& rhs) const;
  Matrix inverse() const;

  Vector sqrt_apply(const Vector& v) const;      // L v
  Vector inv_sqrt_apply(const Vector& v) const;  // L^{-1} v

  double log_det() const;
  /// v^T m^{-1} v
  double quad_form_inv(const Vector& v) const;

 private:
  Matrix m_;
  Matrix chol_;
};

/// Inverse of the standard normal CDF, accurate to ~1e-15 on (0,1).
double normal_quantile(double p);

/// Standard normal CDF (used by tests and the semidiscrete metric).
double normal_cdf(double x);

/// Deterministic, stateless Gaussian source. Every draw is addressed by
/// (trial, particle, step, component); the same address always yields the
/// same value and distinct addresses are generated by independent counter
/// hashes. This is what makes exactly-coupled particle systems possible:
/// two solvers replay identical increments by using identical addresses.
class NoiseStream {
 public:
  explicit NoiseStream(std::uint64_t master_seed) : seed_(master_seed) {}

  std::uint64_t seed() const { return seed_; }

  /// Uniform on the open interval (0,1).
  double uniform(std::uint64_t trial, std::uint64_t particle,
                 std::uint64_t step, std::uint64_t component) const;

  /// Standard normal via the inverse CDF of uniform().
  double normal(std::uint64_t trial, std::uint64_t particle,
                std::uint64_t step, std::uint64_t component) const;

  /// d x n matrix of standard normals, column j drawn at
  /// (trial, first_particle + j, step, 0..d-1).
  Matrix normal_matrix(int d, int n, std::uint64_t trial, std::uint64_t step,
                       std::uint64_t first_particle = 0) const;

 private:
  std::uint64_t seed_;
};

/// Mixes a tag into a seed/trial id; used to derive disjoint address
/// families (e.g. reference draws vs. solver increments).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

/// n draws from N(mean, cov), returned as a dim x n matrix (one draw per
/// column). Draw j uses addresses (trial, j, step, 0..dim-1), so the result
/// is fully determined by (stream seed, trial, step).
Matrix sample_gaussian(const Vector& mean, const SpdMatrix& cov, int n,
                       const NoiseStream& stream, std::uint64_t trial,
                       std::uint64_t step = 0);

/// Gamma^{-1/2} v with the library-wide Cholesky convention (L^{-1} v).
Vector spd_sqrt_apply(const SpdMatrix& cov, const Vector& v);

/// log N(u; mean, cov)
double gaussian_log_density(const Vector& u, const Vector& mean,
                            const SpdMatrix& cov);

}  // namespace ekimf
