#include "ekimf/core.hpp"

#include <cmath>
#include <limits>

namespace ekimf {

namespace {

double symmetry_defect(const Matrix& m) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() / scale;
}

}  // namespace

Matrix cholesky(const Matrix& m) {
  if (m.rows() != m.cols()) {
    throw SizeMismatch("cholesky: matrix is not square");
  }
  if (symmetry_defect(m) > 1e-12) {
    throw NotPositiveDefinite("cholesky: matrix is not symmetric");
  }
  const auto d = m.rows();
  Matrix lower = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      double sum = m(i, j);
      for (Eigen::Index k = 0; k < j; ++k) {
        sum -= lower(i, k) * lower(j, k);
      }
      if (i == j) {
        if (sum <= 0.0 || !std::isfinite(sum)) {
          throw NotPositiveDefinite("cholesky: pivot " + std::to_string(i) +
                                    " is not positive");
        }
        lower(i, i) = std::sqrt(sum);
      } else {
        lower(i, j) = sum / lower(j, j);
      }
    }
  }
  return lower;
}

SpdMatrix::SpdMatrix(Matrix m) : m_(std::move(m)), chol_(cholesky(m_)) {}

SpdMatrix SpdMatrix::identity(int dim, double scale) {
  return SpdMatrix(Matrix::Identity(dim, dim) * scale);
}

Matrix SpdMatrix::solve(const Eigen::Ref<const Matrix>& rhs) const {
  Matrix y = chol_.triangularView<Eigen::Lower>().solve(rhs);
  return chol_.transpose().triangularView<Eigen::Upper>().solve(y);
}

Matrix SpdMatrix::inverse() const {
  const Matrix eye = Matrix::Identity(dim(), dim());
  return solve(eye);
}

Vector SpdMatrix::sqrt_apply(const Vector& v) const { return chol_ * v; }

Vector SpdMatrix::inv_sqrt_apply(const Vector& v) const {
  return chol_.triangularView<Eigen::Lower>().solve(v);
}

double SpdMatrix::log_det() const {
  return 2.0 * chol_.diagonal().array().log().sum();
}

double SpdMatrix::quad_form_inv(const Vector& v) const {
  return inv_sqrt_apply(v).squaredNorm();
}

// Wichura's AS 241 (PPND16): double-precision rational approximations to the
// standard normal quantile on three ranges of p.
double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("normal_quantile: p must lie in (0,1)");
  }
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    const double num =
        (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
              6.7265770927008700853e4) *
                 r +
             4.5921953931549871457e4) *
                r +
            1.3731693765509461125e4) *
               r +
           1.9715909503065514427e3) *
              r +
          1.3314166789178437745e2) *
             r +
         3.3871328727963666080e0);
    const double den =
        (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
              3.9307895800092710610e4) *
                 r +
             2.1213794301586595867e4) *
                r +
            5.3941960214247511077e3) *
               r +
           6.8718700749205790830e2) *
              r +
          4.2313330701600911252e1) *
             r +
         1.0);
    return q * num / den;
  }
  double r = (q < 0.0) ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double value;
  if (r <= 5.0) {
    r -= 1.6;
    const double num =
        (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
              2.41780725177450611770e-1) *
                 r +
             1.27045825245236838258e0) *
                r +
            3.64784832476320460504e0) *
               r +
           5.76949722146069140550e0) *
              r +
          4.63033784615654529590e0) *
             r +
         1.42343711074968357734e0);
    const double den =
        (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
              1.51986665636164571966e-2) *
                 r +
             1.48103976427480074590e-1) *
                r +
            6.89767334985100004550e-1) *
               r +
           1.67638483018380384940e0) *
              r +
          2.05319162663775882187e0) *
             r +
         1.0);
    value = num / den;
  } else {
    r -= 5.0;
    const double num =
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
              1.24266094738807843860e-3) *
                 r +
             2.65321895265761230930e-2) *
                r +
            2.96560571828504891230e-1) *
               r +
           1.78482653991729133580e0) *
              r +
          5.46378491116411436990e0) *
             r +
         6.65790464350110377720e0);
    const double den =
        (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) *
                  r +
              1.84631831751005468180e-5) *
                 r +
             7.86869131145613259100e-4) *
                r +
            1.48753612908506148525e-2) *
               r +
           1.36929880922735805310e-1) *
              r +
          5.99832206555887937690e-1) *
             r +
         1.0);
    value = num / den;
  }
  return (q < 0.0) ? -value : value;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

namespace {

// SplitMix64 finalizer: full-avalanche 64-bit mix.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_address(std::uint64_t seed, std::uint64_t trial,
                                  std::uint64_t particle, std::uint64_t step,
                                  std::uint64_t component) {
  // Distinct odd multipliers per field keep permuted addresses apart.
  std::uint64_t h = seed;
  h = mix64(h ^ (trial * 0x9e3779b97f4a7c15ULL));
  h = mix64(h ^ (particle * 0xc2b2ae3d27d4eb4fULL));
  h = mix64(h ^ (step * 0x165667b19e3779f9ULL));
  h = mix64(h ^ (component * 0xd6e8feb86659fd93ULL));
  return h;
}

// Map to the open interval (0,1): top 53 bits plus a half-ulp offset.
inline double to_unit_open(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53 + 0x1.0p-54;
}

}  // namespace

double NoiseStream::uniform(std::uint64_t trial, std::uint64_t particle,
                            std::uint64_t step, std::uint64_t component) const {
  return to_unit_open(hash_address(seed_, trial, particle, step, component));
}

double NoiseStream::normal(std::uint64_t trial, std::uint64_t particle,
                           std::uint64_t step, std::uint64_t component) const {
  return normal_quantile(uniform(trial, particle, step, component));
}

Matrix NoiseStream::normal_matrix(int d, int n, std::uint64_t trial,
                                  std::uint64_t step,
                                  std::uint64_t first_particle) const {
  Matrix z(d, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < d; ++i) {
      z(i, j) = normal(trial, first_particle + static_cast<std::uint64_t>(j),
                       step, static_cast<std::uint64_t>(i));
    }
  }
  return z;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  return mix64(seed ^ (tag * 0xff51afd7ed558ccdULL));
}

Matrix sample_gaussian(const Vector& mean, const SpdMatrix& cov, int n,
                       const NoiseStream& stream, std::uint64_t trial,
                       std::uint64_t step) {
  if (mean.size() != cov.dim()) {
    throw SizeMismatch("sample_gaussian: mean/cov dimension mismatch");
  }
  const int d = cov.dim();
  Matrix z = stream.normal_matrix(d, n, trial, step);
  Matrix out = cov.chol() * z;
  out.colwise() += mean;
  return out;
}

Vector spd_sqrt_apply(const SpdMatrix& cov, const Vector& v) {
  if (v.size() != cov.dim()) {
    throw SizeMismatch("spd_sqrt_apply: dimension mismatch");
  }
  return cov.inv_sqrt_apply(v);
}

double gaussian_log_density(const Vector& u, const Vector& mean,
                            const SpdMatrix& cov) {
  static const double log_two_pi = std::log(2.0 * M_PI);
  const double quad = cov.quad_form_inv(u - mean);
  return -0.5 * (quad + cov.log_det() + cov.dim() * log_two_pi);
}

}  // namespace ekimf
