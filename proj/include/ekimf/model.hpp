#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "ekimf/core.hpp"

namespace ekimf {

/// Gaussian prior N(u0, C0) on parameter space.
struct Prior {
  Vector mean;
  SpdMatrix cov;
};

/// Declarative description of the bounded nonlinear component. The actual
/// map is m(u) = amplitude * P * b(u) with b_i(u) = sin(w_i . u + phi_i),
/// where the linear forms w_i and phases phi_i are drawn once from `seed`
/// and P is the Gamma^{-1}-orthogonal projector onto the complement of
/// Range(A). The projector makes Range(m) _|_Gamma^{-1} Range(A) hold as an
/// algebraic identity, and the sine base keeps m, grad m and the second
/// derivatives globally bounded with closed forms.
struct NonlinearitySpec {
  double amplitude = 0.0;
  std::uint64_t seed = 0;
};

/// Forward map G(u) = A u + m(u) together with the data model pieces that
/// every solver and metric needs: noise covariance Gamma, data y, the
/// least-squares preimage u_dagger with its Gamma^{-1}-orthogonal residual r,
/// and the bound M on |m| + |grad m|.
class ForwardModel {
 public:
  /// Validates full column rank of A (smallest singular value >
  /// 1e-10 * largest), solves for (u_dagger, r), and for a nonzero amplitude
  /// builds the projector and checks the orthogonality identity on a small
  /// probe set. Throws RankDeficient or NotPositiveDefinite.
  static ForwardModel create(Matrix a, SpdMatrix gamma, Vector y,
                             NonlinearitySpec nonlinearity = {});

  int param_dim() const { return static_cast<int>(a_.cols()); }  // L
  int obs_dim() const { return static_cast<int>(a_.rows()); }    // K

  const Matrix& a() const { return a_; }
  const SpdMatrix& gamma() const { return gamma_; }
  const Vector& y() const { return y_; }
  const Vector& u_dagger() const { return u_dagger_; }
  const Vector& residual() const { return r_; }
  /// Gamma^{-1}-orthogonal projector onto the complement of Range(A).
  const Matrix& projector() const { return projector_; }
  double amplitude() const { return nonlinearity_.amplitude; }
  bool linear() const { return nonlinearity_.amplitude == 0.0; }
  /// Bound M with |m(u)| + |grad m(u)| <= M for all u.
  double nonlinearity_bound() const { return bound_m_; }

  /// G(u)
  Vector apply(const Vector& u) const;
  /// G applied to every column of U (L x J in, K x J out).
  Matrix apply_all(const Matrix& u_columns) const;
  /// m(u) alone (zero vector for a linear model).
  Vector nonlinear_part(const Vector& u) const;
  /// Jacobian of G at u (K x L).
  Matrix jacobian(const Vector& u) const;
  /// sum_k w_k H_k(u) where H_k is the Hessian of the k-th component of G;
  /// this is the L x L contraction that shows up in second-order residuals.
  Matrix hessian_contraction(const Vector& u, const Vector& w) const;

  /// Phi(u; y) = 1/2 |y - G(u)|^2_Gamma
  double loss(const Vector& u) const;

  /// exp(-t Phi(u; y)) * N(u; u0, C0), unnormalized. At t=0 this is the
  /// prior density, at t=1 it is proportional to the posterior.
  double posterior_unnormalized(const Prior& prior, const Vector& u,
                                double t) const;

 private:
  ForwardModel() : gamma_(SpdMatrix::identity(1)) {}

  Matrix a_;
  SpdMatrix gamma_;
  Vector y_;
  Vector u_dagger_;
  Vector r_;
  NonlinearitySpec nonlinearity_;
  Matrix projector_;     // K x K; zero effect when amplitude == 0
  Matrix forms_;         // K x L linear forms of the sine base
  Vector phases_;        // K
  Matrix amp_proj_;      // amplitude * projector, cached
  double bound_m_ = 0.0;
};

/// u_dagger = (A^T Gamma^{-1} A)^{-1} A^T Gamma^{-1} y and r = y - A u_dagger.
/// Throws RankDeficient when the normal-equations matrix is not SPD.
std::pair<Vector, Vector> solve_u_dagger(const Matrix& a,
                                         const SpdMatrix& gamma,
                                         const Vector& y);

/// Worst-case orthogonality and boundedness defects of the nonlinear part
/// over probe points drawn from the prior (documented, reproducible seed).
struct NonlinearityCheck {
  double max_orthogonality_defect = 0.0;  // max |m(u)^T Gamma^{-1} A e_k|
  double max_m_plus_grad = 0.0;           // max |m(u)| + |grad m(u)|_2
};
NonlinearityCheck validate_weak_nonlinearity(const ForwardModel& model,
                                             const Prior& prior,
                                             std::uint64_t probe_seed,
                                             int probes = 1000);

}  // namespace ekimf
