#include "ekimf/model.hpp"

#include <Eigen/SVD>
#include <cmath>

namespace ekimf {

std::pair<Vector, Vector> solve_u_dagger(const Matrix& a,
                                         const SpdMatrix& gamma,
                                         const Vector& y) {
  if (a.rows() != gamma.dim() || y.size() != a.rows()) {
    throw SizeMismatch("solve_u_dagger: dimension mismatch");
  }
  const Matrix gamma_inv_a = gamma.solve(a);
  const Matrix normal = a.transpose() * gamma_inv_a;
  Matrix normal_chol;
  try {
    normal_chol = cholesky(0.5 * (normal + normal.transpose()));
  } catch (const NotPositiveDefinite&) {
    throw RankDeficient("solve_u_dagger: A^T Gamma^{-1} A is singular");
  }
  const Vector rhs = gamma_inv_a.transpose() * y;
  Vector w = normal_chol.triangularView<Eigen::Lower>().solve(rhs);
  Vector u_dagger =
      normal_chol.transpose().triangularView<Eigen::Upper>().solve(w);
  Vector r = y - a * u_dagger;
  return {std::move(u_dagger), std::move(r)};
}

ForwardModel ForwardModel::create(Matrix a, SpdMatrix gamma, Vector y,
                                  NonlinearitySpec nonlinearity) {
  if (a.rows() != gamma.dim()) {
    throw SizeMismatch("ForwardModel: A rows must match Gamma dimension");
  }
  if (y.size() != a.rows()) {
    throw SizeMismatch("ForwardModel: y must match A rows");
  }
  Eigen::JacobiSVD<Matrix> svd(a);
  const auto& sv = svd.singularValues();
  if (a.rows() < a.cols() || sv(sv.size() - 1) <= 1e-10 * sv(0)) {
    throw RankDeficient("ForwardModel: A does not have full column rank");
  }

  ForwardModel model;
  model.a_ = std::move(a);
  model.gamma_ = std::move(gamma);
  model.y_ = std::move(y);
  model.nonlinearity_ = nonlinearity;

  auto [u_dagger, r] = solve_u_dagger(model.a_, model.gamma_, model.y_);
  model.u_dagger_ = std::move(u_dagger);
  model.r_ = std::move(r);

  const int k = model.obs_dim();
  const int l = model.param_dim();

  // P = I - A (A^T Gamma^{-1} A)^{-1} A^T Gamma^{-1}
  const Matrix gamma_inv_a = model.gamma_.solve(model.a_);
  const Matrix normal = model.a_.transpose() * gamma_inv_a;
  const Matrix normal_inv = SpdMatrix(0.5 * (normal + normal.transpose())).inverse();
  model.projector_ = Matrix::Identity(k, k) -
                     model.a_ * normal_inv * gamma_inv_a.transpose();

  if (nonlinearity.amplitude < 0.0) {
    throw std::invalid_argument("ForwardModel: amplitude must be >= 0");
  }
  if (nonlinearity.amplitude > 0.0) {
    NoiseStream stream(nonlinearity.seed);
    model.forms_ = stream.normal_matrix(k, l, /*trial=*/0, /*step=*/0) /
                   std::sqrt(static_cast<double>(l));
    model.phases_ = Vector(k);
    for (int i = 0; i < k; ++i) {
      model.phases_(i) =
          2.0 * M_PI * stream.uniform(/*trial=*/1, i, /*step=*/0, 0);
    }
    model.amp_proj_ = nonlinearity.amplitude * model.projector_;
    // |m(u)| <= amp ||P||_2 sqrt(K) and |grad m(u)|_2 <= amp ||P||_2 ||W||_2.
    Eigen::JacobiSVD<Matrix> proj_svd(model.projector_);
    Eigen::JacobiSVD<Matrix> forms_svd(model.forms_);
    const double proj_norm = proj_svd.singularValues()(0);
    const double forms_norm = forms_svd.singularValues()(0);
    model.bound_m_ = nonlinearity.amplitude * proj_norm *
                     (std::sqrt(static_cast<double>(k)) + forms_norm);

    // Spot-check the orthogonality identity; it holds exactly in exact
    // arithmetic, so a loose probe at construction catches wiring errors.
    NoiseStream probe(mix_seed(nonlinearity.seed, 0x70726f6265ULL));
    for (int p = 0; p < 8; ++p) {
      Vector u = probe.normal_matrix(l, 1, /*trial=*/2, p).col(0);
      const Vector ortho =
          model.a_.transpose() * model.gamma_.solve(model.nonlinear_part(u));
      if (ortho.cwiseAbs().maxCoeff() > 1e-8) {
        throw std::runtime_error(
            "ForwardModel: nonlinearity failed the orthogonality identity");
      }
    }
  } else {
    model.amp_proj_ = Matrix::Zero(k, k);
  }
  return model;
}

Vector ForwardModel::nonlinear_part(const Vector& u) const {
  if (linear()) return Vector::Zero(obs_dim());
  return amp_proj_ * (forms_ * u + phases_).array().sin().matrix();
}

Vector ForwardModel::apply(const Vector& u) const {
  if (u.size() != param_dim()) {
    throw SizeMismatch("ForwardModel::apply: dimension mismatch");
  }
  Vector g = a_ * u;
  if (!linear()) g += nonlinear_part(u);
  return g;
}

Matrix ForwardModel::apply_all(const Matrix& u_columns) const {
  if (u_columns.rows() != param_dim()) {
    throw SizeMismatch("ForwardModel::apply_all: dimension mismatch");
  }
  Matrix g = a_ * u_columns;
  if (!linear()) {
    Matrix args = forms_ * u_columns;
    args.colwise() += phases_;
    g.noalias() += amp_proj_ * args.array().sin().matrix();
  }
  return g;
}

Matrix ForwardModel::jacobian(const Vector& u) const {
  if (linear()) return a_;
  const Vector args = forms_ * u + phases_;
  return a_ + amp_proj_ * args.array().cos().matrix().asDiagonal() * forms_;
}

Matrix ForwardModel::hessian_contraction(const Vector& u,
                                         const Vector& w) const {
  if (linear()) return Matrix::Zero(param_dim(), param_dim());
  // H_k = -amp * sum_r P_{k,r} sin(w_r.u + phi_r) w_r w_r^T, so the
  // contraction collapses to W^T diag(sin(...) . (amp P^T w)) W.
  const Vector args = forms_ * u + phases_;
  const Vector scale =
      -(args.array().sin() * (amp_proj_.transpose() * w).array());
  return forms_.transpose() * scale.asDiagonal() * forms_;
}

double ForwardModel::loss(const Vector& u) const {
  return 0.5 * gamma_.quad_form_inv(y_ - apply(u));
}

double ForwardModel::posterior_unnormalized(const Prior& prior,
                                            const Vector& u, double t) const {
  if (t < 0.0) {
    throw std::invalid_argument("posterior_unnormalized: t must be >= 0");
  }
  return std::exp(-t * loss(u) + gaussian_log_density(u, prior.mean, prior.cov));
}

NonlinearityCheck validate_weak_nonlinearity(const ForwardModel& model,
                                             const Prior& prior,
                                             std::uint64_t probe_seed,
                                             int probes) {
  NonlinearityCheck check;
  NoiseStream stream(probe_seed);
  const Matrix gamma_inv_a = model.gamma().solve(model.a());
  for (int p = 0; p < probes; ++p) {
    const Matrix draw = sample_gaussian(prior.mean, prior.cov, 1, stream,
                                        /*trial=*/0, /*step=*/p);
    const Vector u = draw.col(0);
    const Vector m = model.nonlinear_part(u);
    const double ortho = (m.transpose() * gamma_inv_a).cwiseAbs().maxCoeff();
    check.max_orthogonality_defect =
        std::max(check.max_orthogonality_defect, ortho);
    const Matrix grad_m = model.jacobian(u) - model.a();
    Eigen::JacobiSVD<Matrix> svd(grad_m);
    const double grad_norm =
        grad_m.size() == 0 ? 0.0 : svd.singularValues()(0);
    check.max_m_plus_grad =
        std::max(check.max_m_plus_grad, m.norm() + grad_norm);
  }
  return check;
}

}  // namespace ekimf
