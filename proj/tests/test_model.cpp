#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "ekimf/model.hpp"

using namespace ekimf;

namespace {

// Weakly nonlinear test fixture: K=4 observations, L=2 parameters, so the
// projector onto the complement of Range(A) is nontrivial.
ForwardModel make_nonlinear(double amplitude) {
  Matrix a(4, 2);
  a << 1, 0, 0, 1, 0.5, 0.3, -0.2, 0.7;
  Matrix g = Matrix::Zero(4, 4);
  g.diagonal() << 1.0, 1.5, 0.75, 1.25;
  Vector y(4);
  y << 1.0, 0.5, -0.3, 0.8;
  return ForwardModel::create(a, SpdMatrix(g), y,
                              NonlinearitySpec{amplitude, 12345});
}

Prior make_prior(int l) {
  return Prior{Vector::Zero(l), SpdMatrix::identity(l)};
}

Matrix finite_difference_jacobian(const ForwardModel& model, const Vector& u) {
  const double step = 1e-5 * (1.0 + u.norm());
  Matrix jac(model.obs_dim(), model.param_dim());
  for (int i = 0; i < model.param_dim(); ++i) {
    Vector up = u, down = u;
    up(i) += step;
    down(i) -= step;
    jac.col(i) = (model.apply(up) - model.apply(down)) / (2.0 * step);
  }
  return jac;
}

}  // namespace

TEST_CASE("apply_forward: identity map and zero amplitude") {
  ForwardModel id = ForwardModel::create(Matrix::Identity(2, 2),
                                         SpdMatrix::identity(2),
                                         (Vector(2) << 0, 0).finished());
  Vector u(2);
  u << 1, 2;
  CHECK((id.apply(u) - u).cwiseAbs().maxCoeff() == 0.0);

  ForwardModel zero_amp = make_nonlinear(0.0);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal;
  for (int i = 0; i < 100; ++i) {
    Vector v(2);
    v << normal(rng), normal(rng);
    CHECK((zero_amp.apply(v) - zero_amp.a() * v).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("full-rank square A leaves no orthogonal complement: P = 0") {
  ForwardModel square = ForwardModel::create(Matrix::Identity(2, 2),
                                             SpdMatrix::identity(2),
                                             (Vector(2) << 1, 0).finished());
  CHECK(square.projector().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("projector identities: P A = 0, P idempotent, Gamma-symmetric") {
  ForwardModel model = make_nonlinear(0.3);
  const Matrix& p = model.projector();
  CHECK((p * model.a()).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((p * p - p).cwiseAbs().maxCoeff() < 1e-10);
  // A^T Gamma^{-1} P = 0 (testable restatement of (Gamma P)^T = Gamma P)
  CHECK((model.a().transpose() * model.gamma().solve(p)).cwiseAbs().maxCoeff() <
        1e-10);
}

TEST_CASE("jacobian matches finite differences on random points") {
  ForwardModel model = make_nonlinear(0.35);
  CHECK((model.jacobian(Vector::Zero(2)) - model.a()).cwiseAbs().maxCoeff() >
        0.0);  // nonlinearity actually present
  std::mt19937_64 rng(99);
  std::normal_distribution<double> normal;
  for (int i = 0; i < 20; ++i) {
    Vector u(2);
    u << normal(rng), normal(rng);
    const Matrix fd = finite_difference_jacobian(model, u);
    CHECK((model.jacobian(u) - fd).cwiseAbs().maxCoeff() < 1e-6);
  }
  // amplitude -> 0 limit equals A
  ForwardModel lin = make_nonlinear(0.0);
  Vector u(2);
  u << 0.3, -0.7;
  CHECK((lin.jacobian(u) - lin.a()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("hessian_contraction matches finite differences of the jacobian") {
  ForwardModel model = make_nonlinear(0.4);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  Vector u(2), w(4);
  u << normal(rng), normal(rng);
  w << normal(rng), normal(rng), normal(rng), normal(rng);
  const double step = 1e-5;
  Matrix expected(2, 2);
  for (int i = 0; i < 2; ++i) {
    Vector up = u, down = u;
    up(i) += step;
    down(i) -= step;
    // column i: d_i (grad G)^T w
    const Matrix dj =
        (model.jacobian(up) - model.jacobian(down)) / (2.0 * step);
    expected.col(i) = dj.transpose() * w;
  }
  CHECK((model.hessian_contraction(u, w) - expected).cwiseAbs().maxCoeff() <
        1e-6);
}

TEST_CASE("solve_u_dagger: invertible, tall, and consistent cases") {
  // A = I: u_dagger = y, r = 0 for any Gamma
  Matrix g(2, 2);
  g << 2, 0.5, 0.5, 1;
  auto [ud1, r1] = solve_u_dagger(Matrix::Identity(2, 2), SpdMatrix(g),
                                  (Vector(2) << 3, -1).finished());
  CHECK((ud1 - (Vector(2) << 3, -1).finished()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(r1.cwiseAbs().maxCoeff() < 1e-12);

  // A = [[1],[0]], Gamma = I, y = [2,3]: u_dagger = [2], r = [0,3]
  Matrix a(2, 1);
  a << 1, 0;
  auto [ud2, r2] = solve_u_dagger(a, SpdMatrix::identity(2),
                                  (Vector(2) << 2, 3).finished());
  CHECK(ud2(0) == doctest::Approx(2.0));
  CHECK(r2(0) == doctest::Approx(0.0));
  CHECK(r2(1) == doctest::Approx(3.0));

  // y in Range(A) -> r = 0
  Matrix a3(3, 2);
  a3 << 1, 0, 0, 1, 1, 1;
  Vector u_true(2);
  u_true << 0.4, -0.9;
  auto [ud3, r3] = solve_u_dagger(a3, SpdMatrix::identity(3), a3 * u_true);
  CHECK((ud3 - u_true).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(r3.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("solve_u_dagger rejects rank-deficient A") {
  Matrix a(2, 2);
  a << 1, 1, 1, 1;
  CHECK_THROWS_AS(ForwardModel::create(a, SpdMatrix::identity(2),
                                       (Vector(2) << 1, 2).finished()),
                  RankDeficient);
}

TEST_CASE("residual orthogonality invariant: r^T Gamma^{-1} A = 0") {
  ForwardModel model = make_nonlinear(0.0);
  const Vector r = model.residual();
  CHECK((r.transpose() * model.gamma().solve(model.a()))
            .cwiseAbs()
            .maxCoeff() < 1e-10);
  // reconstruction: A u_dagger + r = y
  CHECK((model.a() * model.u_dagger() + r - model.y()).cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("loss: zero residual, hand value, Gamma scaling") {
  ForwardModel id = ForwardModel::create(Matrix::Identity(2, 2),
                                         SpdMatrix::identity(2),
                                         (Vector(2) << 1, 2).finished());
  CHECK(id.loss((Vector(2) << 1, 2).finished()) == doctest::Approx(0.0));

  // 1-D: A=1, Gamma=1, y=1, u=0 -> 1/2
  ForwardModel canon = ForwardModel::create(
      Matrix::Identity(1, 1), SpdMatrix::identity(1), Vector::Ones(1));
  CHECK(canon.loss(Vector::Zero(1)) == doctest::Approx(0.5));

  // doubling Gamma halves the loss
  ForwardModel canon2 = ForwardModel::create(
      Matrix::Identity(1, 1), SpdMatrix::identity(1, 2.0), Vector::Ones(1));
  CHECK(canon2.loss(Vector::Zero(1)) == doctest::Approx(0.25));

  // linear model: loss(u_dagger) = 1/2 r^T Gamma^{-1} r exactly
  ForwardModel lin = make_nonlinear(0.0);
  CHECK(lin.loss(lin.u_dagger()) ==
        doctest::Approx(0.5 * lin.gamma().quad_form_inv(lin.residual()))
            .epsilon(1e-12));
}

TEST_CASE("posterior_unnormalized: prior at t=0, strictly positive") {
  ForwardModel canon = ForwardModel::create(
      Matrix::Identity(1, 1), SpdMatrix::identity(1), Vector::Ones(1));
  Prior prior = make_prior(1);
  Vector u(1);
  u << 0.37;
  const double at0 = canon.posterior_unnormalized(prior, u, 0.0);
  CHECK(at0 == doctest::Approx(std::exp(
                   gaussian_log_density(u, prior.mean, prior.cov))));
  for (double x : {-10.0, -1.0, 0.0, 2.0, 10.0}) {
    Vector v(1);
    v << x;
    CHECK(canon.posterior_unnormalized(prior, v, 1.0) > 0.0);
  }
  CHECK_THROWS(canon.posterior_unnormalized(prior, u, -1.0));
}

TEST_CASE("weak nonlinearity invariants over 1000 prior probes") {
  ForwardModel model = make_nonlinear(0.3);
  Prior prior = make_prior(2);
  const NonlinearityCheck check =
      validate_weak_nonlinearity(model, prior, /*probe_seed=*/2024, 1000);
  CHECK(check.max_orthogonality_defect < 1e-8);
  CHECK(check.max_m_plus_grad <= model.nonlinearity_bound());
  CHECK(model.nonlinearity_bound() > 0.0);
}

TEST_CASE("orthogonality holds against random directions") {
  ForwardModel model = make_nonlinear(0.25);
  std::mt19937_64 rng(31);
  std::normal_distribution<double> normal;
  for (int i = 0; i < 1000; ++i) {
    Vector u(2), v(2);
    u << normal(rng), normal(rng);
    v << normal(rng), normal(rng);
    const Vector m = model.nonlinear_part(u);
    const double defect =
        std::abs((m.transpose() * model.gamma().solve(model.a() * v))(0));
    CHECK(defect <= 1e-8 * std::max(1.0, v.norm()));
  }
}
