#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/SVD>
#include <cmath>

#include "ekimf/eki.hpp"

using namespace ekimf;

namespace {

ForwardModel canonical_1d() {
  return ForwardModel::create(Matrix::Identity(1, 1), SpdMatrix::identity(1),
                              Vector::Ones(1));
}

Prior standard_prior(int l) {
  return Prior{Vector::Zero(l), SpdMatrix::identity(l)};
}

Ensemble two_particles(double a, double b) {
  Ensemble ens;
  ens.particles = Matrix(1, 2);
  ens.particles << a, b;
  return ens;
}

// Brute-force double-loop statistics, the oracle for ensemble_stats.
EnsembleStats stats_naive(const Ensemble& ens, const ForwardModel& model) {
  const int j = ens.size();
  EnsembleStats s;
  s.mean = Vector::Zero(ens.dim());
  s.forward_mean = Vector::Zero(model.obs_dim());
  for (int c = 0; c < j; ++c) {
    s.mean += ens.particles.col(c);
    s.forward_mean += model.apply(ens.particles.col(c));
  }
  s.mean /= j;
  s.forward_mean /= j;
  s.cpp = Matrix::Zero(model.obs_dim(), model.obs_dim());
  s.cup = Matrix::Zero(ens.dim(), model.obs_dim());
  for (int c = 0; c < j; ++c) {
    const Vector du = ens.particles.col(c) - s.mean;
    const Vector dg = model.apply(ens.particles.col(c)) - s.forward_mean;
    s.cpp += dg * dg.transpose();
    s.cup += du * dg.transpose();
  }
  s.cpp /= j;
  s.cup /= j;
  return s;
}

int affine_span_rank(const Ensemble& ens, double tol = 1e-9) {
  const Vector mean = ens.particles.rowwise().mean();
  const Matrix centered = ens.particles.colwise() - mean;
  Eigen::JacobiSVD<Matrix> svd(centered);
  const auto& sv = svd.singularValues();
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i) {
    if (sv(i) > tol * std::max(1.0, sv(0))) ++rank;
  }
  return rank;
}

}  // namespace

TEST_CASE("ensemble_stats: degenerate and two-particle hand cases") {
  ForwardModel model = canonical_1d();

  Ensemble equal = two_particles(0.7, 0.7);
  EnsembleStats s = ensemble_stats(equal, model);
  CHECK(s.cpp(0, 0) == 0.0);
  CHECK(s.cup(0, 0) == 0.0);

  // J=2, G=identity, u={0,2}: mean=1, Cpp=Cup=((0-1)^2+(2-1)^2)/2=1
  EnsembleStats h = ensemble_stats(two_particles(0.0, 2.0), model);
  CHECK(h.mean(0) == doctest::Approx(1.0));
  CHECK(h.forward_mean(0) == doctest::Approx(1.0));
  CHECK(h.cpp(0, 0) == doctest::Approx(1.0));
  CHECK(h.cup(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("ensemble_stats matches the double-loop oracle") {
  Matrix a(3, 2);
  a << 1, 0.4, -0.3, 1, 0.2, 0.2;
  ForwardModel model = ForwardModel::create(
      a, SpdMatrix::identity(3), (Vector(3) << 1, 0, -1).finished());
  NoiseStream stream(11);
  for (int trial = 0; trial < 5; ++trial) {
    Ensemble ens;
    ens.particles = stream.normal_matrix(2, 64, trial, 0);
    const EnsembleStats fast = ensemble_stats(ens, model);
    const EnsembleStats slow = stats_naive(ens, model);
    CHECK((fast.mean - slow.mean).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((fast.forward_mean - slow.forward_mean).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((fast.cpp - slow.cpp).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((fast.cup - slow.cup).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("ensemble_stats: linear-map identities Cpp = A Cuu A^T, Cup = Cuu A^T") {
  Matrix a(2, 2);
  a << 1.5, -0.5, 0.3, 0.9;
  ForwardModel model = ForwardModel::create(a, SpdMatrix::identity(2),
                                            (Vector(2) << 1, 1).finished());
  NoiseStream stream(17);
  Ensemble ens;
  ens.particles = stream.normal_matrix(2, 48, 0, 0);
  const EnsembleStats s = ensemble_stats(ens, model);
  const Vector mean = ens.particles.rowwise().mean();
  const Matrix centered = ens.particles.colwise() - mean;
  const Matrix cuu = centered * centered.transpose() / ens.size();
  CHECK((s.cpp - a * cuu * a.transpose()).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((s.cup - cuu * a.transpose()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("discrete step: degenerate ensemble is a fixed point") {
  ForwardModel model = canonical_1d();
  NoiseStream stream(3);
  Ensemble equal = two_particles(0.4, 0.4);
  const Ensemble next =
      eki_discrete_step(equal, model, 0.5, &stream, /*trial=*/9, /*step=*/1);
  CHECK((next.particles - equal.particles).cwiseAbs().maxCoeff() == 0.0);
  const Ensemble next_sde =
      eki_sde_step(equal, model, 0.5, &stream, /*trial=*/9, /*step=*/1);
  CHECK((next_sde.particles - equal.particles).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("discrete step: 1-D hand case with noise off") {
  // u = {0,2}, h=1, y=1: Cpp=Cup=1, gain = (1+1)^{-1} = 1/2
  ForwardModel model = canonical_1d();
  const Ensemble next = eki_discrete_step(two_particles(0.0, 2.0), model, 1.0,
                                          nullptr, 0, 1);
  CHECK(next.particles(0, 0) == doctest::Approx(0.5));
  CHECK(next.particles(0, 1) == doctest::Approx(1.5));
  CHECK(next.time == doctest::Approx(1.0));
}

TEST_CASE("sde step: drift-only 1-D hand case") {
  ForwardModel model = canonical_1d();
  for (double h : {0.1, 0.25}) {
    const Ensemble next =
        eki_sde_step(two_particles(0.0, 2.0), model, h, nullptr, 0, 1);
    CHECK(next.particles(0, 0) == doctest::Approx(h));
    CHECK(next.particles(0, 1) == doctest::Approx(2.0 - h));
  }
}

TEST_CASE("update stays in the affine span of the pre-step ensemble") {
  // J=3 particles in R^4: Cup has rank <= 2, so the constraint is nontrivial.
  NoiseStream gen(23);
  Matrix a = Matrix::Identity(4, 4) + 0.3 * gen.normal_matrix(4, 4, 0, 0);
  ForwardModel model = ForwardModel::create(
      a, SpdMatrix::identity(4), (Vector(4) << 1, -1, 0.5, 0).finished());
  Ensemble ens;
  ens.particles = gen.normal_matrix(4, 3, 1, 0);
  NoiseStream stream(77);
  const EnsembleStats s = ensemble_stats(ens, model);
  const Ensemble next = eki_discrete_step(ens, model, 0.3, &stream, 4, 1);
  // each displacement must lie in the column space of Cup
  Eigen::JacobiSVD<Matrix> svd(s.cup, Eigen::ComputeThinU);
  const auto& sv = svd.singularValues();
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i) {
    if (sv(i) > 1e-12 * sv(0)) ++rank;
  }
  const Matrix basis = svd.matrixU().leftCols(rank);
  const Matrix displacement = next.particles - ens.particles;
  const Matrix residual = displacement - basis * (basis.transpose() * displacement);
  CHECK(residual.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("noise-free linear run: affine span dimension never increases") {
  NoiseStream gen(29);
  Matrix a = Matrix::Identity(5, 5) + 0.2 * gen.normal_matrix(5, 5, 0, 0);
  ForwardModel model = ForwardModel::create(
      a, SpdMatrix::identity(5), (Vector(5) << 1, 2, 0, -1, 0.5).finished());
  Prior prior = standard_prior(5);
  EkiRunConfig cfg;
  cfg.ensemble_size = 4;
  cfg.step = 0.1;
  cfg.final_time = 1.0;
  cfg.mode = EkiMode::discrete;
  cfg.disable_noise = true;
  NoiseStream stream(101);
  int last_rank = 1 << 20;
  run_eki(model, prior, cfg, stream, [&](int, const Ensemble& ens) {
    const int rank = affine_span_rank(ens);
    CHECK(rank <= last_rank);
    last_rank = rank;
  });
}

TEST_CASE("mean-update identity for the noise-free linear discrete step") {
  Matrix a(2, 2);
  a << 1.2, 0.1, -0.4, 0.8;
  ForwardModel model = ForwardModel::create(a, SpdMatrix::identity(2),
                                            (Vector(2) << 0.5, 1).finished());
  NoiseStream gen(31);
  Ensemble ens;
  ens.particles = gen.normal_matrix(2, 16, 0, 0);
  const EnsembleStats s = ensemble_stats(ens, model);
  const double h = 0.2;
  const Ensemble next = eki_discrete_step(ens, model, h, nullptr, 0, 1);
  const Vector new_mean = next.particles.rowwise().mean();
  const Matrix kernel = s.cpp + model.gamma().matrix() / h;
  const Vector expected =
      s.mean + s.cup * SpdMatrix(kernel).solve(model.y() - a * s.mean);
  CHECK((new_mean - expected).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("discrete and sde steps share increments: gap shrinks >= 2x per halving") {
  // Non-diagonal Gamma exercises the root-convention consistency.
  Matrix a(2, 2);
  a << 1.0, 0.3, -0.2, 0.8;
  Matrix g(2, 2);
  g << 2.0, 1.0, 1.0, 2.0;
  ForwardModel model =
      ForwardModel::create(a, SpdMatrix(g), (Vector(2) << 1, -1).finished());
  NoiseStream stream(55);
  Ensemble ens;
  ens.particles = stream.normal_matrix(2, 32, /*trial=*/1, /*step=*/0);

  auto gap = [&](double h) {
    const Ensemble d = eki_discrete_step(ens, model, h, &stream, 2, 1);
    const Ensemble s = eki_sde_step(ens, model, h, &stream, 2, 1);
    return (d.particles - s.particles).cwiseAbs().maxCoeff();
  };
  double prev = gap(0.2);
  for (double h : {0.1, 0.05, 0.025}) {
    const double cur = gap(h);
    CHECK(cur * 2.0 <= prev * 1.0001);
    prev = cur;
  }
}

TEST_CASE("run_eki: T=0 returns the initial ensemble only") {
  ForwardModel model = canonical_1d();
  Prior prior = standard_prior(1);
  EkiRunConfig cfg;
  cfg.ensemble_size = 4;
  cfg.step = 0.5;
  cfg.final_time = 0.0;
  NoiseStream stream(5);
  const auto trajectory = run_eki_trajectory(model, prior, cfg, stream);
  CHECK(trajectory.size() == 1);
  const Ensemble init = initial_ensemble(prior, 4, stream, cfg.trial);
  CHECK((trajectory[0].particles - init.particles).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("run_eki: identical seed and trial give bit-identical trajectories") {
  ForwardModel model = canonical_1d();
  Prior prior = standard_prior(1);
  EkiRunConfig cfg;
  cfg.ensemble_size = 32;
  cfg.step = 0.1;
  cfg.trial = 13;
  NoiseStream s1(42), s2(42);
  const auto t1 = run_eki_trajectory(model, prior, cfg, s1);
  const auto t2 = run_eki_trajectory(model, prior, cfg, s2);
  REQUIRE(t1.size() == t2.size());
  for (std::size_t i = 0; i < t1.size(); ++i) {
    CHECK((t1[i].particles - t2[i].particles).cwiseAbs().maxCoeff() == 0.0);
  }
  // different trial differs
  EkiRunConfig other = cfg;
  other.trial = 14;
  NoiseStream s3(42);
  const auto t3 = run_eki_trajectory(model, prior, other, s3);
  CHECK((t1.back().particles - t3.back().particles).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("run_eki: T/h must be integral") {
  EkiRunConfig cfg;
  cfg.ensemble_size = 4;
  cfg.step = 0.3;
  cfg.final_time = 1.0;
  CHECK_THROWS(cfg.num_steps());
  cfg.step = 0.25;
  CHECK(cfg.num_steps() == 4);
}

TEST_CASE("canonical problem reaches the conjugate posterior at t=1") {
  ForwardModel model = canonical_1d();
  Prior prior = standard_prior(1);
  EkiRunConfig cfg;
  cfg.ensemble_size = 4096;
  cfg.step = 1e-3;
  cfg.mode = EkiMode::sde;
  cfg.trial = 7;
  NoiseStream stream(20240601);
  const Ensemble terminal = run_eki(model, prior, cfg, stream);
  const double mean = terminal.particles.row(0).mean();
  const double var =
      (terminal.particles.row(0).array() - mean).square().mean();
  CHECK(std::abs(mean - 0.5) < 0.05);
  CHECK(std::abs(var - 0.5) < 0.05);
}

TEST_CASE("fourth moments stay bounded over seeded canonical runs") {
  Matrix a6 = Matrix::Zero(6, 6);
  a6.diagonal() << 0.6, 0.8, 1.0, 1.2, 1.5, 2.0;
  const std::vector<ForwardModel> models = {
      canonical_1d(),
      ForwardModel::create(a6, SpdMatrix::identity(6), Vector::Ones(6))};
  for (const ForwardModel& model : models) {
    Prior prior = standard_prior(model.param_dim());
    for (int seed = 0; seed < 32; ++seed) {
      EkiRunConfig cfg;
      cfg.ensemble_size = 256;
      cfg.step = 1e-2;
      cfg.trial = static_cast<std::uint64_t>(seed);
      NoiseStream stream(1000);
      double initial = -1.0;
      double max_seen = 0.0;
      run_eki(model, prior, cfg, stream, [&](int, const Ensemble& ens) {
        double m4 = 0.0;
        for (int j = 0; j < ens.size(); ++j) {
          const double n2 = ens.particles.col(j).squaredNorm();
          m4 += n2 * n2;
        }
        m4 /= ens.size();
        if (initial < 0.0) initial = m4;
        max_seen = std::max(max_seen, m4);
      });
      CHECK(max_seen <= 100.0 * initial);
    }
  }
}

TEST_CASE("divergence guard raises Diverged") {
  // A stiff problem stepped far too coarsely oscillates and blows up.
  ForwardModel model = ForwardModel::create(
      Matrix::Identity(1, 1) * 10.0, SpdMatrix::identity(1, 1e-2),
      Vector::Ones(1));
  Prior prior = standard_prior(1);
  EkiRunConfig cfg;
  cfg.ensemble_size = 8;
  cfg.step = 1.0;
  cfg.final_time = 8.0;
  cfg.mode = EkiMode::sde;
  cfg.disable_noise = true;
  NoiseStream stream(2);
  CHECK_THROWS_AS(run_eki(model, prior, cfg, stream), Diverged);
}
