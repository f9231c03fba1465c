#include "ekimf/eki.hpp"

#include <cmath>

namespace ekimf {

namespace {

constexpr double kDivergenceGuard = 1e12;

struct StatsWork {
  Vector mean;
  Vector forward_mean;
  Matrix centered_u;  // L x J
  Matrix centered_g;  // K x J
  Matrix cpp;
  Matrix cup;
};

StatsWork compute_stats(const Ensemble& ens, const ForwardModel& model) {
  if (ens.size() < 2) {
    throw std::invalid_argument("ensemble_stats: need J >= 2");
  }
  StatsWork w;
  const double inv_j = 1.0 / ens.size();
  const Matrix g = model.apply_all(ens.particles);
  w.mean = ens.particles.rowwise().mean();
  w.forward_mean = g.rowwise().mean();
  w.centered_u = ens.particles.colwise() - w.mean;
  w.centered_g = g.colwise() - w.forward_mean;
  w.cpp = inv_j * (w.centered_g * w.centered_g.transpose());
  w.cup = inv_j * (w.centered_u * w.centered_g.transpose());
  return w;
}

void check_finite(const Ensemble& ens, long step_id) {
  if (!ens.particles.allFinite() ||
      ens.particles.cwiseAbs().maxCoeff() > kDivergenceGuard) {
    throw Diverged("run_eki: particle norm exceeded 1e12 at step " +
                       std::to_string(step_id) +
                       "; step size is too large for the problem scale",
                   step_id);
  }
}

}  // namespace

EnsembleStats ensemble_stats(const Ensemble& ens, const ForwardModel& model) {
  StatsWork w = compute_stats(ens, model);
  return EnsembleStats{std::move(w.mean), std::move(w.forward_mean),
                       std::move(w.cpp), std::move(w.cup)};
}

int EkiRunConfig::num_steps() const {
  if (ensemble_size < 2) {
    throw std::invalid_argument("EkiRunConfig: need J >= 2");
  }
  if (!(step > 0.0) || step > 1.0) {
    throw std::invalid_argument("EkiRunConfig: need 0 < h <= 1");
  }
  if (final_time < 0.0) {
    throw std::invalid_argument("EkiRunConfig: need T >= 0");
  }
  const double ratio = final_time / step;
  const double rounded = std::round(ratio);
  if (std::abs(ratio - rounded) > 1e-9 * std::max(1.0, ratio)) {
    throw std::invalid_argument("EkiRunConfig: T/h must be an integer");
  }
  return static_cast<int>(rounded);
}

Ensemble eki_discrete_step(const Ensemble& ens, const ForwardModel& model,
                           double h, const NoiseStream* noise,
                           std::uint64_t trial, std::uint64_t step_id) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("eki_discrete_step: need h > 0");
  }
  StatsWork w = compute_stats(ens, model);
  const int k = model.obs_dim();
  const int j = ens.size();

  Matrix kernel = w.cpp + model.gamma().matrix() / h;
  Matrix kernel_chol;
  try {
    kernel_chol = cholesky(0.5 * (kernel + kernel.transpose()));
  } catch (const NotPositiveDefinite&) {
    throw SingularUpdate("eki_discrete_step: Cpp + Gamma/h is singular");
  }

  // Innovations y + xi^j - G(u^j); xi^j = Gamma L^{-1} z^j / sqrt(h).
  Matrix innovations = (-w.centered_g).colwise() + (model.y() - w.forward_mean);
  if (noise != nullptr) {
    const Matrix z = noise->normal_matrix(k, j, trial, step_id);
    const Matrix lz = model.gamma().chol().triangularView<Eigen::Lower>().solve(z);
    innovations.noalias() += model.gamma().matrix() * lz / std::sqrt(h);
  }

  // u^j += Cup (Cpp + Gamma/h)^{-1} (y^j - G(u^j))
  Matrix solved = kernel_chol.triangularView<Eigen::Lower>().solve(innovations);
  solved = kernel_chol.transpose().triangularView<Eigen::Upper>().solve(solved);

  Ensemble next;
  next.particles = ens.particles + w.cup * solved;
  next.time = ens.time + h;
  return next;
}

Ensemble eki_sde_step(const Ensemble& ens, const ForwardModel& model, double h,
                      const NoiseStream* noise, std::uint64_t trial,
                      std::uint64_t step_id) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("eki_sde_step: need h > 0");
  }
  StatsWork w = compute_stats(ens, model);
  const int k = model.obs_dim();
  const int j = ens.size();

  const Matrix drift_gain = model.gamma().solve(w.cup.transpose()).transpose();
  Matrix residuals = (-w.centered_g).colwise() + (model.y() - w.forward_mean);

  Ensemble next;
  next.particles = ens.particles + h * (drift_gain * residuals);
  if (noise != nullptr) {
    // Cup Gamma^{-1/2} dW^j with the L^{-1} root convention.
    const Matrix z = noise->normal_matrix(k, j, trial, step_id);
    const Matrix lz = model.gamma().chol().triangularView<Eigen::Lower>().solve(z);
    next.particles.noalias() += std::sqrt(h) * (w.cup * lz);
  }
  next.time = ens.time + h;
  return next;
}

Ensemble initial_ensemble(const Prior& prior, int ensemble_size,
                          const NoiseStream& stream, std::uint64_t trial) {
  if (ensemble_size < 2) {
    throw std::invalid_argument("initial_ensemble: need J >= 2");
  }
  Ensemble ens;
  ens.particles = sample_gaussian(prior.mean, prior.cov, ensemble_size, stream,
                                  trial, /*step=*/0);
  ens.time = 0.0;
  return ens;
}

Ensemble run_eki(const ForwardModel& model, const Prior& prior,
                 const EkiRunConfig& cfg, const NoiseStream& stream,
                 const StepObserver& observer) {
  const int n_steps = cfg.num_steps();
  const NoiseStream* noise = cfg.disable_noise ? nullptr : &stream;

  Ensemble state = initial_ensemble(prior, cfg.ensemble_size, stream, cfg.trial);
  if (observer) observer(0, state);
  for (int n = 0; n < n_steps; ++n) {
    // Dynamics increments live at step ids >= 1; step 0 is the initial draw.
    const auto step_id = static_cast<std::uint64_t>(n + 1);
    state = cfg.mode == EkiMode::discrete
                ? eki_discrete_step(state, model, cfg.step, noise, cfg.trial,
                                    step_id)
                : eki_sde_step(state, model, cfg.step, noise, cfg.trial,
                               step_id);
    check_finite(state, n + 1);
    if (observer) observer(n + 1, state);
  }
  return state;
}

std::vector<Ensemble> run_eki_trajectory(const ForwardModel& model,
                                         const Prior& prior,
                                         const EkiRunConfig& cfg,
                                         const NoiseStream& stream) {
  std::vector<Ensemble> trajectory;
  trajectory.reserve(cfg.num_steps() + 1);
  run_eki(model, prior, cfg, stream,
          [&](int, const Ensemble& ens) { trajectory.push_back(ens); });
  return trajectory;
}

}  // namespace ekimf
