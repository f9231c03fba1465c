#include "ekimf/meanfield.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ekimf {

double GaussianDensity::quantile(double q) const {
  if (mean.size() != 1) {
    throw SizeMismatch("GaussianDensity::quantile: 1-D only");
  }
  return mean(0) + std::sqrt(cov.matrix()(0, 0)) * normal_quantile(q);
}

GaussianDensity gaussian_flow(const Prior& prior, const ForwardModel& model,
                              double t) {
  if (!model.linear()) {
    throw NonlinearModel(
        "gaussian_flow: closed form requires a linear model (amplitude 0)");
  }
  if (t < 0.0) {
    throw std::invalid_argument("gaussian_flow: t must be >= 0");
  }
  const Matrix gamma_inv_a = model.gamma().solve(model.a());
  const Matrix info_data = model.a().transpose() * gamma_inv_a;
  const Matrix info = prior.cov.inverse() + t * info_data;
  SpdMatrix info_spd(0.5 * (info + info.transpose()));
  const Vector rhs = prior.cov.solve(prior.mean) +
                     t * (gamma_inv_a.transpose() * model.y());
  Vector mean = info_spd.solve(rhs);
  Matrix cov = info_spd.inverse();
  return GaussianDensity{std::move(mean),
                         SpdMatrix(0.5 * (cov + cov.transpose()))};
}

FlowStats flow_stats(const GaussianDensity& flow, const ForwardModel& model,
                     double t) {
  if (!model.linear()) {
    throw NonlinearModel(
        "flow_stats: exact moments require a linear model; use flow_stats_mc");
  }
  FlowStats stats;
  stats.t = t;
  stats.mean = flow.mean;
  stats.forward_mean = model.a() * flow.mean;
  stats.cov = flow.cov.matrix();
  stats.cov_ug = flow.cov.matrix() * model.a().transpose();
  return stats;
}

FlowStats flow_stats_mc(const GaussianDensity& flow, const ForwardModel& model,
                        double t, long samples, const NoiseStream& stream,
                        std::uint64_t trial) {
  if (samples < 2) {
    throw std::invalid_argument("flow_stats_mc: need at least 2 samples");
  }
  const int l = model.param_dim();
  const int k = model.obs_dim();
  Vector sum_u = Vector::Zero(l);
  Vector sum_g = Vector::Zero(k);
  Matrix sum_uu = Matrix::Zero(l, l);
  Matrix sum_ug = Matrix::Zero(l, k);
  Matrix sum_ug2 = Matrix::Zero(l, k);  // elementwise squares for stderr

  constexpr long kBlock = 8192;
  long drawn = 0;
  std::uint64_t block_index = 0;
  while (drawn < samples) {
    const long n = std::min(kBlock, samples - drawn);
    const Matrix u = sample_gaussian(flow.mean, flow.cov, static_cast<int>(n),
                                     stream, trial, /*step=*/block_index++);
    const Matrix g = model.apply_all(u);
    sum_u += u.rowwise().sum();
    sum_g += g.rowwise().sum();
    sum_uu.noalias() += u * u.transpose();
    sum_ug.noalias() += u * g.transpose();
    sum_ug2.noalias() += u.array().square().matrix() *
                         g.array().square().matrix().transpose();
    drawn += n;
  }
  const double inv_n = 1.0 / static_cast<double>(samples);
  FlowStats stats;
  stats.t = t;
  stats.mean = sum_u * inv_n;
  stats.forward_mean = sum_g * inv_n;
  stats.cov = sum_uu * inv_n - stats.mean * stats.mean.transpose();
  stats.cov_ug = sum_ug * inv_n - stats.mean * stats.forward_mean.transpose();
  // Elementwise standard error of the u g^T average dominates the error of
  // the centered estimate; report its max as the headline uncertainty.
  const Matrix second = sum_ug2 * inv_n;
  const Matrix mean_prod = sum_ug * inv_n;
  const Matrix var =
      (second - mean_prod.cwiseProduct(mean_prod)).cwiseMax(0.0);
  stats.cov_ug_stderr =
      std::sqrt(var.maxCoeff() / static_cast<double>(samples));
  return stats;
}

FlowStats LinearFlowProvider::at(double t) const {
  return flow_stats(gaussian_flow(prior_, model_, t), model_, t);
}

StatsTable build_reference_table(const ForwardModel& model, const Prior& prior,
                                 const EkiRunConfig& cfg,
                                 const NoiseStream& stream) {
  StatsTable table;
  const int n_steps = cfg.num_steps();
  table.times.reserve(n_steps + 1);
  table.cov_ug.reserve(n_steps + 1);
  run_eki(model, prior, cfg, stream, [&](int, const Ensemble& ens) {
    const EnsembleStats stats = ensemble_stats(ens, model);
    table.times.push_back(ens.time);
    table.cov_ug.push_back(stats.cup);
  });
  return table;
}

void save_stats_table(const StatsTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("save_stats_table: cannot open " + path);
  }
  if (table.times.empty()) {
    throw EmptyInput("save_stats_table: empty table");
  }
  const auto rows = table.cov_ug.front().rows();
  const auto cols = table.cov_ug.front().cols();
  out << "t";
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      out << ",c_" << r << "_" << c;
    }
  }
  out << "\n";
  char buf[32];
  for (std::size_t i = 0; i < table.times.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", table.times[i]);
    out << buf;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        std::snprintf(buf, sizeof(buf), "%.17g", table.cov_ug[i](r, c));
        out << ',' << buf;
      }
    }
    out << "\n";
  }
}

StatsTable load_stats_table(const std::string& path, int param_dim,
                            int obs_dim) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("load_stats_table: cannot open " + path);
  }
  StatsTable table;
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("load_stats_table: missing header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    if (!std::getline(ss, field, ',')) continue;
    table.times.push_back(std::stod(field));
    Matrix m(param_dim, obs_dim);
    for (int r = 0; r < param_dim; ++r) {
      for (int c = 0; c < obs_dim; ++c) {
        if (!std::getline(ss, field, ',')) {
          throw std::runtime_error("load_stats_table: truncated row");
        }
        m(r, c) = std::stod(field);
      }
    }
    table.cov_ug.push_back(std::move(m));
  }
  return table;
}

FlowStats TableFlowProvider::at(double t) const {
  if (table_.times.empty()) {
    throw EmptyInput("TableFlowProvider: empty table");
  }
  // Left lookup: largest recorded time <= t (+ tolerance for roundoff).
  std::size_t idx = 0;
  while (idx + 1 < table_.times.size() &&
         table_.times[idx + 1] <= t + 1e-12) {
    ++idx;
  }
  FlowStats stats;
  stats.t = table_.times[idx];
  stats.cov_ug = table_.cov_ug[idx];
  return stats;
}

Ensemble bridge_step(const Ensemble& ens, const FlowStats& stats,
                     const ForwardModel& model, double h,
                     const NoiseStream* noise, std::uint64_t trial,
                     std::uint64_t step_id) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("bridge_step: need h > 0");
  }
  const int k = model.obs_dim();
  const Matrix drift_gain =
      model.gamma().solve(stats.cov_ug.transpose()).transpose();
  const Matrix g = model.apply_all(ens.particles);
  const Matrix residuals = (-g).colwise() + model.y();

  Ensemble next;
  next.particles = ens.particles + h * (drift_gain * residuals);
  if (noise != nullptr) {
    const Matrix z = noise->normal_matrix(k, ens.size(), trial, step_id);
    const Matrix lz =
        model.gamma().chol().triangularView<Eigen::Lower>().solve(z);
    next.particles.noalias() += std::sqrt(h) * (stats.cov_ug * lz);
  }
  next.time = ens.time + h;
  return next;
}

Ensemble run_bridge(const ForwardModel& model, const Prior& prior,
                    const EkiRunConfig& cfg, const FlowStatsProvider& flow,
                    const NoiseStream& stream, const StepObserver& observer) {
  const int n_steps = cfg.num_steps();
  const NoiseStream* noise = cfg.disable_noise ? nullptr : &stream;

  Ensemble state = initial_ensemble(prior, cfg.ensemble_size, stream, cfg.trial);
  if (observer) observer(0, state);
  for (int n = 0; n < n_steps; ++n) {
    const FlowStats stats = flow.at(state.time);
    state = bridge_step(state, stats, model, cfg.step, noise, cfg.trial,
                        static_cast<std::uint64_t>(n + 1));
    if (observer) observer(n + 1, state);
  }
  return state;
}

CoupledResult run_coupled(const ForwardModel& model, const Prior& prior,
                          const EkiRunConfig& cfg, const FlowStatsProvider& flow,
                          const NoiseStream& stream, CoupledOptions opts) {
  const int n_steps = cfg.num_steps();
  const NoiseStream* noise = cfg.disable_noise ? nullptr : &stream;
  const std::uint64_t v_trial =
      opts.share_noise ? cfg.trial : mix_seed(cfg.trial, 0x756e636f75706cULL);

  CoupledResult result;
  result.coupling_error.reserve(n_steps + 1);

  Ensemble u = initial_ensemble(prior, cfg.ensemble_size, stream, cfg.trial);
  Ensemble v = u;  // identical initial data by construction
  const double inv_j = 1.0 / u.size();
  result.coupling_error.push_back(0.0);

  for (int n = 0; n < n_steps; ++n) {
    const auto step_id = static_cast<std::uint64_t>(n + 1);
    const FlowStats stats = flow.at(u.time);
    u = eki_sde_step(u, model, cfg.step, noise, cfg.trial, step_id);
    v = bridge_step(v, stats, model, cfg.step, noise, v_trial, step_id);
    if (!u.particles.allFinite() || u.particles.cwiseAbs().maxCoeff() > 1e12) {
      throw Diverged("run_coupled: particle norm exceeded 1e12", n + 1);
    }
    result.coupling_error.push_back(
        inv_j * (u.particles - v.particles).squaredNorm());
  }
  result.u_terminal = std::move(u);
  result.v_terminal = std::move(v);
  return result;
}

std::vector<Vector> tensor_grid(double lo, double hi, int points_per_dim,
                                int dim) {
  if (dim < 1 || dim > 2) {
    throw std::invalid_argument("tensor_grid: dim must be 1 or 2");
  }
  std::vector<double> axis(points_per_dim);
  for (int i = 0; i < points_per_dim; ++i) {
    axis[i] = lo + (hi - lo) * i / (points_per_dim - 1);
  }
  std::vector<Vector> grid;
  if (dim == 1) {
    grid.reserve(points_per_dim);
    for (double x : axis) {
      Vector u(1);
      u << x;
      grid.push_back(u);
    }
  } else {
    grid.reserve(static_cast<std::size_t>(points_per_dim) * points_per_dim);
    for (double x : axis) {
      for (double y : axis) {
        Vector u(2);
        u << x, y;
        grid.push_back(u);
      }
    }
  }
  return grid;
}

double fp_residual_check(const FlowPath& path, const ForwardModel& model,
                         const std::vector<double>& times,
                         const std::vector<Vector>& grid, double dt) {
  if (!model.linear()) {
    throw NonlinearModel("fp_residual_check: linear models only");
  }
  if (model.param_dim() > 2) {
    throw TooLarge("fp_residual_check: dim <= 2 only");
  }
  if (times.empty() || grid.empty()) {
    throw EmptyInput("fp_residual_check: empty evaluation set");
  }

  double max_residual = 0.0;
  double max_density = 0.0;
  for (double t : times) {
    const GaussianDensity rho = path(t);
    const GaussianDensity rho_minus = path(t - dt);
    const GaussianDensity rho_plus = path(t + dt);

    // Coefficients from the path's own statistics at time t.
    const Matrix cov_ug = rho.cov.matrix() * model.a().transpose();  // L x K
    const Matrix drift_gain = model.gamma().solve(cov_ug.transpose()).transpose();
    const Matrix diffusion = drift_gain * cov_ug.transpose();  // L x L
    // div F for the affine field F(u) = Cov_{rho,G} Gamma^{-1} (y - A u).
    const double div_flux = -(drift_gain * model.a()).trace();

    const Matrix cov_inv = rho.cov.inverse();
    for (const Vector& u : grid) {
      const double dens = rho.density(u);
      max_density = std::max(max_density, dens);

      const double ddt =
          (rho_plus.density(u) - rho_minus.density(u)) / (2.0 * dt);
      const Vector flux = drift_gain * (model.y() - model.a() * u);
      const Vector grad = -dens * (cov_inv * (u - rho.mean));
      const Vector scaled = cov_inv * (u - rho.mean);
      const Matrix hess = dens * (scaled * scaled.transpose() - cov_inv);

      const double residual = ddt + div_flux * dens + flux.dot(grad) -
                              0.5 * (diffusion * hess).trace();
      max_residual = std::max(max_residual, std::abs(residual));
    }
  }
  return max_residual / max_density;
}

}  // namespace ekimf
