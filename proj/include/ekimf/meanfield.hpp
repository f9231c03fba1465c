#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ekimf/eki.hpp"

namespace ekimf {

/// Gaussian density N(mean, cov); the closed-form state of the linear-case
/// flow and the shape of the prior.
struct GaussianDensity {
  Vector mean;
  SpdMatrix cov;

  double log_density(const Vector& u) const {
    return gaussian_log_density(u, mean, cov);
  }
  double density(const Vector& u) const { return std::exp(log_density(u)); }
  /// Quantile function; defined for 1-D densities only.
  double quantile(double q) const;
};

/// Closed-form solution of the linear-case flow:
///   C(t) = (C0^{-1} + t A^T Gamma^{-1} A)^{-1}
///   m(t) = C(t) (C0^{-1} u0 + t A^T Gamma^{-1} y)
/// At t=0 this is the prior; at t=1 the conjugate Gaussian posterior.
/// Throws NonlinearModel when the model has a nonzero amplitude.
GaussianDensity gaussian_flow(const Prior& prior, const ForwardModel& model,
                              double t);

/// First and second moments of the flow at a fixed time, in the shape the
/// bridge dynamics consumes.
struct FlowStats {
  double t = 0.0;
  Vector mean;          // E_rho
  Vector forward_mean;  // E_{G,rho}
  Matrix cov;           // Cov_rho            (L x L)
  Matrix cov_ug;        // Cov_{rho,G}        (L x K)
  double cov_ug_stderr = 0.0;  // sampling error when Monte Carlo estimated
};

/// Exact moments for a linear model: Cov_{rho,G} = Cov_rho A^T.
FlowStats flow_stats(const GaussianDensity& flow, const ForwardModel& model,
                     double t);

/// Monte Carlo fallback for nonlinear G: moments of (u, G(u)) under the given
/// Gaussian density from `samples` draws, with the max elementwise standard
/// error of Cov_{rho,G} reported.
FlowStats flow_stats_mc(const GaussianDensity& flow, const ForwardModel& model,
                        double t, long samples, const NoiseStream& stream,
                        std::uint64_t trial);

/// Supplies flow statistics at arbitrary times for the bridge dynamics.
class FlowStatsProvider {
 public:
  virtual ~FlowStatsProvider() = default;
  virtual FlowStats at(double t) const = 0;
};

/// Exact provider backed by the closed-form linear flow.
class LinearFlowProvider final : public FlowStatsProvider {
 public:
  LinearFlowProvider(const Prior& prior, const ForwardModel& model)
      : prior_(prior), model_(model) {}
  FlowStats at(double t) const override;

 private:
  const Prior& prior_;
  const ForwardModel& model_;
};

/// Time series of Cov_{rho,G} frozen from a large self-consistent reference
/// ensemble; the standard proxy when the flow is not available in closed
/// form. Lookup is piecewise-constant from the left, matching the explicit
/// scheme's evaluation of coefficients at step start.
struct StatsTable {
  std::vector<double> times;
  std::vector<Matrix> cov_ug;  // L x K each
};

/// Evolves one large ensemble (its own empirical statistics feed its own
/// drift) and records Cov_{u,G} at every step start.
StatsTable build_reference_table(const ForwardModel& model, const Prior& prior,
                                 const EkiRunConfig& cfg,
                                 const NoiseStream& stream);

/// CSV persistence: header "t,c_0_0,...", one row per time.
void save_stats_table(const StatsTable& table, const std::string& path);
StatsTable load_stats_table(const std::string& path, int param_dim,
                            int obs_dim);

class TableFlowProvider final : public FlowStatsProvider {
 public:
  explicit TableFlowProvider(StatsTable table) : table_(std::move(table)) {}
  FlowStats at(double t) const override;

 private:
  StatsTable table_;
};

/// Euler-Maruyama step of the bridge system
///   v^j += Cov_{rho,G} Gamma^{-1} (y - G(v^j)) h + Cov_{rho,G} Gamma^{-1/2} dW^j
/// with dW^j drawn at the same (trial, j, step_id) addresses as eki_sde_step,
/// so a coupled pair of runs shares increments exactly. Coefficients are
/// particle-independent: the bridge particles do not interact.
Ensemble bridge_step(const Ensemble& ens, const FlowStats& stats,
                     const ForwardModel& model, double h,
                     const NoiseStream* noise, std::uint64_t trial,
                     std::uint64_t step_id);

/// Bridge trajectory driven by a stats provider; same conventions as run_eki.
Ensemble run_bridge(const ForwardModel& model, const Prior& prior,
                    const EkiRunConfig& cfg, const FlowStatsProvider& flow,
                    const NoiseStream& stream, const StepObserver& observer = {});

struct CoupledOptions {
  bool share_noise = true;  // false: bridge uses an independent address family
};

struct CoupledResult {
  Ensemble u_terminal;
  Ensemble v_terminal;
  /// (1/J) sum_j |u^j - v^j|^2 at each step, starting at step 0 (exactly 0).
  std::vector<double> coupling_error;
};

/// Runs the interacting system and the bridge side by side from identical
/// initial draws with identical per-(particle, step) increments.
CoupledResult run_coupled(const ForwardModel& model, const Prior& prior,
                          const EkiRunConfig& cfg, const FlowStatsProvider& flow,
                          const NoiseStream& stream, CoupledOptions opts = {});

/// Evaluates the flow-equation residual
///   dt rho + div((y - G u)^T Gamma^{-1} Cov_{G,rho} rho)
///          - 1/2 Tr(Cov_{rho,G} Gamma^{-1} Cov_{G,rho} Hess(rho))
/// on grid points at the given times, using analytic spatial derivatives of
/// the Gaussian path and a central difference in t (step dt). Returns the
/// max |residual| normalized by the max density over the evaluation set.
/// Linear models with dim <= 2 only.
using FlowPath = std::function<GaussianDensity(double)>;
double fp_residual_check(const FlowPath& path, const ForwardModel& model,
                         const std::vector<double>& times,
                         const std::vector<Vector>& grid, double dt = 1e-5);

/// Tensor grid helper for fp_residual_check (L = 1 or 2).
std::vector<Vector> tensor_grid(double lo, double hi, int points_per_dim,
                                int dim);

}  // namespace ekimf
