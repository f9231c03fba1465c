#pragma once

#include <functional>
#include <vector>

#include "ekimf/core.hpp"
#include "ekimf/model.hpp"

namespace ekimf {

/// J particles in R^L at a pseudo-time in [0, T]. Particles are columns.
struct Ensemble {
  Matrix particles;  // L x J
  double time = 0.0;

  int size() const { return static_cast<int>(particles.cols()); }
  int dim() const { return static_cast<int>(particles.rows()); }
};

/// Empirical first and second moments of an ensemble under the forward map,
/// all with 1/J normalization:
///   mean        = (1/J) sum u^j
///   forward_mean= (1/J) sum G(u^j)
///   cpp         = (1/J) sum (G(u^j) - forward_mean) (G(u^j) - forward_mean)^T
///   cup         = (1/J) sum (u^j - mean) (G(u^j) - forward_mean)^T
struct EnsembleStats {
  Vector mean;          // L
  Vector forward_mean;  // K
  Matrix cpp;           // K x K
  Matrix cup;           // L x K
};

EnsembleStats ensemble_stats(const Ensemble& ens, const ForwardModel& model);

enum class EkiMode { discrete, sde };

/// One run of the sampler: J particles, N = T/h steps. T/h must be integral
/// to within 1e-9. The trial id addresses the noise stream, so (stream seed,
/// trial) fully determines the run.
struct EkiRunConfig {
  int ensemble_size = 0;  // J >= 2
  double step = 1e-2;     // h in (0, 1]
  double final_time = 1.0;
  EkiMode mode = EkiMode::sde;
  std::uint64_t trial = 0;
  bool disable_noise = false;  // diagnostics only: zero out all increments

  int num_steps() const;  // N; validates integrality and ranges
};

/// Perturbed-data update (one step of the discrete algorithm). Statistics
/// are frozen at the pre-step ensemble. The per-particle perturbation is
/// xi^j = Gamma L^{-1} z^j / sqrt(h) ~ N(0, h^{-1} Gamma) with z^j the
/// standard normals at addresses (trial, j, step_id, 0..K-1) -- the same
/// normals the SDE step consumes, so the two schemes share increments and
/// their pathwise gap vanishes with h even for non-diagonal Gamma.
/// `noise` may be null to force zero perturbations.
Ensemble eki_discrete_step(const Ensemble& ens, const ForwardModel& model,
                           double h, const NoiseStream* noise,
                           std::uint64_t trial, std::uint64_t step_id);

/// Euler-Maruyama step of the coupled SDE system:
///   u^j += Cup Gamma^{-1} (y - G(u^j)) h + Cup Gamma^{-1/2} dW^j,
/// dW^j = sqrt(h) z^j with z^j at (trial, j, step_id, 0..K-1); statistics
/// frozen at the pre-step ensemble.
Ensemble eki_sde_step(const Ensemble& ens, const ForwardModel& model, double h,
                      const NoiseStream* noise, std::uint64_t trial,
                      std::uint64_t step_id);

/// Initial ensemble: J i.i.d. prior draws at addresses (trial, j, step=0).
Ensemble initial_ensemble(const Prior& prior, int ensemble_size,
                          const NoiseStream& stream, std::uint64_t trial);

/// Called with (step index, state) for every state of the trajectory,
/// including the initial ensemble at step 0.
using StepObserver = std::function<void(int, const Ensemble&)>;

/// Runs the configured sampler and returns the terminal ensemble. Throws
/// Diverged if any particle norm exceeds 1e12. Deterministic given
/// (stream seed, cfg.trial).
Ensemble run_eki(const ForwardModel& model, const Prior& prior,
                 const EkiRunConfig& cfg, const NoiseStream& stream,
                 const StepObserver& observer = {});

/// Full trajectory variant (N+1 states).
std::vector<Ensemble> run_eki_trajectory(const ForwardModel& model,
                                         const Prior& prior,
                                         const EkiRunConfig& cfg,
                                         const NoiseStream& stream);

}  // namespace ekimf
