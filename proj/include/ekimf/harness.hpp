#pragma once

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "ekimf/metrics.hpp"

namespace ekimf {

using Json = nlohmann::json;

/// Problem block of a config: dimensions, A, Gamma, prior, data and the
/// nonlinearity knobs. Data is either explicit y or generated as
/// y = A u_true + eta with eta ~ N(0, Gamma) drawn from `data_noise_seed`.
struct ProblemSpec {
  Matrix a;
  Matrix gamma;
  Vector prior_mean;
  Matrix prior_cov;
  std::optional<Vector> y;
  std::optional<Vector> true_parameter;
  std::uint64_t data_noise_seed = 0;
  NonlinearitySpec nonlinearity;

  Prior build_prior() const;
  ForwardModel build_model() const;
};

struct SolverSpec {
  EkiMode mode = EkiMode::sde;
  double h = 1e-3;
  double final_time = 1.0;
  std::vector<int> ensemble_sizes;  // ascending J list
  int seed_count = 8;
  std::uint64_t master_seed = 1;
};

struct MetricSpec {
  std::string w2 = "semidiscrete";  // semidiscrete | sorted | assignment | gaussian
  bool squared = false;             // record W2^2 instead of W2
  int quad_order = 16;
  int reference_draws = 1;          // paired-sample references to average
  long reference_samples = 1000000; // Monte Carlo sizes where applicable
  std::vector<std::string> test_functions = {"sum_sin"};
};

struct ExpectSpec {
  std::optional<double> slope_min;
  std::optional<double> slope_max;
  std::optional<double> mean_tol;
  std::optional<double> var_tol;
};

struct ResidualSpec {
  std::vector<double> amplitudes = {0.0, 0.1, 0.2, 0.4};
  int probes = 100;
  std::vector<double> t_grid = {0.25, 0.5, 0.75, 1.0};
  long snis_samples = 1000000;
};

struct PosteriorSpec {
  std::vector<double> h_sweep = {1e-1, 1e-2, 1e-3};
  int sweep_seeds = 8;
};

struct ExperimentConfig {
  std::string experiment_id = "experiment";
  ProblemSpec problem;
  SolverSpec solver;
  MetricSpec metric;
  ExpectSpec expect;
  ResidualSpec residuals;
  PosteriorSpec posterior;
  std::string output_dir = "out";
};

ExperimentConfig parse_config(const Json& j);
ExperimentConfig load_config(const std::string& path);

/// One measurement: columns emitted exactly as
/// experiment,J,seed,t,metric,value.
struct ResultRow {
  std::string experiment;
  long ensemble_size = 0;  // J
  long seed = 0;
  double t = 0.0;
  std::string metric;
  double value = 0.0;

  bool operator==(const ResultRow&) const = default;
};

std::string emit_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_csv(const std::string& text);

/// Trial seed for (master, experiment, J, seed index); adding J values never
/// perturbs existing trials.
std::uint64_t derive_trial(std::uint64_t master_seed,
                           const std::string& experiment_id, long ensemble_size,
                           long seed_index);

/// Per-J aggregate used for rate fits.
struct PerJStat {
  long ensemble_size = 0;
  double mean = 0.0;    // aggregate of per-seed values
  double stderr_of_mean = 0.0;
  int count = 0;
};

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_stderr = 0.0;  // seed bootstrap
  std::vector<PerJStat> per_j;
};

/// How per-seed values collapse to the per-J statistic before the log-log
/// fit: plain mean, or root-mean-square (for signed errors).
enum class Aggregate { mean, rms };

struct TrialValue {
  long ensemble_size = 0;
  long seed = 0;
  double value = 0.0;
};

/// Ordinary least squares on (log J, log aggregate) with a seed-bootstrap
/// slope standard error (`resamples` draws). Requires >= 4 distinct J and
/// strictly positive aggregates; throws DegenerateFit otherwise.
RateFit fit_rate(const std::vector<TrialValue>& values, Aggregate aggregate,
                 std::uint64_t bootstrap_seed, int resamples = 200);

/// OLS-only variant for already-aggregated points (no bootstrap).
RateFit fit_rate_means(const std::vector<std::pair<long, double>>& means);

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::optional<RateFit> fit;
  Json report;
  bool assertions_ok = true;
};

/// Runs (J, seed) sweeps of the configured sampler, measures the configured
/// W2 against the closed-form flow at t = T, fits the rate.
ExperimentResult run_rate_experiment(const ExperimentConfig& cfg, int threads);

/// Terminal-ensemble moments vs. the conjugate posterior, plus the
/// discrete-vs-SDE shared-noise gap across the configured h sweep.
ExperimentResult run_posterior_check(const ExperimentConfig& cfg, int threads);

/// Shared-noise coupling error between the interacting system and the
/// bridge; fits the terminal mean-square error rate.
ExperimentResult run_coupling_experiment(const ExperimentConfig& cfg,
                                         int threads);

/// RMSE of ensemble averages of Lipschitz test functions against analytic
/// flow expectations; fits the rate.
ExperimentResult run_weak_experiment(const ExperimentConfig& cfg, int threads);

/// Tabulates the residual weights over probe points per amplitude and
/// asserts the linear-case identities.
ExperimentResult run_residual_report(const ExperimentConfig& cfg, int threads);

/// Writes results.csv, fit.json and plot.dat under the output directory.
void write_outputs(const ExperimentResult& result, const std::string& out_dir);

/// Per-step trajectory CSV: step,t,particle,coord_0,...  Off by default in
/// the CLI; exposed for the export flag.
void export_trajectory_csv(const std::vector<Ensemble>& trajectory,
                           const std::string& path);

/// Bounded worker pool over [0, n); task order never affects stored results.
void parallel_for(int n, int threads, const std::function<void(int)>& task);

}  // namespace ekimf
