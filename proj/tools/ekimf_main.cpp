#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <thread>

#include "ekimf/harness.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_path, "Experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", opts.out_dir, "Output directory (overrides config)");
  cmd->add_option("--seed", opts.seed, "Master seed (overrides config)")
      ->each([&](const std::string&) { opts.seed_set = true; });
  cmd->add_option("--threads", opts.threads, "Worker threads (default: hardware)");
}

ekimf::ExperimentConfig load(const CommonOptions& opts) {
  ekimf::ExperimentConfig cfg = ekimf::load_config(opts.config_path);
  if (!opts.out_dir.empty()) cfg.output_dir = opts.out_dir;
  if (opts.seed_set) cfg.solver.master_seed = opts.seed;
  return cfg;
}

int threads_or_default(const CommonOptions& opts) {
  if (opts.threads > 0) return opts.threads;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int finish(const ekimf::ExperimentResult& result, const std::string& out_dir) {
  ekimf::write_outputs(result, out_dir);
  if (result.fit) {
    std::printf("slope % .4f (stderr %.4f)\n", result.fit->slope,
                result.fit->slope_stderr);
  }
  std::printf("results written to %s\n", out_dir.c_str());
  if (!result.assertions_ok) {
    std::printf("assertion FAILED (see fit.json)\n");
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble Kalman inversion mean-field experiment driver"};
  app.require_subcommand(1);

  CommonOptions rates_opts, posterior_opts, coupling_opts, weak_opts,
      residual_opts;
  std::string trajectory_path;

  CLI::App* rates =
      app.add_subcommand("rates", "W2-vs-flow convergence rate sweep");
  add_common(rates, rates_opts);
  CLI::App* posterior = app.add_subcommand(
      "posterior-check", "Terminal moments vs the conjugate posterior");
  add_common(posterior, posterior_opts);
  posterior->add_option("--dump-trajectory", trajectory_path,
                        "Write the first trial's trajectory CSV here");
  CLI::App* coupling = app.add_subcommand(
      "coupling", "Shared-noise coupling error rate between solver and bridge");
  add_common(coupling, coupling_opts);
  CLI::App* weak = app.add_subcommand(
      "weak", "Weak-convergence RMSE rate for Lipschitz test functions");
  add_common(weak, weak_opts);
  CLI::App* residuals = app.add_subcommand(
      "residuals", "Second-order residual weights across amplitudes");
  add_common(residuals, residual_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // help/version exit 0, any parse error exits 1
  }

  try {
    if (rates->parsed()) {
      const auto cfg = load(rates_opts);
      return finish(ekimf::run_rate_experiment(cfg, threads_or_default(rates_opts)),
                    cfg.output_dir);
    }
    if (posterior->parsed()) {
      const auto cfg = load(posterior_opts);
      if (!trajectory_path.empty()) {
        ekimf::EkiRunConfig run;
        run.ensemble_size = cfg.solver.ensemble_sizes.front();
        run.step = cfg.solver.h;
        run.final_time = cfg.solver.final_time;
        run.mode = cfg.solver.mode;
        run.trial = ekimf::derive_trial(cfg.solver.master_seed,
                                        cfg.experiment_id,
                                        run.ensemble_size, 0);
        const ekimf::ForwardModel model = cfg.problem.build_model();
        const ekimf::Prior prior = cfg.problem.build_prior();
        const ekimf::NoiseStream stream(cfg.solver.master_seed);
        ekimf::export_trajectory_csv(
            ekimf::run_eki_trajectory(model, prior, run, stream),
            trajectory_path);
      }
      return finish(
          ekimf::run_posterior_check(cfg, threads_or_default(posterior_opts)),
          cfg.output_dir);
    }
    if (coupling->parsed()) {
      const auto cfg = load(coupling_opts);
      return finish(
          ekimf::run_coupling_experiment(cfg, threads_or_default(coupling_opts)),
          cfg.output_dir);
    }
    if (weak->parsed()) {
      const auto cfg = load(weak_opts);
      return finish(ekimf::run_weak_experiment(cfg, threads_or_default(weak_opts)),
                    cfg.output_dir);
    }
    if (residuals->parsed()) {
      const auto cfg = load(residual_opts);
      return finish(
          ekimf::run_residual_report(cfg, threads_or_default(residual_opts)),
          cfg.output_dir);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
