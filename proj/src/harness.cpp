#include "ekimf/harness.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

namespace ekimf {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Matrix parse_matrix(const Json& j, int rows, int cols, const char* what) {
  Matrix m(rows, cols);
  if (j.is_object()) {
    if (j.contains("identity")) {
      if (rows != cols) {
        throw ConfigError(std::string(what) + ": identity requires square");
      }
      return Matrix::Identity(rows, cols) * j.at("identity").get<double>();
    }
    if (j.contains("diagonal")) {
      const auto diag = j.at("diagonal").get<std::vector<double>>();
      if (static_cast<int>(diag.size()) != rows || rows != cols) {
        throw ConfigError(std::string(what) + ": bad diagonal length");
      }
      m.setZero();
      for (int i = 0; i < rows; ++i) m(i, i) = diag[i];
      return m;
    }
    throw ConfigError(std::string(what) + ": unknown matrix object");
  }
  if (!j.is_array() || j.empty()) {
    throw ConfigError(std::string(what) + ": expected array");
  }
  if (j.front().is_array()) {
    if (static_cast<int>(j.size()) != rows) {
      throw ConfigError(std::string(what) + ": wrong row count");
    }
    for (int r = 0; r < rows; ++r) {
      const auto row = j.at(r).get<std::vector<double>>();
      if (static_cast<int>(row.size()) != cols) {
        throw ConfigError(std::string(what) + ": wrong column count");
      }
      for (int c = 0; c < cols; ++c) m(r, c) = row[c];
    }
    return m;
  }
  // flat row-major
  const auto flat = j.get<std::vector<double>>();
  if (static_cast<int>(flat.size()) != rows * cols) {
    throw ConfigError(std::string(what) + ": wrong flat length");
  }
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = flat[r * cols + c];
  }
  return m;
}

Vector parse_vector(const Json& j, int size, const char* what) {
  const auto values = j.get<std::vector<double>>();
  if (static_cast<int>(values.size()) != size) {
    throw ConfigError(std::string(what) + ": wrong length");
  }
  return Eigen::Map<const Vector>(values.data(), size);
}

constexpr std::uint64_t kReferenceTag = 0x7265666472617721ULL;
constexpr std::uint64_t kDataTag = 0x64617461ULL;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Lipschitz test function with its analytic expectation under a Gaussian.
struct TestFunction {
  std::string name;
  std::function<double(const Vector&)> fn;
  double reference = 0.0;
};

TestFunction make_test_function(const std::string& name,
                                const GaussianDensity& flow) {
  TestFunction tf;
  tf.name = name;
  if (name == "sum_sin") {
    tf.fn = [](const Vector& u) { return u.array().sin().sum(); };
    // E sin(X) = sin(m) exp(-c/2) for X ~ N(m, c), coordinatewise.
    double ref = 0.0;
    for (int i = 0; i < flow.mean.size(); ++i) {
      ref += std::sin(flow.mean(i)) * std::exp(-0.5 * flow.cov.matrix()(i, i));
    }
    tf.reference = ref;
    return tf;
  }
  if (name == "sum") {
    tf.fn = [](const Vector& u) { return u.sum(); };
    tf.reference = flow.mean.sum();
    return tf;
  }
  throw ConfigError("unknown test function: " + name);
}

std::vector<double> to_std(const Vector& v) {
  return {v.data(), v.data() + v.size()};
}

/// W2 of a terminal ensemble against the flow density per the metric spec.
double measure_w2(const Ensemble& ens, const GaussianDensity& flow,
                  const MetricSpec& metric, const NoiseStream& stream,
                  std::uint64_t trial) {
  double value = 0.0;
  if (metric.w2 == "semidiscrete") {
    if (ens.dim() != 1) {
      throw ConfigError("semidiscrete W2 estimator is 1-D only");
    }
    value = w2_semidiscrete_1d(
                to_std(ens.particles.row(0)),
                [&](double q) { return flow.quantile(q); }, metric.quad_order)
                .value;
  } else if (metric.w2 == "sorted") {
    if (ens.dim() != 1) {
      throw ConfigError("sorted W2 estimator is 1-D only");
    }
    const Matrix ref =
        sample_gaussian(flow.mean, flow.cov, ens.size(), stream,
                        mix_seed(trial, kReferenceTag), /*step=*/0);
    value = w2_sorted_1d(to_std(ens.particles.row(0)), to_std(ref.row(0))).value;
  } else if (metric.w2 == "assignment") {
    // Paired-sample estimator: same-size i.i.d. reference draws from the
    // flow, averaged over reference_draws; upward biased by the reference's
    // own sampling error.
    double acc = 0.0;
    for (int r = 0; r < metric.reference_draws; ++r) {
      const Matrix ref = sample_gaussian(
          flow.mean, flow.cov, ens.size(), stream,
          mix_seed(trial, kReferenceTag + static_cast<std::uint64_t>(r)),
          /*step=*/0);
      acc += w2_assignment(ens.particles, ref).value;
    }
    value = acc / metric.reference_draws;
  } else if (metric.w2 == "gaussian") {
    const Vector mean = ens.particles.rowwise().mean();
    const Matrix centered = ens.particles.colwise() - mean;
    Matrix cov = centered * centered.transpose() / ens.size();
    GaussianDensity moment_match{mean,
                                 SpdMatrix(0.5 * (cov + cov.transpose()))};
    value = w2_gaussian(moment_match, flow).value;
  } else {
    throw ConfigError("unknown W2 estimator: " + metric.w2);
  }
  return metric.squared ? value * value : value;
}

void append_fit_assertions(const ExperimentConfig& cfg,
                           const RateFit& fit, ExperimentResult& result) {
  result.report["slope"] = fit.slope;
  result.report["slope_stderr"] = fit.slope_stderr;
  result.report["intercept"] = fit.intercept;
  if (cfg.expect.slope_min || cfg.expect.slope_max) {
    bool ok = true;
    if (cfg.expect.slope_min && fit.slope < *cfg.expect.slope_min) ok = false;
    if (cfg.expect.slope_max && fit.slope > *cfg.expect.slope_max) ok = false;
    result.report["slope_window"] = {
        cfg.expect.slope_min ? Json(*cfg.expect.slope_min) : Json(nullptr),
        cfg.expect.slope_max ? Json(*cfg.expect.slope_max) : Json(nullptr)};
    result.report["slope_in_window"] = ok;
    result.assertions_ok = result.assertions_ok && ok;
  }
}

}  // namespace

Prior ProblemSpec::build_prior() const {
  return Prior{prior_mean, SpdMatrix(prior_cov)};
}

ForwardModel ProblemSpec::build_model() const {
  SpdMatrix gamma_spd(gamma);
  Vector data;
  if (y.has_value()) {
    data = *y;
  } else if (true_parameter.has_value()) {
    NoiseStream stream(mix_seed(data_noise_seed, kDataTag));
    const Matrix eta = sample_gaussian(Vector::Zero(a.rows()), gamma_spd, 1,
                                       stream, /*trial=*/0, /*step=*/0);
    data = a * (*true_parameter) + eta.col(0);
  } else {
    throw ConfigError("problem: provide either y or true_parameter");
  }
  return ForwardModel::create(a, std::move(gamma_spd), std::move(data),
                              nonlinearity);
}

ExperimentConfig parse_config(const Json& j) {
  ExperimentConfig cfg;
  if (j.contains("experiment")) {
    cfg.experiment_id = j.at("experiment").get<std::string>();
  }

  const Json& p = j.at("problem");
  const int l = p.at("L").get<int>();
  const int k = p.at("K").get<int>();
  cfg.problem.a = parse_matrix(p.at("A"), k, l, "A");
  cfg.problem.gamma = parse_matrix(p.at("Gamma"), k, k, "Gamma");
  cfg.problem.prior_mean = parse_vector(p.at("prior").at("mean"), l, "prior mean");
  cfg.problem.prior_cov =
      parse_matrix(p.at("prior").at("cov"), l, l, "prior cov");
  if (p.contains("y")) cfg.problem.y = parse_vector(p.at("y"), k, "y");
  if (p.contains("true_parameter")) {
    cfg.problem.true_parameter =
        parse_vector(p.at("true_parameter"), l, "true_parameter");
  }
  if (p.contains("data_noise_seed")) {
    cfg.problem.data_noise_seed = p.at("data_noise_seed").get<std::uint64_t>();
  }
  if (p.contains("nonlinearity")) {
    cfg.problem.nonlinearity.amplitude =
        p.at("nonlinearity").value("amplitude", 0.0);
    cfg.problem.nonlinearity.seed =
        p.at("nonlinearity").value("seed", std::uint64_t{0});
  }

  const Json& s = j.at("solver");
  const std::string mode = s.value("mode", "sde");
  if (mode == "sde") {
    cfg.solver.mode = EkiMode::sde;
  } else if (mode == "discrete") {
    cfg.solver.mode = EkiMode::discrete;
  } else {
    throw ConfigError("solver.mode must be 'sde' or 'discrete'");
  }
  cfg.solver.h = s.value("h", 1e-3);
  cfg.solver.final_time = s.value("T", 1.0);
  cfg.solver.ensemble_sizes = s.at("J").get<std::vector<int>>();
  cfg.solver.seed_count = s.value("seeds", 8);
  cfg.solver.master_seed = s.value("master_seed", std::uint64_t{1});
  for (std::size_t i = 1; i < cfg.solver.ensemble_sizes.size(); ++i) {
    if (cfg.solver.ensemble_sizes[i] <= cfg.solver.ensemble_sizes[i - 1]) {
      throw ConfigError("solver.J must be strictly ascending");
    }
  }

  if (j.contains("metric")) {
    const Json& m = j.at("metric");
    cfg.metric.w2 = m.value("w2", cfg.metric.w2);
    cfg.metric.squared = m.value("squared", cfg.metric.squared);
    cfg.metric.quad_order = m.value("quad_order", cfg.metric.quad_order);
    cfg.metric.reference_draws =
        m.value("reference_draws", cfg.metric.reference_draws);
    cfg.metric.reference_samples =
        m.value("reference_samples", cfg.metric.reference_samples);
    if (m.contains("test_functions")) {
      cfg.metric.test_functions =
          m.at("test_functions").get<std::vector<std::string>>();
    }
  }

  if (j.contains("expect")) {
    const Json& e = j.at("expect");
    if (e.contains("slope_min")) cfg.expect.slope_min = e.at("slope_min").get<double>();
    if (e.contains("slope_max")) cfg.expect.slope_max = e.at("slope_max").get<double>();
    if (e.contains("mean_tol")) cfg.expect.mean_tol = e.at("mean_tol").get<double>();
    if (e.contains("var_tol")) cfg.expect.var_tol = e.at("var_tol").get<double>();
  }

  if (j.contains("residuals")) {
    const Json& r = j.at("residuals");
    if (r.contains("amplitudes")) {
      cfg.residuals.amplitudes = r.at("amplitudes").get<std::vector<double>>();
    }
    cfg.residuals.probes = r.value("probes", cfg.residuals.probes);
    if (r.contains("t_grid")) {
      cfg.residuals.t_grid = r.at("t_grid").get<std::vector<double>>();
    }
    cfg.residuals.snis_samples =
        r.value("snis_samples", cfg.residuals.snis_samples);
  }

  if (j.contains("posterior")) {
    const Json& q = j.at("posterior");
    if (q.contains("h_sweep")) {
      cfg.posterior.h_sweep = q.at("h_sweep").get<std::vector<double>>();
    }
    cfg.posterior.sweep_seeds =
        q.value("sweep_seeds", cfg.posterior.sweep_seeds);
  }

  if (j.contains("output")) {
    cfg.output_dir = j.at("output").value("dir", cfg.output_dir);
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file: " + path);
  }
  Json j;
  in >> j;
  return parse_config(j);
}

std::string emit_csv(const std::vector<ResultRow>& rows) {
  std::string out = "experiment,J,seed,t,metric,value\n";
  for (const ResultRow& row : rows) {
    if (!std::isfinite(row.value)) {
      throw std::runtime_error("emit_csv: non-finite value for metric " +
                               row.metric);
    }
    out += row.experiment;
    out += ',';
    out += std::to_string(row.ensemble_size);
    out += ',';
    out += std::to_string(row.seed);
    out += ',';
    out += format_double(row.t);
    out += ',';
    out += row.metric;
    out += ',';
    out += format_double(row.value);
    out += '\n';
  }
  return out;
}

std::vector<ResultRow> parse_csv(const std::string& text) {
  std::vector<ResultRow> rows;
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line)) {
    throw EmptyInput("parse_csv: empty input");
  }
  if (line != "experiment,J,seed,t,metric,value") {
    throw std::runtime_error("parse_csv: unexpected header: " + line);
  }
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    ResultRow row;
    std::string field;
    std::getline(ls, row.experiment, ',');
    std::getline(ls, field, ',');
    row.ensemble_size = std::stol(field);
    std::getline(ls, field, ',');
    row.seed = std::stol(field);
    std::getline(ls, field, ',');
    row.t = std::stod(field);
    std::getline(ls, row.metric, ',');
    std::getline(ls, field);
    row.value = std::stod(field);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::uint64_t derive_trial(std::uint64_t master_seed,
                           const std::string& experiment_id,
                           long ensemble_size, long seed_index) {
  std::uint64_t h = mix_seed(master_seed, fnv1a(experiment_id));
  h = mix_seed(h, static_cast<std::uint64_t>(ensemble_size));
  h = mix_seed(h, static_cast<std::uint64_t>(seed_index));
  return h;
}

void parallel_for(int n, int threads, const std::function<void(int)>& task) {
  if (n <= 0) return;
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= n) break;
      try {
        task(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

double aggregate_values(const std::vector<double>& values, Aggregate agg) {
  double acc = 0.0;
  for (double v : values) {
    acc += agg == Aggregate::mean ? v : v * v;
  }
  acc /= static_cast<double>(values.size());
  return agg == Aggregate::mean ? acc : std::sqrt(acc);
}

std::pair<double, double> ols_log_log(const std::vector<std::pair<long, double>>& points) {
  const auto n = static_cast<double>(points.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [j, v] : points) {
    if (!(v > 0.0)) {
      throw DegenerateFit("fit_rate: aggregate metric must be positive");
    }
    const double x = std::log(static_cast<double>(j));
    const double y = std::log(v);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = n * sxx - sx * sx;
  if (std::abs(denom) < 1e-12) {
    throw DegenerateFit("fit_rate: degenerate J spread");
  }
  const double slope = (n * sxy - sx * sy) / denom;
  const double intercept = (sy - slope * sx) / n;
  return {slope, intercept};
}

}  // namespace

RateFit fit_rate_means(const std::vector<std::pair<long, double>>& means) {
  std::vector<long> distinct;
  for (const auto& [j, v] : means) {
    if (std::find(distinct.begin(), distinct.end(), j) == distinct.end()) {
      distinct.push_back(j);
    }
  }
  if (distinct.size() < 4) {
    throw DegenerateFit("fit_rate: need >= 4 distinct J values");
  }
  RateFit fit;
  auto [slope, intercept] = ols_log_log(means);
  fit.slope = slope;
  fit.intercept = intercept;
  for (const auto& [j, v] : means) {
    fit.per_j.push_back(PerJStat{j, v, 0.0, 1});
  }
  return fit;
}

RateFit fit_rate(const std::vector<TrialValue>& values, Aggregate aggregate,
                 std::uint64_t bootstrap_seed, int resamples) {
  if (values.empty()) {
    throw EmptyInput("fit_rate: no values");
  }
  // Group per J in first-appearance order (configs list J ascending).
  std::vector<long> j_order;
  std::vector<std::vector<double>> groups;
  for (const TrialValue& v : values) {
    auto it = std::find(j_order.begin(), j_order.end(), v.ensemble_size);
    if (it == j_order.end()) {
      j_order.push_back(v.ensemble_size);
      groups.emplace_back();
      it = j_order.end() - 1;
    }
    groups[static_cast<std::size_t>(it - j_order.begin())].push_back(v.value);
  }
  if (j_order.size() < 4) {
    throw DegenerateFit("fit_rate: need >= 4 distinct J values");
  }

  RateFit fit;
  std::vector<std::pair<long, double>> points;
  for (std::size_t g = 0; g < j_order.size(); ++g) {
    const double agg = aggregate_values(groups[g], aggregate);
    points.emplace_back(j_order[g], agg);
    // Stderr of the aggregate itself (delta method for rms).
    const auto n = static_cast<double>(groups[g].size());
    double mean = 0.0;
    for (double v : groups[g]) mean += (aggregate == Aggregate::mean ? v : v * v);
    mean /= n;
    double var = 0.0;
    for (double v : groups[g]) {
      const double x = (aggregate == Aggregate::mean ? v : v * v) - mean;
      var += x * x;
    }
    var /= std::max(1.0, n - 1.0);
    double se = std::sqrt(var / n);
    if (aggregate == Aggregate::rms && agg > 0.0) se /= 2.0 * agg;
    fit.per_j.push_back(
        PerJStat{j_order[g], agg, se, static_cast<int>(groups[g].size())});
  }
  auto [slope, intercept] = ols_log_log(points);
  fit.slope = slope;
  fit.intercept = intercept;

  // Seed bootstrap: resample seed indices (aligned across J) and refit.
  const std::size_t seeds = groups.front().size();
  for (const auto& g : groups) {
    if (g.size() != seeds) {
      throw DegenerateFit("fit_rate: seed counts differ across J");
    }
  }
  std::mt19937_64 rng(bootstrap_seed);
  std::uniform_int_distribution<std::size_t> pick(0, seeds - 1);
  double sum = 0.0, sum_sq = 0.0;
  int done = 0;
  for (int b = 0; b < resamples; ++b) {
    std::vector<std::size_t> idx(seeds);
    for (auto& i : idx) i = pick(rng);
    std::vector<std::pair<long, double>> boot_points;
    bool valid = true;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      std::vector<double> sample(seeds);
      for (std::size_t s = 0; s < seeds; ++s) sample[s] = groups[g][idx[s]];
      const double agg = aggregate_values(sample, aggregate);
      if (!(agg > 0.0)) {
        valid = false;
        break;
      }
      boot_points.emplace_back(j_order[g], agg);
    }
    if (!valid) continue;
    const double boot_slope = ols_log_log(boot_points).first;
    sum += boot_slope;
    sum_sq += boot_slope * boot_slope;
    ++done;
  }
  if (done > 1) {
    const double mean = sum / done;
    fit.slope_stderr =
        std::sqrt(std::max(0.0, (sum_sq / done - mean * mean) * done /
                                    (done - 1.0)));
  }
  return fit;
}

namespace {

// Rate fits need enough J values for a slope and enough seeds for the
// bootstrap to mean anything.
void require_rate_sweep(const ExperimentConfig& cfg) {
  if (cfg.solver.ensemble_sizes.size() < 4) {
    throw ConfigError(cfg.experiment_id + ": rate fits need >= 4 J values");
  }
  if (cfg.solver.seed_count < 8) {
    throw ConfigError(cfg.experiment_id + ": rate fits need >= 8 seeds");
  }
}

}  // namespace

ExperimentResult run_rate_experiment(const ExperimentConfig& cfg, int threads) {
  require_rate_sweep(cfg);
  const ForwardModel model = cfg.problem.build_model();
  if (!model.linear()) {
    throw NonlinearModel("rates: exact flow references require a linear model");
  }
  const Prior prior = cfg.problem.build_prior();
  const NoiseStream stream(cfg.solver.master_seed);
  const GaussianDensity flow =
      gaussian_flow(prior, model, cfg.solver.final_time);

  const auto& j_list = cfg.solver.ensemble_sizes;
  const int seeds = cfg.solver.seed_count;
  const int tasks = static_cast<int>(j_list.size()) * seeds;
  std::vector<double> values(tasks);

  parallel_for(tasks, threads, [&](int task) {
    const int ji = task / seeds;
    const int seed = task % seeds;
    const std::uint64_t trial =
        derive_trial(cfg.solver.master_seed, cfg.experiment_id, j_list[ji], seed);
    EkiRunConfig run;
    run.ensemble_size = j_list[ji];
    run.step = cfg.solver.h;
    run.final_time = cfg.solver.final_time;
    run.mode = cfg.solver.mode;
    run.trial = trial;
    try {
      const Ensemble terminal = run_eki(model, prior, run, stream);
      values[task] = measure_w2(terminal, flow, cfg.metric, stream, trial);
    } catch (const Diverged& d) {
      throw Diverged("rates: trial (J=" + std::to_string(j_list[ji]) +
                         ", seed=" + std::to_string(seed) +
                         ") diverged: " + d.what(),
                     d.step);
    }
  });

  const std::string metric_name =
      "w2_" + cfg.metric.w2 + (cfg.metric.squared ? "_sq" : "");
  ExperimentResult result;
  std::vector<TrialValue> trial_values;
  for (int task = 0; task < tasks; ++task) {
    const int ji = task / seeds;
    const int seed = task % seeds;
    result.rows.push_back(ResultRow{cfg.experiment_id, j_list[ji], seed,
                                    cfg.solver.final_time, metric_name,
                                    values[task]});
    trial_values.push_back(TrialValue{j_list[ji], seed, values[task]});
  }
  result.fit = fit_rate(trial_values, Aggregate::mean,
                        mix_seed(cfg.solver.master_seed, fnv1a("bootstrap")));
  result.report["experiment"] = cfg.experiment_id;
  result.report["metric"] = metric_name;
  append_fit_assertions(cfg, *result.fit, result);
  return result;
}

ExperimentResult run_posterior_check(const ExperimentConfig& cfg, int threads) {
  const ForwardModel model = cfg.problem.build_model();
  if (!model.linear()) {
    throw NonlinearModel("posterior-check: linear problems only");
  }
  const Prior prior = cfg.problem.build_prior();
  const NoiseStream stream(cfg.solver.master_seed);
  const GaussianDensity posterior = gaussian_flow(prior, model, 1.0);
  const int l = model.param_dim();

  const int ensemble_size = cfg.solver.ensemble_sizes.front();
  const int seeds = cfg.solver.seed_count;

  struct SeedStat {
    Vector mean;
    Vector var;
    double w2 = 0.0;
  };
  std::vector<SeedStat> stats(seeds);
  parallel_for(seeds, threads, [&](int seed) {
    const std::uint64_t trial = derive_trial(cfg.solver.master_seed,
                                             cfg.experiment_id, ensemble_size,
                                             seed);
    EkiRunConfig run;
    run.ensemble_size = ensemble_size;
    run.step = cfg.solver.h;
    run.final_time = cfg.solver.final_time;
    run.mode = cfg.solver.mode;
    run.trial = trial;
    const Ensemble terminal = run_eki(model, prior, run, stream);
    SeedStat s;
    s.mean = terminal.particles.rowwise().mean();
    const Matrix centered = terminal.particles.colwise() - s.mean;
    s.var = centered.array().square().rowwise().mean();
    MetricSpec w2_metric = cfg.metric;
    if (l != 1 && w2_metric.w2 == "semidiscrete") w2_metric.w2 = "gaussian";
    s.w2 = measure_w2(terminal, posterior, w2_metric, stream, trial);
    stats[seed] = std::move(s);
  });

  Vector mean_avg = Vector::Zero(l);
  Vector var_avg = Vector::Zero(l);
  double w2_avg = 0.0;
  ExperimentResult result;
  for (int seed = 0; seed < seeds; ++seed) {
    mean_avg += stats[seed].mean;
    var_avg += stats[seed].var;
    w2_avg += stats[seed].w2;
    result.rows.push_back(ResultRow{cfg.experiment_id, ensemble_size, seed, 1.0,
                                    "ensemble_mean_0", stats[seed].mean(0)});
    result.rows.push_back(ResultRow{cfg.experiment_id, ensemble_size, seed, 1.0,
                                    "ensemble_var_0", stats[seed].var(0)});
    result.rows.push_back(ResultRow{cfg.experiment_id, ensemble_size, seed, 1.0,
                                    "w2_vs_posterior", stats[seed].w2});
  }
  mean_avg /= seeds;
  var_avg /= seeds;
  w2_avg /= seeds;

  const Vector posterior_var = posterior.cov.matrix().diagonal();
  const double mean_err = (mean_avg - posterior.mean).cwiseAbs().maxCoeff();
  const double var_err = (var_avg - posterior_var).cwiseAbs().maxCoeff();
  result.report["seed_avg_mean_error"] = mean_err;
  result.report["seed_avg_var_error"] = var_err;
  result.report["seed_avg_w2"] = w2_avg;
  result.report["posterior_mean"] = to_std(posterior.mean);
  result.report["posterior_var"] = to_std(posterior_var);
  if (cfg.expect.mean_tol) {
    result.assertions_ok =
        result.assertions_ok && mean_err <= *cfg.expect.mean_tol;
  }
  if (cfg.expect.var_tol) {
    result.assertions_ok =
        result.assertions_ok && var_err <= *cfg.expect.var_tol;
  }

  // Discrete vs SDE under shared increments across the h sweep; the gap is
  // the terminal per-particle mean-square discrepancy.
  Json sweep = Json::array();
  for (double h : cfg.posterior.h_sweep) {
    const int sweep_seeds = std::min(cfg.posterior.sweep_seeds, seeds);
    double gap_acc = 0.0;
    std::vector<double> gaps(sweep_seeds);
    parallel_for(sweep_seeds, threads, [&](int seed) {
      const std::uint64_t trial =
          derive_trial(cfg.solver.master_seed, cfg.experiment_id + "/sweep",
                       ensemble_size, seed);
      EkiRunConfig run;
      run.ensemble_size = ensemble_size;
      run.step = h;
      run.final_time = cfg.solver.final_time;
      run.trial = trial;
      run.mode = EkiMode::discrete;
      const Ensemble discrete = run_eki(model, prior, run, stream);
      run.mode = EkiMode::sde;
      const Ensemble sde = run_eki(model, prior, run, stream);
      gaps[seed] = (discrete.particles - sde.particles).squaredNorm() /
                   discrete.size();
    });
    for (int seed = 0; seed < sweep_seeds; ++seed) {
      gap_acc += gaps[seed];
      result.rows.push_back(ResultRow{cfg.experiment_id, ensemble_size, seed,
                                      cfg.solver.final_time,
                                      "disc_sde_gap_h" + format_double(h),
                                      gaps[seed]});
    }
    sweep.push_back(Json{{"h", h}, {"gap", gap_acc / sweep_seeds}});
  }
  result.report["disc_sde_gap_sweep"] = sweep;

  // Single-step schedule: the classical one-shot analysis update (reported,
  // not asserted).
  {
    EkiRunConfig run;
    run.ensemble_size = ensemble_size;
    run.step = 1.0;
    run.final_time = 1.0;
    run.mode = EkiMode::discrete;
    run.trial = derive_trial(cfg.solver.master_seed,
                             cfg.experiment_id + "/oneshot", ensemble_size, 0);
    const Ensemble oneshot = run_eki(model, prior, run, stream);
    const Vector m = oneshot.particles.rowwise().mean();
    const Matrix centered = oneshot.particles.colwise() - m;
    result.report["one_shot_mean"] = to_std(m);
    result.report["one_shot_var"] =
        to_std(centered.array().square().rowwise().mean().matrix());
  }
  return result;
}

ExperimentResult run_coupling_experiment(const ExperimentConfig& cfg,
                                         int threads) {
  require_rate_sweep(cfg);
  const ForwardModel model = cfg.problem.build_model();
  if (!model.linear()) {
    throw NonlinearModel("coupling: linear problems only (exact flow stats)");
  }
  const Prior prior = cfg.problem.build_prior();
  const NoiseStream stream(cfg.solver.master_seed);
  const LinearFlowProvider flow(prior, model);

  const auto& j_list = cfg.solver.ensemble_sizes;
  const int seeds = cfg.solver.seed_count;
  const int tasks = static_cast<int>(j_list.size()) * seeds;
  std::vector<double> terminal_err(tasks);
  std::vector<double> initial_err(tasks);

  parallel_for(tasks, threads, [&](int task) {
    const int ji = task / seeds;
    const int seed = task % seeds;
    EkiRunConfig run;
    run.ensemble_size = j_list[ji];
    run.step = cfg.solver.h;
    run.final_time = cfg.solver.final_time;
    run.mode = EkiMode::sde;
    run.trial =
        derive_trial(cfg.solver.master_seed, cfg.experiment_id, j_list[ji], seed);
    const CoupledResult coupled = run_coupled(model, prior, run, flow, stream);
    terminal_err[task] = coupled.coupling_error.back();
    initial_err[task] = coupled.coupling_error.front();
  });

  ExperimentResult result;
  std::vector<TrialValue> trial_values;
  bool zero_start = true;
  for (int task = 0; task < tasks; ++task) {
    const int ji = task / seeds;
    const int seed = task % seeds;
    result.rows.push_back(ResultRow{cfg.experiment_id, j_list[ji], seed,
                                    cfg.solver.final_time, "coupling_mse",
                                    terminal_err[task]});
    trial_values.push_back(TrialValue{j_list[ji], seed, terminal_err[task]});
    zero_start = zero_start && initial_err[task] == 0.0;
  }
  result.fit = fit_rate(trial_values, Aggregate::mean,
                        mix_seed(cfg.solver.master_seed, fnv1a("bootstrap")));
  result.report["experiment"] = cfg.experiment_id;
  result.report["metric"] = "coupling_mse";
  result.report["initial_error_zero"] = zero_start;
  result.assertions_ok = result.assertions_ok && zero_start;
  append_fit_assertions(cfg, *result.fit, result);
  return result;
}

ExperimentResult run_weak_experiment(const ExperimentConfig& cfg, int threads) {
  require_rate_sweep(cfg);
  const ForwardModel model = cfg.problem.build_model();
  if (!model.linear()) {
    throw NonlinearModel("weak: analytic references require a linear model");
  }
  const Prior prior = cfg.problem.build_prior();
  const NoiseStream stream(cfg.solver.master_seed);
  const GaussianDensity flow =
      gaussian_flow(prior, model, cfg.solver.final_time);

  std::vector<TestFunction> fns;
  for (const std::string& name : cfg.metric.test_functions) {
    fns.push_back(make_test_function(name, flow));
  }

  const auto& j_list = cfg.solver.ensemble_sizes;
  const int seeds = cfg.solver.seed_count;
  const int tasks = static_cast<int>(j_list.size()) * seeds;
  Matrix errors(tasks, static_cast<int>(fns.size()));

  parallel_for(tasks, threads, [&](int task) {
    const int ji = task / seeds;
    const int seed = task % seeds;
    EkiRunConfig run;
    run.ensemble_size = j_list[ji];
    run.step = cfg.solver.h;
    run.final_time = cfg.solver.final_time;
    run.mode = cfg.solver.mode;
    run.trial =
        derive_trial(cfg.solver.master_seed, cfg.experiment_id, j_list[ji], seed);
    const Ensemble terminal = run_eki(model, prior, run, stream);
    for (std::size_t f = 0; f < fns.size(); ++f) {
      double acc = 0.0;
      for (int c = 0; c < terminal.size(); ++c) {
        acc += fns[f].fn(terminal.particles.col(c));
      }
      errors(task, static_cast<int>(f)) =
          acc / terminal.size() - fns[f].reference;
    }
  });

  ExperimentResult result;
  result.report["experiment"] = cfg.experiment_id;
  Json fn_report = Json::array();
  for (std::size_t f = 0; f < fns.size(); ++f) {
    std::vector<TrialValue> trial_values;
    for (int task = 0; task < tasks; ++task) {
      const int ji = task / seeds;
      const int seed = task % seeds;
      result.rows.push_back(ResultRow{
          cfg.experiment_id, j_list[ji], seed, cfg.solver.final_time,
          "weak_err_" + fns[f].name, errors(task, static_cast<int>(f))});
      trial_values.push_back(
          TrialValue{j_list[ji], seed, errors(task, static_cast<int>(f))});
    }
    RateFit fit =
        fit_rate(trial_values, Aggregate::rms,
                 mix_seed(cfg.solver.master_seed, fnv1a("bootstrap/" + fns[f].name)));
    fn_report.push_back(Json{{"function", fns[f].name},
                             {"reference", fns[f].reference},
                             {"slope", fit.slope},
                             {"slope_stderr", fit.slope_stderr}});
    if (f == 0) {
      append_fit_assertions(cfg, fit, result);
      result.fit = std::move(fit);
    }
  }
  result.report["functions"] = fn_report;
  result.report["metric"] = "weak_rmse";
  return result;
}

ExperimentResult run_residual_report(const ExperimentConfig& cfg,
                                     int threads) {
  if (cfg.problem.a.cols() > 4) {
    throw TooLarge("residuals: dim <= 4 only");
  }
  const Prior prior = cfg.problem.build_prior();
  const NoiseStream stream(cfg.solver.master_seed);
  const std::uint64_t probe_trial =
      derive_trial(cfg.solver.master_seed, cfg.experiment_id + "/probes", 0, 0);

  ExperimentResult result;
  result.report["experiment"] = cfg.experiment_id;
  Json table = Json::array();

  for (std::size_t ai = 0; ai < cfg.residuals.amplitudes.size(); ++ai) {
    const double amplitude = cfg.residuals.amplitudes[ai];
    ProblemSpec problem = cfg.problem;
    problem.nonlinearity.amplitude = amplitude;
    const ForwardModel model = problem.build_model();

    double max_r1 = 0.0, max_r2 = 0.0, max_r3 = 0.0, max_sum = 0.0;
    double mean_sum = 0.0;
    int count = 0;
    bool linear_identity_ok = true;

    if (model.linear()) {
      // Exact mu_t statistics; fully random (t, u) probes.
      for (int p = 0; p < cfg.residuals.probes; ++p) {
        const double t =
            stream.uniform(probe_trial, static_cast<std::uint64_t>(p), 0, 99);
        const Matrix draw =
            sample_gaussian(prior.mean, prior.cov, 1, stream, probe_trial,
                            static_cast<std::uint64_t>(p) + 1);
        const MuStats stats = mu_stats_linear(model, prior, t);
        const ResidualSample s =
            residual_terms(model, prior, t, draw.col(0), stats);
        const double total = std::abs(s.r1 + s.r2 + s.r3);
        max_r1 = std::max(max_r1, std::abs(s.r1));
        max_r2 = std::max(max_r2, std::abs(s.r2));
        max_r3 = std::max(max_r3, std::abs(s.r3));
        max_sum = std::max(max_sum, total);
        mean_sum += total;
        ++count;
        linear_identity_ok =
            linear_identity_ok && s.r3 == 0.0 && total <= 1e-8;
      }
      result.assertions_ok = result.assertions_ok && linear_identity_ok;
    } else {
      // SNIS statistics per grid time; probes drawn from the prior.
      const int probes_per_t = std::max(
          1, cfg.residuals.probes / static_cast<int>(cfg.residuals.t_grid.size()));
      std::vector<MuStats> stats_by_t(cfg.residuals.t_grid.size());
      parallel_for(static_cast<int>(cfg.residuals.t_grid.size()), threads,
                   [&](int ti) {
                     stats_by_t[ti] = mu_stats_snis(
                         model, prior, cfg.residuals.t_grid[ti],
                         cfg.residuals.snis_samples, stream,
                         mix_seed(probe_trial, static_cast<std::uint64_t>(ti)));
                   });
      for (std::size_t ti = 0; ti < cfg.residuals.t_grid.size(); ++ti) {
        const double t = cfg.residuals.t_grid[ti];
        for (int p = 0; p < probes_per_t; ++p) {
          const Matrix draw = sample_gaussian(
              prior.mean, prior.cov, 1, stream, probe_trial,
              1000 * (ti + 1) + static_cast<std::uint64_t>(p));
          const ResidualSample s =
              residual_terms(model, prior, t, draw.col(0), stats_by_t[ti]);
          const double total = std::abs(s.r1 + s.r2 + s.r3);
          max_r1 = std::max(max_r1, std::abs(s.r1));
          max_r2 = std::max(max_r2, std::abs(s.r2));
          max_r3 = std::max(max_r3, std::abs(s.r3));
          max_sum = std::max(max_sum, total);
          mean_sum += total;
          ++count;
        }
      }
    }
    mean_sum /= std::max(1, count);
    const std::string amp_tag = format_double(amplitude);
    result.rows.push_back(ResultRow{cfg.experiment_id, 0,
                                    static_cast<long>(ai), 0.0,
                                    "residual_max_sum_amp" + amp_tag, max_sum});
    result.rows.push_back(ResultRow{cfg.experiment_id, 0,
                                    static_cast<long>(ai), 0.0,
                                    "residual_max_r3_amp" + amp_tag, max_r3});
    table.push_back(Json{{"amplitude", amplitude},
                         {"max_r1", max_r1},
                         {"max_r2", max_r2},
                         {"max_r3", max_r3},
                         {"max_sum", max_sum},
                         {"mean_sum", mean_sum},
                         {"probes", count}});
  }
  result.report["residual_table"] = table;
  return result;
}

void write_outputs(const ExperimentResult& result, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream out(out_dir + "/results.csv", std::ios::binary);
    out << emit_csv(result.rows);
  }
  {
    Json fit_json = result.report;
    fit_json["assertions_ok"] = result.assertions_ok;
    if (result.fit) {
      Json per_j = Json::array();
      for (const PerJStat& s : result.fit->per_j) {
        per_j.push_back(Json{{"J", s.ensemble_size},
                             {"mean", s.mean},
                             {"stderr", s.stderr_of_mean},
                             {"n", s.count}});
      }
      fit_json["fit"] = Json{{"slope", result.fit->slope},
                             {"intercept", result.fit->intercept},
                             {"slope_stderr", result.fit->slope_stderr},
                             {"per_J", per_j}};
    }
    std::ofstream out(out_dir + "/fit.json", std::ios::binary);
    out << fit_json.dump(2) << "\n";
  }
  if (result.fit) {
    std::ofstream out(out_dir + "/plot.dat", std::ios::binary);
    for (const PerJStat& s : result.fit->per_j) {
      out << format_double(std::log10(static_cast<double>(s.ensemble_size)))
          << ' ' << format_double(std::log10(s.mean)) << '\n';
    }
  }
}

void export_trajectory_csv(const std::vector<Ensemble>& trajectory,
                           const std::string& path) {
  if (trajectory.empty()) {
    throw EmptyInput("export_trajectory_csv: empty trajectory");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("export_trajectory_csv: cannot open " + path);
  }
  const int dim = trajectory.front().dim();
  out << "step,t,particle";
  for (int d = 0; d < dim; ++d) out << ",coord_" << d;
  out << "\n";
  for (std::size_t step = 0; step < trajectory.size(); ++step) {
    const Ensemble& ens = trajectory[step];
    for (int j = 0; j < ens.size(); ++j) {
      out << step << ',' << format_double(ens.time) << ',' << j;
      for (int d = 0; d < dim; ++d) {
        out << ',' << format_double(ens.particles(d, j));
      }
      out << '\n';
    }
  }
}

}  // namespace ekimf
