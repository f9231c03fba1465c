#include "ekimf/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>

namespace ekimf {

W2Result w2_sorted_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) {
    throw EmptyInput("w2_sorted_1d: empty sample");
  }
  if (a.size() != b.size()) {
    throw SizeMismatch("w2_sorted_1d: samples must have equal size");
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return W2Result{std::sqrt(sum / static_cast<double>(a.size())),
                  W2Method::sorted_1d, "monotone coupling of sorted samples"};
}

QuadratureRule gauss_legendre(int order) {
  if (order < 1) {
    throw std::invalid_argument("gauss_legendre: order must be >= 1");
  }
  QuadratureRule rule;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  for (int i = 0; i < (order + 1) / 2; ++i) {
    // Newton iteration on P_n from the Chebyshev-based initial guess.
    double x = std::cos(M_PI * (i + 0.75) / (order + 0.5));
    double deriv = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = 0.0;
      for (int k = 0; k < order; ++k) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * k + 1.0) * x * p1 - k * p2) / (k + 1.0);
      }
      deriv = order * (x * p0 - p1) / (x * x - 1.0);
      const double dx = p0 / deriv;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    rule.nodes[i] = -x;
    rule.nodes[order - 1 - i] = x;
    const double w = 2.0 / ((1.0 - x * x) * deriv * deriv);
    rule.weights[i] = w;
    rule.weights[order - 1 - i] = w;
  }
  return rule;
}

namespace {

double gl_panel(double lo, double hi, double atom, const QuadratureRule& rule,
                const std::function<double(double)>& quantile) {
  const double mid = 0.5 * (lo + hi);
  const double half = 0.5 * (hi - lo);
  double acc = 0.0;
  for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
    const double d = atom - quantile(mid + half * rule.nodes[q]);
    acc += rule.weights[q] * d * d;
  }
  return half * acc;
}

// Quantile functions of unbounded laws blow up (integrably) at 0 and 1, so
// the two outermost cells are split into panels shrinking geometrically
// toward the endpoint before applying the rule.
double gl_cell(double lo, double hi, double atom, bool refine_left,
               bool refine_right, const QuadratureRule& rule,
               const std::function<double(double)>& quantile) {
  // Deep enough that the singular panel's mass is negligible, shallow enough
  // that quadrature points stay representable away from 0 and 1.
  constexpr int kPanels = 30;
  if (!refine_left && !refine_right) {
    return gl_panel(lo, hi, atom, rule, quantile);
  }
  if (refine_left && refine_right) {
    const double mid = 0.5 * (lo + hi);
    return gl_cell(lo, mid, atom, true, false, rule, quantile) +
           gl_cell(mid, hi, atom, false, true, rule, quantile);
  }
  double acc = 0.0;
  double width = (hi - lo) * 0.5;
  if (refine_right) {
    double left = lo;
    for (int p = 0; p < kPanels; ++p) {
      const double right = (p + 1 == kPanels) ? hi : left + width;
      acc += gl_panel(left, right, atom, rule, quantile);
      left = right;
      width *= 0.5;
    }
  } else {
    double right = hi;
    for (int p = 0; p < kPanels; ++p) {
      const double left = (p + 1 == kPanels) ? lo : right - width;
      acc += gl_panel(left, right, atom, rule, quantile);
      right = left;
      width *= 0.5;
    }
  }
  return acc;
}

}  // namespace

W2Result w2_semidiscrete_1d(std::vector<double> sample,
                            const std::function<double(double)>& quantile,
                            int quad_order) {
  if (sample.empty()) {
    throw EmptyInput("w2_semidiscrete_1d: empty sample");
  }
  if (quad_order < 2) {
    throw std::invalid_argument("w2_semidiscrete_1d: quadrature order >= 2");
  }
  std::sort(sample.begin(), sample.end());
  const QuadratureRule rule = gauss_legendre(quad_order);
  const auto n = sample.size();
  const double cell = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lo = static_cast<double>(i) * cell;
    const double hi = (i + 1 == n) ? 1.0 : lo + cell;
    total += gl_cell(lo, hi, sample[i], i == 0, i + 1 == n, rule, quantile);
  }
  return W2Result{std::sqrt(total), W2Method::semidiscrete_1d,
                  "per-cell Gauss-Legendre order " + std::to_string(quad_order)};
}

std::vector<int> solve_assignment(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) {
    throw SizeMismatch("solve_assignment: cost matrix must be square");
  }
  if (n == 0) {
    throw EmptyInput("solve_assignment: empty cost matrix");
  }
  const double inf = std::numeric_limits<double>::infinity();
  // Successive shortest augmenting paths with dual potentials (O(n^3)).
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> min_slack(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < min_slack[j]) {
          min_slack[j] = cur;
          way[j] = j0;
        }
        if (min_slack[j] < delta) {
          delta = min_slack[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          min_slack[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j) {
    row_to_col[match[j] - 1] = j - 1;
  }
  return row_to_col;
}

W2Result w2_assignment(const Matrix& a, const Matrix& b) {
  if (a.cols() == 0 || b.cols() == 0) {
    throw EmptyInput("w2_assignment: empty point set");
  }
  if (a.cols() != b.cols() || a.rows() != b.rows()) {
    throw SizeMismatch("w2_assignment: point sets must match in size and dim");
  }
  const int n = static_cast<int>(a.cols());
  if (n > 4096) {
    throw TooLarge("w2_assignment: n > 4096 not supported");
  }
  Matrix cost(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      cost(i, j) = (a.col(i) - b.col(j)).squaredNorm();
    }
  }
  const std::vector<int> assign = solve_assignment(cost);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    total += cost(i, assign[i]);
  }
  return W2Result{std::sqrt(std::max(0.0, total / n)), W2Method::assignment,
                  "exact min-cost assignment, squared Euclidean cost"};
}

W2Result w2_gaussian(const GaussianDensity& g1, const GaussianDensity& g2) {
  if (g1.mean.size() != g2.mean.size()) {
    throw SizeMismatch("w2_gaussian: dimension mismatch");
  }
  const Matrix& c1 = g1.cov.matrix();
  const Matrix& c2 = g2.cov.matrix();
  Eigen::SelfAdjointEigenSolver<Matrix> es2(c2);
  const Matrix sqrt_c2 = es2.operatorSqrt();
  Eigen::SelfAdjointEigenSolver<Matrix> es_mid(sqrt_c2 * c1 * sqrt_c2);
  const double cross = es_mid.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double trace_part = c1.trace() + c2.trace() - 2.0 * cross;
  const double sq = (g1.mean - g2.mean).squaredNorm() + trace_part;
  return W2Result{std::sqrt(std::max(0.0, sq)),
                  W2Method::gaussian_closed_form, "Gaussian closed form"};
}

double weak_statistic(const std::vector<Ensemble>& ensembles,
                      const std::function<double(const Vector&)>& f,
                      double reference_expectation) {
  if (ensembles.empty()) {
    throw EmptyInput("weak_statistic: no ensembles");
  }
  double acc = 0.0;
  for (const Ensemble& ens : ensembles) {
    double mean_f = 0.0;
    for (int j = 0; j < ens.size(); ++j) {
      mean_f += f(ens.particles.col(j));
    }
    mean_f /= ens.size();
    const double err = mean_f - reference_expectation;
    acc += err * err;
  }
  return std::sqrt(acc / static_cast<double>(ensembles.size()));
}

MuStats mu_stats_linear(const ForwardModel& model, const Prior& prior,
                        double t) {
  const GaussianDensity flow = gaussian_flow(prior, model, t);
  MuStats stats;
  stats.mean = flow.mean;
  stats.forward_mean = model.a() * flow.mean;
  stats.cov_ug = flow.cov.matrix() * model.a().transpose();
  stats.cov_gg = model.a() * stats.cov_ug;
  stats.effective_sample_size = std::numeric_limits<double>::infinity();
  return stats;
}

MuStats mu_stats_snis(const ForwardModel& model, const Prior& prior, double t,
                      long samples, const NoiseStream& stream,
                      std::uint64_t trial) {
  if (model.param_dim() > 4) {
    throw TooLarge("mu_stats_snis: dim <= 4 only");
  }
  if (samples < 2) {
    throw std::invalid_argument("mu_stats_snis: need at least 2 samples");
  }
  const int l = model.param_dim();
  const int k = model.obs_dim();

  // Two passes in blocks: first find the max log-weight for stability, then
  // accumulate self-normalized moments.
  constexpr long kBlock = 8192;
  double max_logw = -std::numeric_limits<double>::infinity();
  for (long start = 0; start < samples; start += kBlock) {
    const long n = std::min(kBlock, samples - start);
    const Matrix u = sample_gaussian(prior.mean, prior.cov, static_cast<int>(n),
                                     stream, trial, start / kBlock);
    for (long i = 0; i < n; ++i) {
      max_logw = std::max(max_logw, -t * model.loss(u.col(i)));
    }
  }

  double wsum = 0.0, w2sum = 0.0;
  Vector sum_u = Vector::Zero(l);
  Vector sum_g = Vector::Zero(k);
  Matrix sum_ug = Matrix::Zero(l, k);
  Matrix sum_gg = Matrix::Zero(k, k);
  for (long start = 0; start < samples; start += kBlock) {
    const long n = std::min(kBlock, samples - start);
    const Matrix u = sample_gaussian(prior.mean, prior.cov, static_cast<int>(n),
                                     stream, trial, start / kBlock);
    const Matrix g = model.apply_all(u);
    for (long i = 0; i < n; ++i) {
      const double w =
          std::exp(-t * 0.5 *
                       model.gamma().quad_form_inv(model.y() - g.col(i)) -
                   max_logw);
      wsum += w;
      w2sum += w * w;
      sum_u += w * u.col(i);
      sum_g += w * g.col(i);
      sum_ug.noalias() += w * (u.col(i) * g.col(i).transpose());
      sum_gg.noalias() += w * (g.col(i) * g.col(i).transpose());
    }
  }
  MuStats stats;
  stats.mean = sum_u / wsum;
  stats.forward_mean = sum_g / wsum;
  stats.cov_ug =
      sum_ug / wsum - stats.mean * stats.forward_mean.transpose();
  stats.cov_gg =
      sum_gg / wsum - stats.forward_mean * stats.forward_mean.transpose();
  stats.effective_sample_size = wsum * wsum / w2sum;
  return stats;
}

ResidualSample residual_terms(const ForwardModel& model, const Prior& prior,
                              double t, const Vector& u, const MuStats& stats) {
  ResidualSample sample;
  sample.t = t;
  sample.u = u;

  const Matrix jac = model.jacobian(u);          // K x L
  const Vector resid = model.y() - model.apply(u);
  const Vector ginv_resid = model.gamma().solve(resid);

  sample.v_coeff =
      t * (jac.transpose() * ginv_resid) - prior.cov.solve(u - prior.mean);
  sample.w_coeff = model.hessian_contraction(u, ginv_resid);

  const Matrix b = model.gamma().solve(stats.cov_ug.transpose()).transpose();
  const Matrix d = b * stats.cov_ug.transpose();  // L x L

  const Matrix jac_gram = jac.transpose() * model.gamma().solve(jac);
  sample.r1 = 0.5 * model.gamma().solve(stats.cov_gg).trace() -
              (jac * b).trace() +
              0.5 * (d * (t * jac_gram + prior.cov.inverse())).trace();

  const Vector mean_resid = model.y() - stats.forward_mean;
  sample.r2 = 0.5 * model.gamma().quad_form_inv(mean_resid) -
              0.5 * model.gamma().quad_form_inv(resid) +
              ginv_resid.dot(stats.cov_ug.transpose() * sample.v_coeff) -
              0.5 * sample.v_coeff.dot(d * sample.v_coeff);

  sample.r3 = -0.5 * t * (d * sample.w_coeff).trace();
  return sample;
}

MomentReport moment_diagnostics(const Ensemble& ens,
                                const std::vector<int>& p_list,
                                const GaussianDensity* flow,
                                const Vector* about) {
  for (int p : p_list) {
    if (p <= 0 || p % 2 != 0 || p > 8) {
      throw std::invalid_argument(
          "moment_diagnostics: moments must be even and <= 8");
    }
  }
  MomentReport report;
  const int j = ens.size();
  const Vector mean = ens.particles.rowwise().mean();
  const Matrix centered = ens.particles.colwise() - mean;
  const Matrix cov = centered * centered.transpose() / j;
  report.cov_trace = cov.trace();

  for (int p : p_list) {
    double acc = 0.0;
    for (int c = 0; c < j; ++c) {
      acc += std::pow(centered.col(c).squaredNorm(), p / 2.0);
    }
    report.centered[p] = acc / j;
    if (about != nullptr) {
      double acc_pt = 0.0;
      for (int c = 0; c < j; ++c) {
        acc_pt +=
            std::pow((ens.particles.col(c) - *about).squaredNorm(), p / 2.0);
      }
      report.about_point[p] = acc_pt / j;
    }
  }
  if (flow != nullptr) {
    const Matrix diff = cov - flow->cov.matrix();
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (diff + diff.transpose()));
    report.cov_error = es.eigenvalues().cwiseAbs().maxCoeff();
  }
  return report;
}

MomentRatioTable appendix_moment_check(MeanZeroDist dist, int p,
                                       const std::vector<long>& j_list,
                                       long replicates,
                                       const NoiseStream& stream) {
  if (p <= 0 || p % 2 != 0) {
    throw std::invalid_argument("appendix_moment_check: p must be even");
  }
  if (j_list.empty() || replicates < 1) {
    throw EmptyInput("appendix_moment_check: empty configuration");
  }
  auto draw = [&](std::uint64_t rep, std::uint64_t idx) {
    switch (dist) {
      case MeanZeroDist::uniform:
        return 2.0 * stream.uniform(rep, idx, 0, 0) - 1.0;
      case MeanZeroDist::normal:
        return stream.normal(rep, idx, 0, 0);
      case MeanZeroDist::rademacher:
        return stream.uniform(rep, idx, 0, 0) < 0.5 ? -1.0 : 1.0;
    }
    return 0.0;
  };

  MomentRatioTable table;
  table.p = p;
  table.ensemble_sizes = j_list;
  table.ratios.reserve(j_list.size());
  for (long j : j_list) {
    double acc = 0.0;
    for (long rep = 0; rep < replicates; ++rep) {
      double s = 0.0;
      for (long i = 0; i < j; ++i) {
        s += draw(static_cast<std::uint64_t>(rep),
                  static_cast<std::uint64_t>(i));
      }
      acc += std::pow(std::abs(s), p);
    }
    const double moment = acc / static_cast<double>(replicates);
    table.ratios.push_back(moment /
                           std::pow(static_cast<double>(j), p / 2.0));
  }
  const auto [lo, hi] =
      std::minmax_element(table.ratios.begin(), table.ratios.end());
  table.max_over_min = *hi / *lo;
  return table;
}

}  // namespace ekimf
