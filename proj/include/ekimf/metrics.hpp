#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ekimf/meanfield.hpp"

namespace ekimf {

enum class W2Method {
  sorted_1d,
  semidiscrete_1d,
  assignment,
  gaussian_closed_form,
};

struct W2Result {
  double value = 0.0;
  W2Method method = W2Method::sorted_1d;
  std::string note;  // cost-model note
};

/// W2 between two equal-size 1-D empirical measures: the optimal coupling is
/// monotone, so this is the RMS difference of sorted samples.
W2Result w2_sorted_1d(std::vector<double> a, std::vector<double> b);

/// Exact W2 between an n-point 1-D empirical measure and a continuous law
/// given by its quantile function:
///   W2^2 = sum_i int_{(i-1)/n}^{i/n} (x_(i) - F^{-1}(q))^2 dq,
/// each cell integrated with Gauss-Legendre quadrature of the given order.
W2Result w2_semidiscrete_1d(std::vector<double> sample,
                            const std::function<double(double)>& quantile,
                            int quad_order = 16);

/// Exact W2 between equal-size empirical measures in R^L via a minimum-cost
/// assignment on squared Euclidean distances (points are columns). O(n^3);
/// guarded at n <= 4096.
W2Result w2_assignment(const Matrix& a, const Matrix& b);

/// Closed-form Gaussian W2:
///   sqrt(|m1-m2|^2 + Tr(C1 + C2 - 2 (C2^{1/2} C1 C2^{1/2})^{1/2})).
W2Result w2_gaussian(const GaussianDensity& g1, const GaussianDensity& g2);

/// Exact minimum-cost assignment for a square cost matrix; returns the column
/// assigned to each row. Exposed so oracles can exercise it directly.
std::vector<int> solve_assignment(const Matrix& cost);

/// Gauss-Legendre nodes/weights on [-1,1].
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};
QuadratureRule gauss_legendre(int order);

/// RMS over seeds of the ensemble-average error of a test function:
///   sqrt(mean_seeds |(1/J) sum_j f(u^j) - reference|^2).
double weak_statistic(const std::vector<Ensemble>& ensembles,
                      const std::function<double(const Vector&)>& f,
                      double reference_expectation);

/// Moments of the interpolating density mu_t that the second-order residual
/// terms consume.
struct MuStats {
  Vector mean;          // E_mu
  Vector forward_mean;  // E_{G,mu}
  Matrix cov_ug;        // Cov_{mu,G}  (L x K)
  Matrix cov_gg;        // Cov_{G,G}   (K x K)
  double effective_sample_size = 0.0;  // for importance-sampled estimates
};

/// Exact mu_t statistics for a linear model via the closed-form flow.
MuStats mu_stats_linear(const ForwardModel& model, const Prior& prior,
                        double t);

/// Self-normalized importance sampling from the prior with weights
/// exp(-t Phi); for weakly nonlinear models with dim <= 4.
MuStats mu_stats_snis(const ForwardModel& model, const Prior& prior, double t,
                      long samples, const NoiseStream& stream,
                      std::uint64_t trial);

/// The three scalar weights by which the interpolating density fails the
/// flow equation, together with the first-order coefficient V(u) and the
/// second-derivative contraction W(u):
///   V(u) = t (grad G)^T Gamma^{-1} (y - G(u)) - C0^{-1} (u - u0)
///   W(u)_{:,i} = (d_i grad G)^T Gamma^{-1} (y - G(u))
/// For a linear model r3 == 0 identically and r1 + r2 + r3 == 0.
struct ResidualSample {
  double t = 0.0;
  Vector u;
  double r1 = 0.0;
  double r2 = 0.0;
  double r3 = 0.0;
  Vector v_coeff;   // V(u), length L
  Matrix w_coeff;   // W(u), L x L
};

ResidualSample residual_terms(const ForwardModel& model, const Prior& prior,
                              double t, const Vector& u, const MuStats& stats);

/// Empirical moment diagnostics of an ensemble, optionally against a flow
/// density: centered p-th moments, p-th moments about u_dagger, spectral-norm
/// covariance error and the covariance trace.
struct MomentReport {
  std::map<int, double> centered;      // p -> (1/J) sum |u^j - mean|^p
  std::map<int, double> about_point;   // p -> (1/J) sum |u^j - u_dagger|^p
  double cov_error = -1.0;             // ||Cov_ens - Cov_flow||_2, -1 if n/a
  double cov_trace = 0.0;
};

MomentReport moment_diagnostics(const Ensemble& ens,
                                const std::vector<int>& p_list,
                                const GaussianDensity* flow = nullptr,
                                const Vector* about = nullptr);

/// Monte Carlo check of the moment bound for sums of i.i.d. mean-zero
/// variables: estimates E|sum_j x_j|^p / J^{p/2} for each J.
enum class MeanZeroDist { uniform, normal, rademacher };

struct MomentRatioTable {
  int p = 0;
  std::vector<long> ensemble_sizes;
  std::vector<double> ratios;  // E|sum x|^p / J^{p/2}
  double max_over_min = 0.0;
};

MomentRatioTable appendix_moment_check(MeanZeroDist dist, int p,
                                       const std::vector<long>& j_list,
                                       long replicates,
                                       const NoiseStream& stream);

}  // namespace ekimf
