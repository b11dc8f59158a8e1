#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "stgm/errors.hpp"

namespace stgm {

/// Stacked estimating equations sum_i g(O_i, theta) = 0 for a p-vector
/// theta of target plus nuisance parameters. `contribution` must be
/// evaluable at perturbed theta so the bread can be differenced numerically;
/// an analytic `jacobian` (d g_i / d theta) takes precedence when set.
struct EstimatingStack {
  Eigen::VectorXd theta_hat;
  int m = 0;  // cluster count
  std::function<Eigen::VectorXd(int i, const Eigen::VectorXd& theta)> contribution;
  std::function<Eigen::MatrixXd(int i, const Eigen::VectorXd& theta)> jacobian;  // optional
  std::vector<std::string> names;

  int dim() const { return static_cast<int>(theta_hat.size()); }
};

/// Sandwich covariance of theta_hat with optional small-sample corrections.
struct CovarianceReport {
  Eigen::VectorXd theta_hat;
  int m = 0;
  Eigen::MatrixXd sigma;                      // A^-1 B A^-T / m
  std::map<double, Eigen::MatrixXd> sigma_bc; // keyed by the correction constant b
  Eigen::MatrixXd A_hat, B_hat;
  Eigen::MatrixXd A_inv;
  std::vector<Eigen::MatrixXd> A_i;  // per-cluster bread, kept for audit
  std::vector<Eigen::VectorXd> g_i;  // per-cluster scores at theta_hat
  std::vector<std::string> names;

  const Eigen::MatrixXd& variant(double b) const;  // b == 0 means uncorrected
  std::string to_csv() const;  // parameter, estimate, se_uncorrected, se_b...
};

/// Empirical sandwich: A = mean d g_i / d theta (central differences with
/// step 1e-6 * max(1, |theta_j|) unless stack.jacobian is set), B = mean of
/// g_i g_i'. Throws SingularBreadError when cond(A) exceeds 1e12.
CovarianceReport sandwich(const EstimatingStack& stack);

/// Adds the bias-corrected variant for the given b in (0,1): per cluster,
/// H_i = diag{ (1 - min(b, [A_i A^-1]_jj))^(-1/2) } inflates the meat as
/// H_i B_i H_i'. Entries of A_i A^-1 at or above 1 are clamped at b.
void fay_correct(const EstimatingStack& stack, CovarianceReport& report, double b);

/// Variances of a scalar transform of theta_hat: one value per covariance
/// variant in the report. The gradient is computed by central differences
/// unless supplied.
struct ScalarVariances {
  double uncorrected = 0.0;
  std::map<double, double> bc;
  double variant(double b) const;
};
ScalarVariances delta_method(const CovarianceReport& report,
                             const std::function<double(const Eigen::VectorXd&)>& transform,
                             const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& gradient = nullptr);

enum class Dist { normal, t };

struct WaldInterval {
  double estimate = 0.0;
  double se = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double p_value = 1.0;
};

/// Two-sided Wald interval and p-value for H0: value = 0. `df` is the
/// degrees of freedom of the t distribution (ignored for normal).
WaldInterval wald_ci(double estimate, double variance, double level, Dist dist, int df = 0);

}  // namespace stgm
