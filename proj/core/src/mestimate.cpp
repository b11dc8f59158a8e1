#include "stgm/mestimate.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace stgm {

namespace {

constexpr double kFdScale = 1e-6;
constexpr double kMaxCondition = 1e12;

double fd_step(double theta_j) { return kFdScale * std::max(1.0, std::abs(theta_j)); }

Eigen::MatrixXd fd_jacobian(const EstimatingStack& stack, int i) {
  int p = stack.dim();
  Eigen::MatrixXd J(p, p);
  for (int j = 0; j < p; ++j) {
    double h = fd_step(stack.theta_hat(j));
    Eigen::VectorXd up = stack.theta_hat, dn = stack.theta_hat;
    up(j) += h;
    dn(j) -= h;
    J.col(j) = (stack.contribution(i, up) - stack.contribution(i, dn)) / (2.0 * h);
  }
  return J;
}

}  // namespace

const Eigen::MatrixXd& CovarianceReport::variant(double b) const {
  if (b == 0.0) return sigma;
  auto it = sigma_bc.find(b);
  if (it == sigma_bc.end()) throw Error("no bias-corrected variant for b=" + std::to_string(b));
  return it->second;
}

std::string CovarianceReport::to_csv() const {
  std::ostringstream out;
  out << "parameter,estimate,se_uncorrected";
  for (const auto& [b, s] : sigma_bc) out << ",se_b" << b;
  out << "\n";
  for (int j = 0; j < theta_hat.size(); ++j) {
    out << (j < static_cast<int>(names.size()) ? names[j] : "theta" + std::to_string(j)) << ","
        << theta_hat(j) << "," << std::sqrt(sigma(j, j));
    for (const auto& [b, s] : sigma_bc) out << "," << std::sqrt(s(j, j));
    out << "\n";
  }
  return out.str();
}

CovarianceReport sandwich(const EstimatingStack& stack) {
  if (stack.m < 2) throw Error("sandwich needs at least two clusters");
  int p = stack.dim();

  CovarianceReport rep;
  rep.theta_hat = stack.theta_hat;
  rep.m = stack.m;
  rep.names = stack.names;
  rep.A_hat = Eigen::MatrixXd::Zero(p, p);
  rep.B_hat = Eigen::MatrixXd::Zero(p, p);
  rep.A_i.reserve(stack.m);
  rep.g_i.reserve(stack.m);

  for (int i = 0; i < stack.m; ++i) {
    Eigen::VectorXd g = stack.contribution(i, stack.theta_hat);
    Eigen::MatrixXd A = stack.jacobian ? stack.jacobian(i, stack.theta_hat) : fd_jacobian(stack, i);
    rep.g_i.push_back(g);
    rep.A_i.push_back(A);
    rep.A_hat += A;
    rep.B_hat += g * g.transpose();
  }
  rep.A_hat /= stack.m;
  rep.B_hat /= stack.m;

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(rep.A_hat, Eigen::ComputeThinU | Eigen::ComputeThinV);
  double smax = svd.singularValues()(0);
  double smin = svd.singularValues()(p - 1);
  double cond = smin > 0 ? smax / smin : std::numeric_limits<double>::infinity();
  if (!(cond < kMaxCondition))
    throw SingularBreadError("bread matrix is numerically singular (condition number " +
                                 std::to_string(cond) + ")",
                             cond);
  rep.A_inv = svd.solve(Eigen::MatrixXd::Identity(p, p));

  Eigen::MatrixXd sigma = rep.A_inv * rep.B_hat * rep.A_inv.transpose() / stack.m;
  rep.sigma = 0.5 * (sigma + sigma.transpose());
  return rep;
}

void fay_correct(const EstimatingStack& stack, CovarianceReport& report, double b) {
  if (!(b > 0.0 && b < 1.0)) throw ValueError("bias-correction constant b must be in (0,1)");
  if (report.sigma_bc.count(b)) return;
  int p = stack.dim();

  Eigen::MatrixXd B_bc = Eigen::MatrixXd::Zero(p, p);
  for (int i = 0; i < stack.m; ++i) {
    Eigen::MatrixXd W = report.A_i[i] * report.A_inv;
    Eigen::VectorXd h(p);
    for (int j = 0; j < p; ++j) {
      // the index is a per-cluster information share; rank-deficient cluster
      // breads can push the raw value outside [0,1), so clamp both sides
      double share = std::clamp(W(j, j), 0.0, b);
      h(j) = 1.0 / std::sqrt(1.0 - share);
    }
    Eigen::VectorXd hg = h.asDiagonal() * report.g_i[i];
    B_bc += hg * hg.transpose();
  }
  B_bc /= stack.m;

  Eigen::MatrixXd sigma = report.A_inv * B_bc * report.A_inv.transpose() / stack.m;
  report.sigma_bc[b] = 0.5 * (sigma + sigma.transpose());
}

double ScalarVariances::variant(double b) const {
  if (b == 0.0) return uncorrected;
  auto it = bc.find(b);
  if (it == bc.end()) throw Error("no delta-method variant for b=" + std::to_string(b));
  return it->second;
}

ScalarVariances delta_method(const CovarianceReport& report,
                             const std::function<double(const Eigen::VectorXd&)>& transform,
                             const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& gradient) {
  int p = static_cast<int>(report.theta_hat.size());
  Eigen::VectorXd grad(p);
  if (gradient) {
    grad = gradient(report.theta_hat);
  } else {
    for (int j = 0; j < p; ++j) {
      double h = fd_step(report.theta_hat(j));
      Eigen::VectorXd up = report.theta_hat, dn = report.theta_hat;
      up(j) += h;
      dn(j) -= h;
      grad(j) = (transform(up) - transform(dn)) / (2.0 * h);
    }
  }
  ScalarVariances out;
  out.uncorrected = grad.dot(report.sigma * grad);
  for (const auto& [b, s] : report.sigma_bc) out.bc[b] = grad.dot(s * grad);
  return out;
}

WaldInterval wald_ci(double estimate, double variance, double level, Dist dist, int df) {
  if (variance < 0.0) throw NegativeVarianceError("negative variance " + std::to_string(variance));
  if (!(level > 0.0 && level < 1.0)) throw ValueError("confidence level must be in (0,1)");

  WaldInterval w;
  w.estimate = estimate;
  w.se = std::sqrt(variance);
  if (variance == 0.0) {
    w.lower = w.upper = estimate;
    w.p_value = estimate == 0.0 ? 1.0 : 0.0;
    return w;
  }
  double q, cdf_abs_z;
  double z = std::abs(estimate) / w.se;
  if (dist == Dist::normal) {
    boost::math::normal_distribution<double> d;
    q = boost::math::quantile(d, 0.5 * (1.0 + level));
    cdf_abs_z = boost::math::cdf(d, z);
  } else {
    if (df < 1) throw ValueError("t distribution needs df >= 1");
    boost::math::students_t_distribution<double> d(df);
    q = boost::math::quantile(d, 0.5 * (1.0 + level));
    cdf_abs_z = boost::math::cdf(d, z);
  }
  w.lower = estimate - q * w.se;
  w.upper = estimate + q * w.se;
  w.p_value = 2.0 * (1.0 - cdf_abs_z);
  return w;
}

}  // namespace stgm
