#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stgm/gmethods.hpp"
#include "stgm/panel.hpp"

namespace stgm {

/// Structural data-generating process over three locations: covariates and a
/// binary exposure at the two upstream sites, the outcome at the third. Each
/// year draws a baseline month 0 and then months 1..n_months in causal order
/// l1(s1) -> a(s1) -> l1(s2) -> l2(s2) -> a(s2) -> y. Normal parameters are
/// (mean, sd).
struct DgpConfig {
  // month 0 baselines
  double l1_s1_base_mean = 21.5, l1_s1_base_sd = 2.5;
  double l2_base_mean = -2.8, l2_base_sd = 0.7;
  double a_base_p = 0.1;
  double y_base_mean = 2.25, y_base_sd = 1.25;
  // l1 at s1: N(const + lag*l1[t-1], sd)
  double l1_s1_const = 23.0, l1_s1_lag = 0.2, l1_s1_sd = 2.0;
  // a at s1: Bern(expit(const + l1*l1_s1[t] + alag*a_s1[t-1]))
  double a1_const = -2.5, a1_l1 = 0.09, a1_alag = 0.025;
  // l1 at s2: N(const + l1lag*l1_s1[t-1], sd)
  double l1_s2_const = 6.75, l1_s2_l1lag = 0.75, l1_s2_sd = 1.0;
  // l2 at s2: N(const + l1*l1_s2[t] + lag*l2[t-1] + a1*a_s1[t], sd)
  double l2_const = 2.0, l2_l1 = -0.04, l2_lag = 0.04, l2_a1 = 0.3, l2_sd = 0.25;
  // a at s2: Bern(expit(const + l1*l1_s2[t] + l2*l2[t] + a1*a_s1[t] + alag*a_s2[t-1]))
  double a2_const = -2.5, a2_l1 = 0.09, a2_l2 = 0.1, a2_a1 = 0.05, a2_alag = 0.025;
  // y at s3: N(const + a2*a_s2[t] + a1*a_s1[t] + l1*l1_s2[t] + l2*l2[t] + ylag*y[t-1], sd)
  double y_const = -5.0, y_a2 = 1.0, y_a1 = 0.5, y_l1 = 0.025, y_l2 = 0.5, y_ylag = 0.35,
         y_sd = 1.0;

  int n_months = 3;

  void validate() const;
  /// Copy with every exposure pathway into the outcome switched off.
  DgpConfig null_effect() const;
  std::string to_json() const;
};

/// Simulates m independent years; identical (config, m, seed) give
/// bit-identical datasets. Variables are "y", "a", "l1", "l2".
PanelDataset simulate_dataset(const DgpConfig& config, int m, std::uint64_t seed);

/// The causal contrast implied by the linear DGP: y_a2 + y_a1 + y_l2 * l2_a1.
double true_mu(const DgpConfig& config);

struct StudyConfig {
  std::vector<int> m_values = {10, 15, 20, 25, 30};
  int replicates = 2000;
  std::uint64_t base_seed = 20120901;
  std::vector<std::string> methods = {"gformula", "msm", "snm", "gee"};
  double level = 0.90;
  int threads = 1;

  void validate() const;
};

struct StudyCell {
  std::string method;
  int m = 0;
  std::string ci_variant;
  double mean_abs_bias = 0.0;  // |mean(mu_hat) - mu|, the Monte Carlo bias estimate
  double coverage = 0.0;
  double mean_width = 0.0;
  int failures = 0;
  int successes = 0;
};

struct StudySummary {
  std::vector<StudyCell> cells;
  double true_mu = 0.0;
  std::uint64_t base_seed = 0;
  int replicates = 0;
  std::string rng_algorithm;

  const StudyCell& cell(const std::string& method, int m, const std::string& variant) const;
  std::string to_csv() const;
  std::string metadata_json() const;
};

/// Bias/coverage study: for each m and replicate, simulate with the stream
/// seed derived from (base_seed, m, replicate), run every method with its
/// default model specs, and aggregate bias, CI coverage of true mu, mean CI
/// width and failure counts per (method, m, variant). Replicates run in
/// parallel when threads > 1; results are identical either way.
StudySummary run_study(const DgpConfig& dgp, const StudyConfig& study);

}  // namespace stgm
