#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "stgm/glm.hpp"
#include "stgm/mestimate.hpp"
#include "stgm/panel.hpp"

namespace stgm {

/// Target contrast: set the binary exposure at the two upstream locations s1
/// and s2 to (1,1) versus (0,0) and average the downstream outcome at sstar
/// over the analysis months. Indices are upstream-to-downstream, so the
/// required ordering is s1 < s2 < sstar.
struct EstimandSpec {
  int s1 = 0;
  int s2 = 1;
  int sstar = 2;
  double level = 0.90;

  void validate(const PanelDataset& data) const;
};

/// Panel variables the default model specs are built from.
struct ModelVariables {
  std::string outcome = "y";
  std::string exposure = "a";
  std::vector<std::string> plain_covariates = {"l1"};  // not space-varying
  std::string space_covariate = "l2";                  // affected by upstream exposure
  bool interact_plain01 = false;  // add plain[0] x plain[1] to outcome/exposure models
};

/// Two-location working frame for one estimand: location 0 = s1, location
/// 1 = s2, with the outcome series projected from sstar onto location 1.
/// Model specs passed to the estimators are expressed in this frame.
PanelDataset build_estimand_view(const PanelDataset& data, const EstimandSpec& spec);

// --- positivity -------------------------------------------------------------

struct PositivityCell {
  int s, t;
  std::string stratum;  // "all" or "<var><half>"
  int n0 = 0, n1 = 0;
  bool violated = false;
};

struct PositivityReport {
  std::vector<PositivityCell> cells;
  std::vector<std::string> warnings;
  bool ok() const { return warnings.empty(); }
};

/// Counts both exposure levels at every in-scope (location, month), overall
/// and within median-split covariate strata; empty cells are flagged.
PositivityReport positivity_check(const PanelDataset& data, const EstimandSpec& spec,
                                  const ModelVariables& vars);

// --- reports ----------------------------------------------------------------

struct Diagnostics {
  bool converged = true;
  int weight_truncations = 0;
  double weight_min = 1.0, weight_max = 1.0, weight_mean = 1.0;
  int first_month = 1;  // first analysis month actually used
  std::vector<std::string> notes;
};

/// Point estimate of mu with the eight variance/interval variants
/// (uncorrected and b in {0.1, 0.3, 0.75}, each under normal and t(m)).
struct EstimateReport {
  std::string method;
  double mu_hat = 0.0;
  double level = 0.90;
  int m = 0;
  std::vector<std::pair<std::string, double>> components;
  std::map<std::string, WaldInterval> intervals;  // keyed by variant_key()
  Diagnostics diag;

  static std::string variant_key(double b, Dist dist);
  static const std::vector<double>& b_values();  // {0.1, 0.3, 0.75}
  const WaldInterval& interval(double b, Dist dist) const;
  std::string to_json() const;
};

// --- parametric g-formula ----------------------------------------------------

struct GformulaModels {
  ModelSpec outcome;    // gaussian; must hold exposure terms at (0,0) and (-1,0)
                        // and the space covariate at (0,0)
  ModelSpec covariate;  // gaussian model for the space covariate with an
                        // exposure term at (-1,0)
};

GformulaModels default_gformula_models(const ModelVariables& vars);

/// Fits both models by maximum likelihood and combines
/// mu = b1 + b2 + b4 * g3; the variance stacks both score sets and applies
/// the delta method with the analytic gradient.
EstimateReport gformula(const PanelDataset& data, const EstimandSpec& spec,
                        const GformulaModels& models, const ModelVariables& vars);

// --- marginal structural model -----------------------------------------------

struct WeightModels {
  ModelSpec num_s1, num_s2;  // exposure-history-only numerators
  ModelSpec den_s1, den_s2;  // full-history denominators
};

WeightModels default_weight_models(const ModelVariables& vars);

/// Stabilized inverse probability weights: per outcome row (i, t) the
/// product over locations j <= s and months k <= t of fitted
/// numerator/denominator density ratios at the observed exposures.
/// Denominator densities are floored at `floor_value` before the ratio.
struct WeightSet {
  Eigen::MatrixXd sw_s1, sw_s2;  // years x months(); sw_s2 weights the MSM rows
  FitResult num_s1, num_s2, den_s1, den_s2;
  int first_month = 1;  // first month with computable factors
  int truncation_count = 0;
  double floor_value = 1e-4;
  int months = 0;

  double weight(int i, int t) const { return sw_s2(i, t - 1); }
};

WeightSet stabilized_weights(const PanelDataset& data, const EstimandSpec& spec,
                             const WeightModels& models);

/// Independence-working weighted GEE of the outcome on per-month intercepts
/// and the two same-month exposures; mu = b1 + b2. The variance stack holds
/// all weight-model scores plus the weighted GEE equations, so uncertainty
/// from weight estimation propagates.
EstimateReport msm(const PanelDataset& data, const EstimandSpec& spec, const WeightSet& weights,
                   const ModelVariables& vars);

/// Unweighted version of the same regression; ignores space- and
/// time-varying confounding.
EstimateReport naive_gee(const PanelDataset& data, const EstimandSpec& spec,
                         const ModelVariables& vars);

// --- structural nested mean model ---------------------------------------------

struct SnmModels {
  ModelSpec lambda1;      // outcome mean given history before the s2 exposure
  ModelSpec lambda2;      // outcome mean given history before the s1 exposure
  ModelSpec exposure_s1;  // binomial model for a at s1 (full history)
  ModelSpec exposure_s2;  // binomial model for a at s2 (full history)
};

SnmModels default_snm_models(const ModelVariables& vars);

/// Per-cluster pieces of the closed-form G-estimator. B holds the exposure
/// residuals A - rho from the logistic fits; r0/r1 the outcome values and
/// a*_k the exposure values after removing each blip level's fitted history
/// mean (the lambda models applied to the transformed outcome, which is
/// linear in beta). The scalars C..H are the per-cluster sums the blip
/// coefficients solve from.
struct SnmBlocks {
  std::vector<int> months;
  Eigen::MatrixXd B1, B2;        // exposure residuals at s1, s2
  Eigen::MatrixXd r0, r1;        // history-centered outcome, level 1 and 2
  Eigen::MatrixXd a2_0;          // history-centered s2 exposure, level 1
  Eigen::MatrixXd a2_1, a1_1;    // history-centered exposures, level 2
  Eigen::VectorXd C, D, E, F, G, H;

  Eigen::Vector2d solve() const;  // closed form; throws DegenerateDenominatorError
  /// Value of the stacked estimating equations at beta (summed over clusters).
  Eigen::Vector2d equation(const Eigen::Vector2d& beta) const;
};

SnmBlocks snm_blocks(const PanelDataset& data, const EstimandSpec& spec, const SnmModels& models,
                     const ModelVariables& vars);

/// Closed-form G-estimation of the two blip coefficients; mu = b1 + b2.
/// The variance stacks outcome-model scores, exposure-model scores and the
/// estimating equations evaluated at the solution.
EstimateReport snm(const PanelDataset& data, const EstimandSpec& spec, const SnmModels& models,
                   const ModelVariables& vars);

/// Dispatch by method name: "gformula", "msm", "snm" or "gee", each with its
/// default model specs.
EstimateReport estimate(const std::string& method, const PanelDataset& data,
                        const EstimandSpec& spec, const ModelVariables& vars);

}  // namespace stgm
