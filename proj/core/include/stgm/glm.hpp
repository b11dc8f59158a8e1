#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stgm/panel.hpp"

namespace stgm {

/// Reference to a panel variable relative to a model row: space_offset 0 is
/// the row's location, -1 the one upstream; time_offset 0 is the same month,
/// -1 the prior month. Offsets outside {0, -1} are rejected.
struct VarRef {
  std::string variable;
  int space_offset = 0;
  int time_offset = 0;

  std::string name() const;
  bool operator==(const VarRef&) const = default;
};

/// A model term: a variable reference, optionally multiplied by a partner
/// reference (a two-way interaction).
struct TermSpec {
  VarRef var;
  std::optional<VarRef> partner;

  std::string name() const;
  bool operator==(const TermSpec&) const = default;
};

inline TermSpec term(std::string variable, int space_offset = 0, int time_offset = 0) {
  return {{std::move(variable), space_offset, time_offset}, std::nullopt};
}

enum class Family { gaussian, binomial };
enum class InterceptKind { single, per_month };

/// Rows a model is fit on: all years, months month_begin..month_end, with
/// response and terms anchored at location anchor_loc.
struct FitRows {
  int anchor_loc = 0;
  int month_begin = 1;
  int month_end = -1;  // -1 = through the last month
};

struct ModelSpec {
  Family family = Family::gaussian;
  TermSpec response;
  std::vector<TermSpec> predictors;
  InterceptKind intercept = InterceptKind::single;
  FitRows rows;

  void validate(const PanelDataset& data) const;
  std::string to_json() const;
  static ModelSpec from_json(const std::string& text);
};

/// Design matrix and bookkeeping for one model over a panel.
struct Design {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  Eigen::VectorXd w;                       // unit when no weights supplied
  std::vector<int> cluster;                // year index per row
  std::vector<std::pair<int, int>> row_it; // (year index, month) per row
  std::vector<std::string> colnames;
  int n_clusters = 0;
  int n_intercepts = 0;
  int dropped_rows = 0;  // rows skipped for out-of-grid lags or missing values
};

/// Per-row weight lookup by (year index, month); an empty function means
/// unit weights.
using RowWeightFn = std::function<double(int i, int t)>;

Design build_design(const PanelDataset& data, const ModelSpec& spec,
                    const RowWeightFn& weights = nullptr);

/// Re-evaluable per-cluster estimating-function contributions of one fitted
/// model, used to stack models for sandwich variances.
class ScoreFunction {
 public:
  enum class Kind {
    gaussian_ml,   // likelihood scores for (beta, sigma2)
    binomial_ml,   // likelihood scores for beta
    gaussian_gee   // independence working GEE: sum w x (y - x'beta)
  };

  ScoreFunction(Kind kind, Design design, int n_clusters);

  int param_count() const;
  int cluster_count() const { return n_clusters_; }
  Kind kind() const { return kind_; }
  const Design& design() const { return design_; }

  /// Contribution of cluster ci to the estimating equations at theta.
  /// gaussian_ml expects theta = (beta..., sigma2); the others just beta.
  Eigen::VectorXd cluster_score(int ci, const Eigen::VectorXd& theta) const;

 private:
  Kind kind_;
  Design design_;
  int n_clusters_;
  std::vector<std::vector<int>> rows_by_cluster_;
};

struct FitResult {
  Eigen::VectorXd coef;  // intercepts first, then predictors in spec order
  std::vector<std::string> coef_names;
  double dispersion = 0.0;  // ML (1/n) residual variance; gaussian only
  bool converged = true;
  int iterations = 0;
  int n_rows = 0;
  int dropped_rows = 0;
  std::vector<Eigen::VectorXd> cluster_scores;  // at the fitted parameters
  std::shared_ptr<const ScoreFunction> score;

  /// Parameter vector the score function expects (appends dispersion for
  /// gaussian ML scores).
  Eigen::VectorXd score_theta() const;
  std::string to_csv() const;  // term,estimate
};

/// Weighted Gaussian maximum likelihood (least squares). Throws
/// SingularDesignError naming the collinear terms, EmptyDataError when no
/// usable rows remain.
FitResult fit_linear(const PanelDataset& data, const ModelSpec& spec,
                     const RowWeightFn& weights = nullptr);

/// Bernoulli maximum likelihood via iteratively reweighted least squares.
/// Tolerance 1e-8 on the max coefficient change, at most 25 iterations;
/// coefficients past 30 on the logit scale are treated as separation.
FitResult fit_logistic(const PanelDataset& data, const ModelSpec& spec,
                       const RowWeightFn& weights = nullptr);

struct PredictedRow {
  int i, t;
  double value;
};

/// Linear predictor (gaussian) or inverse-logit probability (binomial) for
/// every row in spec.rows. Throws MissingDataError naming (i, s, t, variable)
/// when a predictor is unavailable.
std::vector<PredictedRow> predict(const FitResult& fit, const PanelDataset& data,
                                  const ModelSpec& spec);

double expit(double x);

}  // namespace stgm
