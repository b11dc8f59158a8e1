#pragma once

#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stgm/errors.hpp"

namespace stgm {

/// Rectangular year x location x month grid of observations.
///
/// Locations are ordered upstream to downstream (strictly descending river
/// km). Months run 1..months(); a dataset may additionally carry a baseline
/// month 0 whose values only feed lagged model terms. Every (year, location,
/// month) cell exists; individual values may be missing.
class PanelDataset {
 public:
  PanelDataset() = default;
  PanelDataset(std::vector<int> year_labels, std::vector<double> location_km,
               int n_months, bool has_baseline);

  int years() const { return static_cast<int>(year_labels_.size()); }
  int locations() const { return static_cast<int>(location_km_.size()); }
  int months() const { return n_months_; }
  bool has_baseline() const { return has_baseline_; }
  int first_month() const { return has_baseline_ ? 0 : 1; }

  const std::vector<int>& year_labels() const { return year_labels_; }
  const std::vector<double>& location_km() const { return location_km_; }

  void add_variable(const std::string& name);
  bool has_variable(const std::string& name) const;
  std::vector<std::string> variables() const;

  /// Value of `name` at year index i (0-based), location index s (0-based,
  /// upstream first) and month t (first_month()..months()).
  std::optional<double> value(const std::string& name, int i, int s, int t) const;
  /// Like value() but throws MissingDataError when absent.
  double require(const std::string& name, int i, int s, int t) const;
  void set(const std::string& name, int i, int s, int t, double v);
  void clear(const std::string& name, int i, int s, int t);

  bool in_grid(int i, int s, int t) const {
    return i >= 0 && i < years() && s >= 0 && s < locations() && t >= first_month() && t <= n_months_;
  }

  /// Copy with the listed year indices removed (m shrinks).
  PanelDataset without_years(const std::set<int>& year_idx) const;
  /// Copy with years re-ordered by the given permutation of 0..m-1.
  PanelDataset with_year_order(const std::vector<int>& perm) const;

  // Variable registry. `outcome_var` is on the log2 scale in memory;
  // `exposure_var` holds the derived binary exposure, `exposure_raw_var` the
  // concentration it was cut from (absent for simulator-made data).
  std::string outcome_var;
  std::string exposure_var;
  std::string exposure_raw_var;
  std::vector<std::string> covariate_vars;
  /// True when the stored outcome column is already log2 (simulator output);
  /// save_csv() then writes it unchanged instead of undoing the transform.
  bool outcome_logged = false;

 private:
  std::size_t cell_index(int i, int s, int t) const;
  void check_cell(int i, int s, int t) const;

  std::vector<int> year_labels_;
  std::vector<double> location_km_;
  int n_months_ = 0;
  bool has_baseline_ = false;
  std::map<std::string, std::vector<std::optional<double>>> vars_;
  // Raw (pre-log2) outcome values kept so exports round-trip the input file.
  std::vector<std::optional<double>> outcome_raw_;
  friend PanelDataset load_csv(const std::string&, const struct CsvSchema&);
  friend void save_csv(const PanelDataset&, const std::string&);
};

/// Column mapping for load_csv. Columns not mentioned are ignored.
struct CsvSchema {
  std::string year_col = "year";
  std::string location_col = "location_km";
  std::string month_col = "month";
  std::string outcome_col;
  std::string exposure_col;  // raw concentration column; may be empty
  std::vector<std::string> covariate_cols;
  bool outcome_logged = false;  // outcome column is already log2-scaled
};

/// Reads a header-first CSV into a rectangular panel. Missing values are
/// empty fields or "NA"; rows absent from the file become missing cells.
/// The outcome is log2-transformed on load unless schema.outcome_logged.
PanelDataset load_csv(const std::string& path, const CsvSchema& schema);

/// Writes the panel back out; non-derived values round-trip bit-exactly.
void save_csv(const PanelDataset& data, const std::string& path);

/// Pooled-quantile cutpoint rule used to dichotomize the raw exposure.
struct CutpointRule {
  std::set<int> probe_months;  // empty = every month in the grid
  int s1 = 0;
  int s2 = 1;
  double quantile = 0.5;  // one of 0.25, 0.5, 0.75
  double cutpoint = std::numeric_limits<double>::quiet_NaN();  // derived
};

/// Sets a = 1 iff a_raw > cutpoint (strictly) at every cell where a_raw is
/// present. The cutpoint is the pooled sample quantile of a_raw at rule.s1
/// and rule.s2 over the probe months and is recorded in `rule`.
PanelDataset discretize_exposure(const PanelDataset& data, CutpointRule& rule);

struct ImputationRecord {
  int i, s, t;
  std::string variable;
  int rule;  // 1..3, or 0 when no rule applied
  std::optional<double> value;
};

struct ImputationLog {
  std::vector<ImputationRecord> records;
  int filled = 0;
  int unfilled = 0;
  std::string to_csv() const;
};

struct ImputationResult {
  PanelDataset data;
  ImputationLog log;
};

/// Fills missing values of `variable` by, in order: (1) mean of the
/// immediately upstream and downstream sites, same month; (2) mean of the
/// next-upstream and next-downstream sites, same month; (3) mean of the
/// prior and next month at the same site. Each rule needs both inputs and
/// reads only pre-imputation values, so the pass is order-independent.
/// Unfilled cells stay missing and are listed in the log.
ImputationResult impute_simple(const PanelDataset& data, const std::string& variable);

struct SpearmanRow {
  int s;
  double km;
  std::string variable;
  double rho;
  int n_pairs;
  bool skipped;  // fewer than 3 complete pairs
};

/// Spearman rank correlation between each upstream series and the outcome at
/// location sstar, pooling all (year, month) pairs. Locations with fewer
/// than 3 complete pairs are flagged skipped.
std::vector<SpearmanRow> spearman_screen(const PanelDataset& data, int sstar,
                                         const std::vector<std::string>& variables);

/// Sample quantile with linear interpolation between order statistics
/// (R type 7; the median of an even count is the midpoint).
double sample_quantile(std::vector<double> values, double q);

/// Spearman rho with average ranks for ties. Requires equal sizes >= 2.
double spearman_rho(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace stgm
