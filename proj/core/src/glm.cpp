#include "stgm/glm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace stgm {

namespace {
constexpr double kIrlsTol = 1e-8;
constexpr int kIrlsMaxIter = 25;
constexpr double kSeparationBound = 30.0;
constexpr double kMuEps = 1e-10;
}  // namespace

double expit(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

std::string VarRef::name() const {
  std::string n = variable;
  if (space_offset != 0) n += "[s" + std::to_string(space_offset) + "]";
  if (time_offset != 0) n += "[t" + std::to_string(time_offset) + "]";
  return n;
}

std::string TermSpec::name() const {
  return partner ? var.name() + "*" + partner->name() : var.name();
}

void ModelSpec::validate(const PanelDataset& data) const {
  auto check_ref = [&](const VarRef& r) {
    if (r.space_offset > 0 || r.space_offset < -1 || r.time_offset > 0 || r.time_offset < -1)
      throw SpecError("offsets of '" + r.variable + "' must be 0 or -1");
    if (!data.has_variable(r.variable)) throw SpecError("unknown model variable '" + r.variable + "'");
  };
  check_ref(response.var);
  if (response.partner) throw SpecError("response cannot be an interaction");
  for (std::size_t j = 0; j < predictors.size(); ++j) {
    check_ref(predictors[j].var);
    if (predictors[j].partner) check_ref(*predictors[j].partner);
    for (std::size_t k = j + 1; k < predictors.size(); ++k)
      if (predictors[j] == predictors[k])
        throw SpecError("duplicate predictor term '" + predictors[j].name() + "'");
  }
  if (intercept == InterceptKind::per_month && data.months() < 2)
    throw SpecError("per-month intercepts need at least two months");
  if (rows.anchor_loc < 0 || rows.anchor_loc >= data.locations())
    throw SpecError("anchor location outside the grid");
}

namespace {

using nlohmann::json;

json ref_to_json(const VarRef& r) {
  return json{{"variable", r.variable}, {"space", r.space_offset}, {"time", r.time_offset}};
}

VarRef ref_from_json(const json& j) {
  return VarRef{j.at("variable").get<std::string>(), j.value("space", 0), j.value("time", 0)};
}

}  // namespace

std::string ModelSpec::to_json() const {
  json terms = json::array();
  for (const auto& t : predictors) {
    json jt = ref_to_json(t.var);
    if (t.partner) jt["partner"] = ref_to_json(*t.partner);
    terms.push_back(jt);
  }
  json j{{"family", family == Family::gaussian ? "gaussian" : "binomial"},
         {"response", ref_to_json(response.var)},
         {"terms", terms},
         {"intercept", intercept == InterceptKind::single ? "single" : "per_month"},
         {"rows", {{"anchor", rows.anchor_loc}, {"month_begin", rows.month_begin}, {"month_end", rows.month_end}}}};
  return j.dump(2);
}

ModelSpec ModelSpec::from_json(const std::string& text) {
  json j = json::parse(text);
  ModelSpec spec;
  auto fam = j.at("family").get<std::string>();
  if (fam == "gaussian")
    spec.family = Family::gaussian;
  else if (fam == "binomial")
    spec.family = Family::binomial;
  else
    throw SpecError("unknown family '" + fam + "'");
  spec.response.var = ref_from_json(j.at("response"));
  for (const auto& jt : j.at("terms")) {
    TermSpec t;
    t.var = ref_from_json(jt);
    if (jt.contains("partner")) t.partner = ref_from_json(jt.at("partner"));
    spec.predictors.push_back(t);
  }
  auto ic = j.value("intercept", "single");
  spec.intercept = ic == "per_month" ? InterceptKind::per_month : InterceptKind::single;
  if (j.contains("rows")) {
    spec.rows.anchor_loc = j["rows"].value("anchor", 0);
    spec.rows.month_begin = j["rows"].value("month_begin", 1);
    spec.rows.month_end = j["rows"].value("month_end", -1);
  }
  return spec;
}

namespace {

// Value of one variable reference at row (i, anchor, t); nullopt covers both
// out-of-grid lags and missing cells, with `outside` telling them apart.
std::optional<double> ref_value(const PanelDataset& data, const VarRef& r, int i, int anchor, int t,
                                bool* outside) {
  int s = anchor + r.space_offset;
  int tt = t + r.time_offset;
  if (!data.in_grid(i, s, tt)) {
    if (outside) *outside = true;
    return std::nullopt;
  }
  return data.value(r.variable, i, s, tt);
}

std::optional<double> term_value(const PanelDataset& data, const TermSpec& term, int i, int anchor,
                                 int t, bool* outside) {
  auto v = ref_value(data, term.var, i, anchor, t, outside);
  if (!v) return std::nullopt;
  if (!term.partner) return v;
  auto p = ref_value(data, *term.partner, i, anchor, t, outside);
  if (!p) return std::nullopt;
  return *v * *p;
}

}  // namespace

Design build_design(const PanelDataset& data, const ModelSpec& spec, const RowWeightFn& weights) {
  spec.validate(data);
  int month_end = spec.rows.month_end < 0 ? data.months() : spec.rows.month_end;
  int n_months = month_end - spec.rows.month_begin + 1;
  if (n_months < 1) throw SpecError("empty month range");

  int n_int = spec.intercept == InterceptKind::single ? 1 : n_months;
  int p = n_int + static_cast<int>(spec.predictors.size());

  std::vector<Eigen::VectorXd> rows;
  Design d;
  d.n_intercepts = n_int;
  d.n_clusters = data.years();
  if (spec.intercept == InterceptKind::single) {
    d.colnames.push_back("(intercept)");
  } else {
    for (int t = spec.rows.month_begin; t <= month_end; ++t)
      d.colnames.push_back("(intercept t=" + std::to_string(t) + ")");
  }
  for (const auto& term : spec.predictors) d.colnames.push_back(term.name());

  std::vector<double> ys, ws;
  for (int i = 0; i < data.years(); ++i)
    for (int t = spec.rows.month_begin; t <= month_end; ++t) {
      bool outside = false;
      auto yv = term_value(data, spec.response, i, spec.rows.anchor_loc, t, &outside);
      Eigen::VectorXd x = Eigen::VectorXd::Zero(p);
      if (spec.intercept == InterceptKind::single)
        x(0) = 1.0;
      else
        x(t - spec.rows.month_begin) = 1.0;
      bool ok = yv.has_value();
      for (std::size_t j = 0; ok && j < spec.predictors.size(); ++j) {
        auto v = term_value(data, spec.predictors[j], i, spec.rows.anchor_loc, t, &outside);
        if (!v)
          ok = false;
        else
          x(n_int + static_cast<int>(j)) = *v;
      }
      if (!ok) {
        ++d.dropped_rows;
        continue;
      }
      double w = weights ? weights(i, t) : 1.0;
      if (std::isnan(w)) {  // undefined weight: row unusable
        ++d.dropped_rows;
        continue;
      }
      rows.push_back(x);
      ys.push_back(*yv);
      ws.push_back(w);
      d.cluster.push_back(i);
      d.row_it.emplace_back(i, t);
    }

  d.X.resize(static_cast<Eigen::Index>(rows.size()), p);
  d.y.resize(static_cast<Eigen::Index>(rows.size()));
  d.w.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    d.X.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
    d.y(static_cast<Eigen::Index>(r)) = ys[r];
    d.w(static_cast<Eigen::Index>(r)) = ws[r];
  }
  return d;
}

ScoreFunction::ScoreFunction(Kind kind, Design design, int n_clusters)
    : kind_(kind), design_(std::move(design)), n_clusters_(n_clusters) {
  rows_by_cluster_.assign(n_clusters_, {});
  for (Eigen::Index r = 0; r < design_.X.rows(); ++r)
    rows_by_cluster_[design_.cluster[static_cast<std::size_t>(r)]].push_back(static_cast<int>(r));
}

int ScoreFunction::param_count() const {
  int p = static_cast<int>(design_.X.cols());
  return kind_ == Kind::gaussian_ml ? p + 1 : p;
}

Eigen::VectorXd ScoreFunction::cluster_score(int ci, const Eigen::VectorXd& theta) const {
  int p = static_cast<int>(design_.X.cols());
  Eigen::VectorXd g = Eigen::VectorXd::Zero(param_count());
  const auto& rows = rows_by_cluster_.at(ci);
  switch (kind_) {
    case Kind::gaussian_ml: {
      double sigma2 = theta(p);
      Eigen::VectorXd beta = theta.head(p);
      for (int r : rows) {
        double res = design_.y(r) - design_.X.row(r).dot(beta);
        double w = design_.w(r);
        g.head(p) += w * res / sigma2 * design_.X.row(r).transpose();
        g(p) += w * (res * res / (2.0 * sigma2 * sigma2) - 1.0 / (2.0 * sigma2));
      }
      break;
    }
    case Kind::binomial_ml: {
      for (int r : rows) {
        double mu = expit(design_.X.row(r).dot(theta));
        g += design_.w(r) * (design_.y(r) - mu) * design_.X.row(r).transpose();
      }
      break;
    }
    case Kind::gaussian_gee: {
      for (int r : rows) {
        double res = design_.y(r) - design_.X.row(r).dot(theta);
        g += design_.w(r) * res * design_.X.row(r).transpose();
      }
      break;
    }
  }
  return g;
}

namespace {

// Weighted least squares with a rank check; names the collinear columns.
Eigen::VectorXd wls_solve(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          const Eigen::VectorXd& w, const std::vector<std::string>& colnames) {
  Eigen::VectorXd sw = w.array().sqrt();
  Eigen::MatrixXd Xw = sw.asDiagonal() * X;
  Eigen::VectorXd yw = sw.asDiagonal() * y;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
  qr.setThreshold(1e-10);
  if (qr.rank() < X.cols()) {
    std::string bad;
    auto perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < X.cols(); ++k) {
      if (!bad.empty()) bad += ", ";
      bad += colnames[static_cast<std::size_t>(perm(k))];
    }
    throw SingularDesignError("singular design; collinear terms: " + bad);
  }
  return qr.solve(yw);
}

FitResult finish_fit(const ModelSpec& spec, Design design, Eigen::VectorXd beta, bool converged,
                     int iterations, int n_clusters) {
  FitResult fit;
  fit.coef = std::move(beta);
  fit.coef_names = design.colnames;
  fit.converged = converged;
  fit.iterations = iterations;
  fit.n_rows = static_cast<int>(design.X.rows());
  fit.dropped_rows = design.dropped_rows;

  ScoreFunction::Kind kind;
  if (spec.family == Family::gaussian) {
    Eigen::VectorXd res = design.y - design.X * fit.coef;
    double wsum = design.w.sum();
    fit.dispersion = (design.w.array() * res.array().square()).sum() / wsum;
    kind = ScoreFunction::Kind::gaussian_ml;
  } else {
    kind = ScoreFunction::Kind::binomial_ml;
  }
  fit.score = std::make_shared<ScoreFunction>(kind, std::move(design), n_clusters);
  Eigen::VectorXd theta = fit.score_theta();
  for (int ci = 0; ci < n_clusters; ++ci) fit.cluster_scores.push_back(fit.score->cluster_score(ci, theta));
  return fit;
}

}  // namespace

Eigen::VectorXd FitResult::score_theta() const {
  if (score && score->kind() == ScoreFunction::Kind::gaussian_ml) {
    Eigen::VectorXd theta(coef.size() + 1);
    theta << coef, dispersion;
    return theta;
  }
  return coef;
}

std::string FitResult::to_csv() const {
  std::ostringstream out;
  out << "term,estimate\n";
  for (Eigen::Index j = 0; j < coef.size(); ++j) out << coef_names[static_cast<std::size_t>(j)] << "," << coef(j) << "\n";
  return out.str();
}

FitResult fit_linear(const PanelDataset& data, const ModelSpec& spec, const RowWeightFn& weights) {
  if (spec.family != Family::gaussian) throw SpecError("fit_linear expects a gaussian model");
  Design design = build_design(data, spec, weights);
  if (design.X.rows() == 0) throw EmptyDataError("no usable rows for '" + spec.response.name() + "' model");
  Eigen::VectorXd beta = wls_solve(design.X, design.y, design.w, design.colnames);
  return finish_fit(spec, std::move(design), std::move(beta), true, 1, data.years());
}

FitResult fit_logistic(const PanelDataset& data, const ModelSpec& spec, const RowWeightFn& weights) {
  if (spec.family != Family::binomial) throw SpecError("fit_logistic expects a binomial model");
  Design design = build_design(data, spec, weights);
  if (design.X.rows() == 0) throw EmptyDataError("no usable rows for '" + spec.response.name() + "' model");
  for (Eigen::Index r = 0; r < design.y.size(); ++r)
    if (design.y(r) != 0.0 && design.y(r) != 1.0)
      throw SpecError("binomial response must be 0/1, got " + std::to_string(design.y(r)));

  int p = static_cast<int>(design.X.cols());
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);

  auto loglik = [&](const Eigen::VectorXd& b) {
    double ll = 0;
    for (Eigen::Index r = 0; r < design.y.size(); ++r) {
      double eta = design.X.row(r).dot(b);
      // log(p) or log(1-p) written to stay finite for large |eta|
      double lse = eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
      ll += design.w(r) * (design.y(r) * eta - lse);
    }
    return ll;
  };

  double ll_old = loglik(beta);
  bool converged = false;
  int iter = 0;
  for (; iter < kIrlsMaxIter; ++iter) {
    Eigen::VectorXd irls_w(design.y.size()), z(design.y.size());
    for (Eigen::Index r = 0; r < design.y.size(); ++r) {
      double eta = design.X.row(r).dot(beta);
      double mu = std::clamp(expit(eta), kMuEps, 1.0 - kMuEps);
      double v = mu * (1.0 - mu);
      irls_w(r) = design.w(r) * v;
      z(r) = eta + (design.y(r) - mu) / v;
    }
    Eigen::VectorXd proposal = wls_solve(design.X, z, irls_w, design.colnames);
    double ll_new = loglik(proposal);
    int halvings = 0;
    while (ll_new < ll_old && halvings < 10) {
      proposal = 0.5 * (beta + proposal);
      ll_new = loglik(proposal);
      ++halvings;
    }
    double delta = (proposal - beta).cwiseAbs().maxCoeff();
    beta = proposal;
    ll_old = ll_new;
    if (beta.cwiseAbs().maxCoeff() > kSeparationBound)
      throw ConvergenceError("logistic fit diverged (separation suspected) for '" +
                             spec.response.name() + "' model");
    if (delta < kIrlsTol) {
      converged = true;
      ++iter;
      break;
    }
  }
  if (!converged)
    throw ConvergenceError("logistic fit did not converge in " + std::to_string(kIrlsMaxIter) +
                           " iterations for '" + spec.response.name() + "' model");
  return finish_fit(spec, std::move(design), std::move(beta), true, iter, data.years());
}

std::vector<PredictedRow> predict(const FitResult& fit, const PanelDataset& data,
                                  const ModelSpec& spec) {
  spec.validate(data);
  int month_end = spec.rows.month_end < 0 ? data.months() : spec.rows.month_end;
  int n_int = spec.intercept == InterceptKind::single ? 1 : month_end - spec.rows.month_begin + 1;
  if (fit.coef.size() != n_int + static_cast<Eigen::Index>(spec.predictors.size()))
    throw SpecError("fit and spec have different parameter counts");

  std::vector<PredictedRow> out;
  for (int i = 0; i < data.years(); ++i)
    for (int t = spec.rows.month_begin; t <= month_end; ++t) {
      double eta = spec.intercept == InterceptKind::single ? fit.coef(0)
                                                           : fit.coef(t - spec.rows.month_begin);
      for (std::size_t j = 0; j < spec.predictors.size(); ++j) {
        const auto& term = spec.predictors[j];
        auto v = term_value(data, term, i, spec.rows.anchor_loc, t, nullptr);
        if (!v)
          throw MissingDataError("predictor '" + term.name() + "' unavailable at (year " +
                                 std::to_string(i) + ", location " +
                                 std::to_string(spec.rows.anchor_loc) + ", month " +
                                 std::to_string(t) + ")");
        eta += fit.coef(n_int + static_cast<Eigen::Index>(j)) * *v;
      }
      out.push_back({i, t, spec.family == Family::binomial ? expit(eta) : eta});
    }
  return out;
}

}  // namespace stgm
