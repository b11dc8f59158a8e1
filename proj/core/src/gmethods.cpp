#include "stgm/gmethods.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace stgm {

void EstimandSpec::validate(const PanelDataset& data) const {
  if (!(0 <= s1 && s1 < s2 && s2 < sstar && sstar < data.locations()))
    throw SpecError("estimand needs s1 < s2 < sstar inside the grid (upstream order)");
  if (!(level > 0.0 && level < 1.0)) throw SpecError("confidence level must be in (0,1)");
}

PanelDataset build_estimand_view(const PanelDataset& data, const EstimandSpec& spec) {
  spec.validate(data);
  if (data.outcome_var.empty()) throw SchemaError("no outcome variable registered");
  if (data.exposure_var.empty()) throw SchemaError("exposure has not been discretized");

  PanelDataset view({data.year_labels()}, {data.location_km()[spec.s1], data.location_km()[spec.s2]},
                    data.months(), data.has_baseline());
  view.outcome_var = data.outcome_var;
  view.exposure_var = data.exposure_var;
  view.exposure_raw_var = data.exposure_raw_var;
  view.covariate_vars = data.covariate_vars;
  view.outcome_logged = true;  // already on the analysis scale

  std::vector<std::string> vars;
  vars.push_back(data.exposure_var);
  if (!data.exposure_raw_var.empty()) vars.push_back(data.exposure_raw_var);
  for (const auto& c : data.covariate_vars) vars.push_back(c);
  for (const auto& v : vars) view.add_variable(v);
  view.add_variable(data.outcome_var);

  const int src[2] = {spec.s1, spec.s2};
  for (int i = 0; i < data.years(); ++i)
    for (int t = data.first_month(); t <= data.months(); ++t) {
      for (int s = 0; s < 2; ++s)
        for (const auto& v : vars)
          if (auto x = data.value(v, i, src[s], t)) view.set(v, i, s, t, *x);
      if (auto y = data.value(data.outcome_var, i, spec.sstar, t))
        view.set(data.outcome_var, i, 1, t, *y);
    }
  return view;
}

// --- positivity ---------------------------------------------------------------

namespace {

PositivityReport positivity_check_view(const PanelDataset& view, const ModelVariables& vars) {
  PositivityReport rep;
  std::vector<std::string> strata_vars = vars.plain_covariates;
  if (!vars.space_covariate.empty()) strata_vars.push_back(vars.space_covariate);

  for (int s = 0; s < view.locations(); ++s)
    for (int t = 1; t <= view.months(); ++t) {
      auto count = [&](auto&& keep) {
        PositivityCell c{s, t, "all", 0, 0, false};
        for (int i = 0; i < view.years(); ++i) {
          auto a = view.value(vars.exposure, i, s, t);
          if (!a || !keep(i)) continue;
          (*a > 0.5 ? c.n1 : c.n0) += 1;
        }
        return c;
      };
      auto overall = count([](int) { return true; });
      if ((overall.n0 == 0) != (overall.n1 == 0)) {
        overall.violated = true;
        rep.warnings.push_back("exposure constant at (location " + std::to_string(s) + ", month " +
                               std::to_string(t) + ")");
      }
      rep.cells.push_back(overall);

      for (const auto& v : strata_vars) {
        if (!view.has_variable(v)) continue;
        std::vector<double> xs;
        for (int i = 0; i < view.years(); ++i)
          if (auto x = view.value(v, i, s, t)) xs.push_back(*x);
        if (xs.size() < 4) continue;
        double med = sample_quantile(xs, 0.5);
        for (int half = 0; half < 2; ++half) {
          auto cell = count([&](int i) {
            auto x = view.value(v, i, s, t);
            return x && ((half == 0) ? (*x <= med) : (*x > med));
          });
          cell.stratum = v + (half == 0 ? "<=med" : ">med");
          if ((cell.n0 == 0) != (cell.n1 == 0)) {
            cell.violated = true;
            rep.warnings.push_back("exposure constant within " + cell.stratum + " at (location " +
                                   std::to_string(s) + ", month " + std::to_string(t) + ")");
          }
          rep.cells.push_back(cell);
        }
      }
    }
  return rep;
}

}  // namespace

PositivityReport positivity_check(const PanelDataset& data, const EstimandSpec& spec,
                                  const ModelVariables& vars) {
  return positivity_check_view(build_estimand_view(data, spec), vars);
}

// --- report plumbing -----------------------------------------------------------

const std::vector<double>& EstimateReport::b_values() {
  static const std::vector<double> bs{0.1, 0.3, 0.75};
  return bs;
}

std::string EstimateReport::variant_key(double b, Dist dist) {
  std::string v = b == 0.0 ? "uncorrected" : "b" + std::to_string(b).substr(0, b == 0.75 ? 4 : 3);
  return v + (dist == Dist::normal ? "_normal" : "_t");
}

const WaldInterval& EstimateReport::interval(double b, Dist dist) const {
  return intervals.at(variant_key(b, dist));
}

std::string EstimateReport::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  j["mu_hat"] = mu_hat;
  j["level"] = level;
  j["m"] = m;
  for (const auto& [k, v] : components) j["components"][k] = v;
  for (const auto& [k, w] : intervals)
    j["intervals"][k] = {{"se", w.se}, {"lower", w.lower}, {"upper", w.upper}, {"p", w.p_value}};
  j["diagnostics"] = {{"converged", diag.converged},
                      {"weight_truncations", diag.weight_truncations},
                      {"weight_min", diag.weight_min},
                      {"weight_max", diag.weight_max},
                      {"weight_mean", diag.weight_mean},
                      {"first_month", diag.first_month},
                      {"notes", diag.notes}};
  return j.dump(2);
}

namespace {

int predictor_index(const ModelSpec& spec, int n_intercepts, const std::string& variable,
                    int space_offset, int time_offset) {
  for (std::size_t k = 0; k < spec.predictors.size(); ++k) {
    const auto& t = spec.predictors[k];
    if (!t.partner && t.var.variable == variable && t.var.space_offset == space_offset &&
        t.var.time_offset == time_offset)
      return n_intercepts + static_cast<int>(k);
  }
  throw SpecError("model lacks required term '" + variable + "' at offset (" +
                  std::to_string(space_offset) + "," + std::to_string(time_offset) + ")");
}

EstimateReport finalize_report(std::string method, double level, int m, const EstimatingStack& stack,
                               const std::function<double(const Eigen::VectorXd&)>& transform,
                               const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& gradient,
                               std::vector<std::pair<std::string, double>> components,
                               Diagnostics diag) {
  EstimateReport out;
  out.method = std::move(method);
  out.level = level;
  out.m = m;
  out.mu_hat = transform(stack.theta_hat);
  out.components = std::move(components);
  out.diag = std::move(diag);

  CovarianceReport cov = sandwich(stack);
  for (double b : EstimateReport::b_values()) fay_correct(stack, cov, b);
  ScalarVariances var = delta_method(cov, transform, gradient);

  std::vector<double> bs{0.0};
  bs.insert(bs.end(), EstimateReport::b_values().begin(), EstimateReport::b_values().end());
  for (double b : bs)
    for (Dist dist : {Dist::normal, Dist::t})
      out.intervals[EstimateReport::variant_key(b, dist)] =
          wald_ci(out.mu_hat, var.variant(b), level, dist, m);
  return out;
}

std::vector<TermSpec> plain_terms(const ModelVariables& v, int space_offset) {
  std::vector<TermSpec> out;
  for (const auto& c : v.plain_covariates) out.push_back(term(c, space_offset, 0));
  return out;
}

void maybe_add_interaction(std::vector<TermSpec>& terms, const ModelVariables& v, int space_offset) {
  if (v.interact_plain01 && v.plain_covariates.size() >= 2) {
    TermSpec t = term(v.plain_covariates[0], space_offset, 0);
    t.partner = VarRef{v.plain_covariates[1], space_offset, 0};
    terms.push_back(t);
  }
}

struct Prep {
  PanelDataset view;
  Diagnostics diag;
};

Prep prepare(const PanelDataset& data, const EstimandSpec& spec, const ModelVariables& vars) {
  Prep p{build_estimand_view(data, spec), {}};
  auto pos = positivity_check_view(p.view, vars);
  for (const auto& w : pos.warnings) p.diag.notes.push_back("positivity: " + w);
  return p;
}

}  // namespace

// --- parametric g-formula -------------------------------------------------------

GformulaModels default_gformula_models(const ModelVariables& v) {
  GformulaModels m;
  m.outcome.family = Family::gaussian;
  m.outcome.response = term(v.outcome);
  m.outcome.predictors = {term(v.exposure, 0, 0), term(v.exposure, -1, 0)};
  for (auto& t : plain_terms(v, 0)) m.outcome.predictors.push_back(t);
  m.outcome.predictors.push_back(term(v.space_covariate, 0, 0));
  m.outcome.predictors.push_back(term(v.outcome, 0, -1));
  maybe_add_interaction(m.outcome.predictors, v, 0);
  m.outcome.rows = {1, 1, -1};

  m.covariate.family = Family::gaussian;
  m.covariate.response = term(v.space_covariate);
  for (auto& t : plain_terms(v, 0)) m.covariate.predictors.push_back(t);
  m.covariate.predictors.push_back(term(v.space_covariate, 0, -1));
  m.covariate.predictors.push_back(term(v.exposure, -1, 0));
  m.covariate.rows = {1, 1, -1};
  return m;
}

EstimateReport gformula(const PanelDataset& data, const EstimandSpec& spec,
                        const GformulaModels& models, const ModelVariables& vars) {
  Prep prep = prepare(data, spec, vars);

  FitResult out_fit = fit_linear(prep.view, models.outcome);
  FitResult cov_fit = fit_linear(prep.view, models.covariate);
  if (out_fit.dropped_rows > 0 || cov_fit.dropped_rows > 0)
    prep.diag.notes.push_back("dropped rows (missing values or unavailable lags): outcome " +
                              std::to_string(out_fit.dropped_rows) + ", covariate " +
                              std::to_string(cov_fit.dropped_rows));

  int n_int_out = out_fit.score->design().n_intercepts;
  int n_int_cov = cov_fit.score->design().n_intercepts;
  int i_b1 = predictor_index(models.outcome, n_int_out, vars.exposure, 0, 0);
  int i_b2 = predictor_index(models.outcome, n_int_out, vars.exposure, -1, 0);
  int i_b4 = predictor_index(models.outcome, n_int_out, vars.space_covariate, 0, 0);
  if (models.covariate.response.var.variable != vars.space_covariate)
    throw SpecError("covariate model must describe the space-varying covariate");
  int p_out = static_cast<int>(out_fit.coef.size());
  int i_g3 = p_out + predictor_index(models.covariate, n_int_cov, vars.exposure, -1, 0);

  int p = p_out + static_cast<int>(cov_fit.coef.size());
  Eigen::VectorXd theta(p);
  theta << out_fit.coef, cov_fit.coef;

  // the coefficient equations alone carry mu's variance; stacking them as
  // plain residual equations keeps the per-cluster bread symmetric
  auto out_score = std::make_shared<ScoreFunction>(ScoreFunction::Kind::gaussian_gee,
                                                   Design(out_fit.score->design()), prep.view.years());
  auto cov_score = std::make_shared<ScoreFunction>(ScoreFunction::Kind::gaussian_gee,
                                                   Design(cov_fit.score->design()), prep.view.years());
  EstimatingStack stack;
  stack.theta_hat = theta;
  stack.m = prep.view.years();
  stack.contribution = [out_score, cov_score, p_out, p](int i, const Eigen::VectorXd& th) {
    Eigen::VectorXd g(p);
    g << out_score->cluster_score(i, th.head(p_out)),
        cov_score->cluster_score(i, th.tail(p - p_out));
    return g;
  };

  auto transform = [i_b1, i_b2, i_b4, i_g3](const Eigen::VectorXd& th) {
    return th(i_b1) + th(i_b2) + th(i_b4) * th(i_g3);
  };
  auto gradient = [i_b1, i_b2, i_b4, i_g3, p](const Eigen::VectorXd& th) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
    g(i_b1) = 1.0;
    g(i_b2) = 1.0;
    g(i_b4) = th(i_g3);
    g(i_g3) = th(i_b4);
    return g;
  };

  std::vector<std::pair<std::string, double>> comps{{"beta1_g", theta(i_b1)},
                                                    {"beta2_g", theta(i_b2)},
                                                    {"beta4_g", theta(i_b4)},
                                                    {"gamma3_g", theta(i_g3)}};
  return finalize_report("gformula", spec.level, prep.view.years(), stack, transform, gradient,
                         std::move(comps), std::move(prep.diag));
}

// --- stabilized weights -----------------------------------------------------------

WeightModels default_weight_models(const ModelVariables& v) {
  WeightModels m;
  m.den_s1.family = Family::binomial;
  m.den_s1.response = term(v.exposure);
  m.den_s1.predictors = plain_terms(v, 0);
  m.den_s1.predictors.push_back(term(v.exposure, 0, -1));
  maybe_add_interaction(m.den_s1.predictors, v, 0);
  m.den_s1.rows = {0, 1, -1};

  m.den_s2.family = Family::binomial;
  m.den_s2.response = term(v.exposure);
  m.den_s2.predictors = plain_terms(v, 0);
  m.den_s2.predictors.push_back(term(v.space_covariate, 0, 0));
  m.den_s2.predictors.push_back(term(v.exposure, -1, 0));
  m.den_s2.predictors.push_back(term(v.exposure, 0, -1));
  maybe_add_interaction(m.den_s2.predictors, v, 0);
  m.den_s2.rows = {1, 1, -1};

  m.num_s1.family = Family::binomial;
  m.num_s1.response = term(v.exposure);
  m.num_s1.predictors = {term(v.exposure, 0, -1)};
  m.num_s1.rows = {0, 1, -1};

  m.num_s2.family = Family::binomial;
  m.num_s2.response = term(v.exposure);
  m.num_s2.predictors = {term(v.exposure, -1, 0), term(v.exposure, 0, -1)};
  m.num_s2.rows = {1, 1, -1};
  return m;
}

namespace {

bool has_lagged_term(const ModelSpec& spec) {
  auto lagged = [](const VarRef& r) { return r.time_offset < 0; };
  for (const auto& t : spec.predictors) {
    if (lagged(t.var)) return true;
    if (t.partner && lagged(*t.partner)) return true;
  }
  return lagged(spec.response.var);
}

// Aligned per-(year, month) rows of one location's numerator and denominator
// models, used to recompute weights at candidate coefficients.
struct LocWeightRows {
  Eigen::MatrixXd Xnum, Xden;
  Eigen::VectorXd a;
  std::vector<std::vector<int>> row_of;  // [year][month-1] -> row or -1

  void build(const Design& num, const Design& den, int m, int n_t) {
    if (num.row_it != den.row_it)
      throw SpecError("numerator and denominator weight models cover different rows");
    Xnum = num.X;
    Xden = den.X;
    a = den.y;
    row_of.assign(m, std::vector<int>(n_t, -1));
    for (std::size_t r = 0; r < den.row_it.size(); ++r) {
      auto [i, t] = den.row_it[r];
      row_of[i][t - 1] = static_cast<int>(r);
    }
  }

  // density ratio for (i, t); NaN when the row is unavailable
  double factor(int i, int t, const Eigen::VectorXd& th_num, const Eigen::VectorXd& th_den,
                double floor_value, int* truncations) const {
    int r = row_of[i][t - 1];
    if (r < 0) return std::numeric_limits<double>::quiet_NaN();
    double pn = expit(Xnum.row(r).dot(th_num));
    double pd = expit(Xden.row(r).dot(th_den));
    double fn = a(r) > 0.5 ? pn : 1.0 - pn;
    double fd = a(r) > 0.5 ? pd : 1.0 - pd;
    if (fd < floor_value) {
      fd = floor_value;
      if (truncations) ++*truncations;
    }
    return fn / fd;
  }
};

struct WeightWork {
  LocWeightRows s1, s2;
  int m = 0, n_t = 0, first_month = 1;
  double floor_value = 1e-4;

  // cumulative stabilized weights for one year; sw arrays are 1-based by month
  void year_weights(int i, const Eigen::VectorXd& n1, const Eigen::VectorXd& n2,
                    const Eigen::VectorXd& d1, const Eigen::VectorXd& d2, double* sw1, double* sw2,
                    int* truncations) const {
    double c1 = 1.0, c2 = 1.0;
    for (int t = 1; t <= n_t; ++t) {
      if (t < first_month) {
        sw1[t - 1] = sw2[t - 1] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double f1 = s1.factor(i, t, n1, d1, floor_value, truncations);
      double f2 = s2.factor(i, t, n2, d2, floor_value, truncations);
      c1 *= f1;
      c2 *= f1 * f2;
      sw1[t - 1] = c1;
      sw2[t - 1] = c2;
    }
  }
};

WeightWork make_weight_work(const PanelDataset& view, const WeightSet& ws) {
  WeightWork work;
  work.m = view.years();
  work.n_t = view.months();
  work.first_month = ws.first_month;
  work.floor_value = ws.floor_value;
  work.s1.build(ws.num_s1.score->design(), ws.den_s1.score->design(), work.m, work.n_t);
  work.s2.build(ws.num_s2.score->design(), ws.den_s2.score->design(), work.m, work.n_t);
  return work;
}

}  // namespace

WeightSet stabilized_weights(const PanelDataset& data, const EstimandSpec& spec,
                             const WeightModels& models) {
  PanelDataset view = build_estimand_view(data, spec);

  WeightSet ws;
  ws.months = view.months();
  bool lags = has_lagged_term(models.num_s1) || has_lagged_term(models.num_s2) ||
              has_lagged_term(models.den_s1) || has_lagged_term(models.den_s2);
  ws.first_month = (lags && !view.has_baseline()) ? 2 : 1;
  if (ws.first_month > view.months())
    throw SpecError("no usable months for weight models (lagged terms need a baseline month)");

  auto restrict = [&](ModelSpec spec_in) {
    spec_in.rows.month_begin = std::max(spec_in.rows.month_begin, ws.first_month);
    return spec_in;
  };
  ws.num_s1 = fit_logistic(view, restrict(models.num_s1));
  ws.num_s2 = fit_logistic(view, restrict(models.num_s2));
  ws.den_s1 = fit_logistic(view, restrict(models.den_s1));
  ws.den_s2 = fit_logistic(view, restrict(models.den_s2));

  WeightWork work = make_weight_work(view, ws);
  ws.sw_s1.resize(view.years(), view.months());
  ws.sw_s2.resize(view.years(), view.months());
  std::vector<double> row1(view.months()), row2(view.months());
  for (int i = 0; i < view.years(); ++i) {
    work.year_weights(i, ws.num_s1.coef, ws.num_s2.coef, ws.den_s1.coef, ws.den_s2.coef, row1.data(),
                      row2.data(), &ws.truncation_count);
    for (int t = 1; t <= view.months(); ++t) {
      ws.sw_s1(i, t - 1) = row1[t - 1];
      ws.sw_s2(i, t - 1) = row2[t - 1];
    }
  }
  return ws;
}

// --- MSM and naive GEE --------------------------------------------------------------

namespace {

ModelSpec msm_outcome_spec(const ModelVariables& v, int month_begin) {
  ModelSpec spec;
  spec.family = Family::gaussian;
  spec.response = term(v.outcome);
  spec.predictors = {term(v.exposure, 0, 0), term(v.exposure, -1, 0)};
  spec.intercept = InterceptKind::per_month;
  spec.rows = {1, month_begin, -1};
  return spec;
}

EstimateReport gee_like_report(const std::string& method, const PanelDataset& view,
                               const EstimandSpec& spec, const ModelVariables& vars,
                               const WeightSet* weights, Diagnostics diag) {
  int month_begin = weights ? weights->first_month : 1;
  ModelSpec mspec = msm_outcome_spec(vars, month_begin);

  RowWeightFn wfn;
  if (weights) {
    const WeightSet* w = weights;
    wfn = [w](int i, int t) { return w->weight(i, t); };
    std::vector<double> used;
    for (int i = 0; i < w->sw_s2.rows(); ++i)
      for (int t = month_begin; t <= w->months; ++t)
        if (!std::isnan(w->sw_s2(i, t - 1))) used.push_back(w->sw_s2(i, t - 1));
    if (!used.empty()) {
      diag.weight_min = *std::min_element(used.begin(), used.end());
      diag.weight_max = *std::max_element(used.begin(), used.end());
      diag.weight_mean = std::accumulate(used.begin(), used.end(), 0.0) / used.size();
    }
    diag.weight_truncations = w->truncation_count;
    diag.first_month = month_begin;
  }

  FitResult fit = fit_linear(view, mspec, wfn);
  Design gee_design = fit.score->design();
  auto gee = std::make_shared<ScoreFunction>(ScoreFunction::Kind::gaussian_gee, std::move(gee_design),
                                             view.years());

  int n_int = fit.score->design().n_intercepts;
  int p_beta = static_cast<int>(fit.coef.size());
  int i_b1, i_b2;

  EstimatingStack stack;
  if (!weights) {
    i_b1 = predictor_index(mspec, n_int, vars.exposure, 0, 0);
    i_b2 = predictor_index(mspec, n_int, vars.exposure, -1, 0);
    stack.theta_hat = fit.coef;
    stack.m = view.years();
    stack.contribution = [gee](int i, const Eigen::VectorXd& th) { return gee->cluster_score(i, th); };
  } else {
    // full stack: numerator scores, denominator scores, then the weighted GEE
    // equations with weights recomputed from the candidate coefficients
    auto n1 = weights->num_s1.score;
    auto n2 = weights->num_s2.score;
    auto d1 = weights->den_s1.score;
    auto d2 = weights->den_s2.score;
    int p1 = n1->param_count(), p2 = n2->param_count(), p3 = d1->param_count(), p4 = d2->param_count();
    int p = p1 + p2 + p3 + p4 + p_beta;
    Eigen::VectorXd theta(p);
    theta << weights->num_s1.coef, weights->num_s2.coef, weights->den_s1.coef, weights->den_s2.coef,
        fit.coef;

    auto work = std::make_shared<WeightWork>(make_weight_work(view, *weights));
    // GEE rows grouped by year for the weighted part
    auto design = std::make_shared<Design>(fit.score->design());
    int n_t = view.months();

    stack.theta_hat = theta;
    stack.m = view.years();
    stack.contribution = [n1, n2, d1, d2, work, design, p1, p2, p3, p4, p_beta, n_t](
                             int i, const Eigen::VectorXd& th) {
      int off = 0;
      Eigen::VectorXd th_n1 = th.segment(off, p1);
      off += p1;
      Eigen::VectorXd th_n2 = th.segment(off, p2);
      off += p2;
      Eigen::VectorXd th_d1 = th.segment(off, p3);
      off += p3;
      Eigen::VectorXd th_d2 = th.segment(off, p4);
      off += p4;
      Eigen::VectorXd beta = th.segment(off, p_beta);

      Eigen::VectorXd g(p1 + p2 + p3 + p4 + p_beta);
      g.segment(0, p1) = n1->cluster_score(i, th_n1);
      g.segment(p1, p2) = n2->cluster_score(i, th_n2);
      g.segment(p1 + p2, p3) = d1->cluster_score(i, th_d1);
      g.segment(p1 + p2 + p3, p4) = d2->cluster_score(i, th_d2);

      std::vector<double> sw1(n_t), sw2(n_t);
      work->year_weights(i, th_n1, th_n2, th_d1, th_d2, sw1.data(), sw2.data(), nullptr);
      Eigen::VectorXd gee_part = Eigen::VectorXd::Zero(p_beta);
      for (std::size_t r = 0; r < design->row_it.size(); ++r) {
        if (design->cluster[r] != i) continue;
        int t = design->row_it[r].second;
        double w = sw2[t - 1];
        double res = design->y(static_cast<Eigen::Index>(r)) -
                     design->X.row(static_cast<Eigen::Index>(r)).dot(beta);
        gee_part += w * res * design->X.row(static_cast<Eigen::Index>(r)).transpose();
      }
      g.tail(p_beta) = gee_part;
      return g;
    };
    int base = p1 + p2 + p3 + p4;
    i_b1 = base + predictor_index(mspec, n_int, vars.exposure, 0, 0);
    i_b2 = base + predictor_index(mspec, n_int, vars.exposure, -1, 0);
  }

  auto transform = [i_b1, i_b2](const Eigen::VectorXd& th) { return th(i_b1) + th(i_b2); };
  int p = static_cast<int>(stack.theta_hat.size());
  auto gradient = [i_b1, i_b2, p](const Eigen::VectorXd&) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
    g(i_b1) = 1.0;
    g(i_b2) = 1.0;
    return g;
  };

  std::vector<std::pair<std::string, double>> comps{{"beta1_m", stack.theta_hat(i_b1)},
                                                    {"beta2_m", stack.theta_hat(i_b2)}};
  if (fit.dropped_rows > 0)
    diag.notes.push_back("dropped " + std::to_string(fit.dropped_rows) + " outcome rows");
  return finalize_report(method, spec.level, view.years(), stack, transform, gradient,
                         std::move(comps), std::move(diag));
}

}  // namespace

EstimateReport msm(const PanelDataset& data, const EstimandSpec& spec, const WeightSet& weights,
                   const ModelVariables& vars) {
  Prep prep = prepare(data, spec, vars);
  return gee_like_report("msm", prep.view, spec, vars, &weights, std::move(prep.diag));
}

EstimateReport naive_gee(const PanelDataset& data, const EstimandSpec& spec,
                         const ModelVariables& vars) {
  Prep prep = prepare(data, spec, vars);
  return gee_like_report("gee", prep.view, spec, vars, nullptr, std::move(prep.diag));
}

// --- structural nested mean model -----------------------------------------------------

SnmModels default_snm_models(const ModelVariables& v) {
  SnmModels m;
  // history before the s2 exposure: s1 exposure, both-location covariates, lags
  m.lambda1.family = Family::gaussian;
  m.lambda1.response = term(v.outcome);
  m.lambda1.predictors = {term(v.exposure, -1, 0)};
  for (auto& t : plain_terms(v, 0)) m.lambda1.predictors.push_back(t);
  m.lambda1.predictors.push_back(term(v.space_covariate, 0, 0));
  m.lambda1.predictors.push_back(term(v.outcome, 0, -1));
  m.lambda1.rows = {1, 1, -1};

  // history before the s1 exposure: prior-month state only
  m.lambda2.family = Family::gaussian;
  m.lambda2.response = term(v.outcome);
  for (const auto& c : v.plain_covariates) m.lambda2.predictors.push_back(term(c, -1, -1));
  m.lambda2.predictors.push_back(term(v.space_covariate, 0, -1));
  m.lambda2.predictors.push_back(term(v.outcome, 0, -1));
  m.lambda2.rows = {1, 1, -1};

  WeightModels w = default_weight_models(v);
  m.exposure_s1 = w.den_s1;
  m.exposure_s2 = w.den_s2;
  return m;
}

namespace {

// Aligned per-row pieces for the G-estimation equations. The transformed
// outcome U(beta) = y - b1 a2 (- b2 a1) is centered by its fitted history
// mean, which amounts to centering y and each exposure by their own fits on
// the level's history design (U is linear in beta).
struct SnmWork {
  struct Row {
    double a1, a2, y;
    Eigen::VectorXd w0, w1;      // history designs, level 1 and 2
    Eigen::VectorXd x_p1, x_p2;  // exposure model designs
  };
  std::vector<std::vector<Row>> rows_by_year;
  int p_w0 = 0, p_w1 = 0, p_p1 = 0, p_p2 = 0;
  bool exposure_s1_constant = false, exposure_s2_constant = false;
  double const_p1 = 0.0, const_p2 = 0.0;

  // estimating equation contribution of year i; the eta vectors are the
  // history fits of y, a2 and a1 per level
  Eigen::Vector2d eq_year(int i, const Eigen::VectorXd& e0y, const Eigen::VectorXd& e0a2,
                          const Eigen::VectorXd& e1y, const Eigen::VectorXd& e1a2,
                          const Eigen::VectorXd& e1a1, const Eigen::VectorXd& th1,
                          const Eigen::VectorXd& th2, double b1, double b2) const {
    Eigen::Vector2d g = Eigen::Vector2d::Zero();
    for (const auto& r : rows_by_year[i]) {
      double p1v = exposure_s1_constant ? const_p1 : expit(r.x_p1.dot(th1));
      double p2v = exposure_s2_constant ? const_p2 : expit(r.x_p2.dot(th2));
      double B1 = r.a1 - p1v;
      double B2 = r.a2 - p2v;
      double u0 = (r.y - r.w0.dot(e0y)) - b1 * (r.a2 - r.w0.dot(e0a2));
      double u1 = (r.y - r.w1.dot(e1y)) - b1 * (r.a2 - r.w1.dot(e1a2)) -
                  b2 * (r.a1 - r.w1.dot(e1a1));
      g(0) += B2 * u0 + B2 * u1;
      g(1) += B1 * u1;
    }
    return g;
  }
};

SnmBlocks blocks_from_work(const SnmWork& work, const Eigen::VectorXd& e0y,
                           const Eigen::VectorXd& e0a2, const Eigen::VectorXd& e1y,
                           const Eigen::VectorXd& e1a2, const Eigen::VectorXd& e1a1,
                           const Eigen::VectorXd& th1, const Eigen::VectorXd& th2,
                           const std::vector<int>& months) {
  int m = static_cast<int>(work.rows_by_year.size());
  std::size_t n_t = 0;
  for (const auto& rows : work.rows_by_year) n_t = std::max(n_t, rows.size());
  SnmBlocks bl;
  bl.months = months;
  bl.B1.setZero(m, n_t);
  bl.B2.setZero(m, n_t);
  bl.r0.setZero(m, n_t);
  bl.r1.setZero(m, n_t);
  bl.a2_0.setZero(m, n_t);
  bl.a2_1.setZero(m, n_t);
  bl.a1_1.setZero(m, n_t);
  bl.C.setZero(m);
  bl.D.setZero(m);
  bl.E.setZero(m);
  bl.F.setZero(m);
  bl.G.setZero(m);
  bl.H.setZero(m);

  for (int i = 0; i < m; ++i) {
    int k = 0;
    for (const auto& r : work.rows_by_year[i]) {
      double p1v = work.exposure_s1_constant ? work.const_p1 : expit(r.x_p1.dot(th1));
      double p2v = work.exposure_s2_constant ? work.const_p2 : expit(r.x_p2.dot(th2));
      double B1 = r.a1 - p1v, B2 = r.a2 - p2v;
      double r0 = r.y - r.w0.dot(e0y), r1 = r.y - r.w1.dot(e1y);
      double a20 = r.a2 - r.w0.dot(e0a2);
      double a21 = r.a2 - r.w1.dot(e1a2);
      double a11 = r.a1 - r.w1.dot(e1a1);
      bl.B1(i, k) = B1;
      bl.B2(i, k) = B2;
      bl.r0(i, k) = r0;
      bl.r1(i, k) = r1;
      bl.a2_0(i, k) = a20;
      bl.a2_1(i, k) = a21;
      bl.a1_1(i, k) = a11;
      bl.C(i) += B2 * (r0 + r1);
      bl.D(i) += B2 * (a20 + a21);
      bl.E(i) += B2 * a11;
      bl.F(i) += B1 * r1;
      bl.G(i) += B1 * a21;
      bl.H(i) += B1 * a11;
      ++k;
    }
  }
  return bl;
}

}  // namespace

Eigen::Vector2d SnmBlocks::equation(const Eigen::Vector2d& beta) const {
  Eigen::Vector2d g;
  g(0) = C.sum() - beta(0) * D.sum() - beta(1) * E.sum();
  g(1) = F.sum() - beta(0) * G.sum() - beta(1) * H.sum();
  return g;
}

Eigen::Vector2d SnmBlocks::solve() const {
  double sC = C.sum(), sD = D.sum(), sE = E.sum(), sF = F.sum(), sG = G.sum(), sH = H.sum();
  double den = sE * sG - sD * sH;
  double scale = std::max(std::abs(sE * sG), std::abs(sD * sH));
  if (scale == 0.0 || std::abs(den) <= 1e-10 * scale)
    throw DegenerateDenominatorError("blip system is degenerate: sum(E)sum(G) = sum(D)sum(H)");
  if (sE == 0.0) throw DegenerateDenominatorError("blip system is degenerate: sum(E) = 0");
  Eigen::Vector2d beta;
  beta(0) = (sE * sF - sC * sH) / den;
  beta(1) = (sD * sF - sC * sG) / -den;
  return beta;
}

namespace {

SnmWork build_snm_work(const PanelDataset& view, const SnmModels& models,
                       std::vector<int>* months_out) {
  // designs aligned on (i, t): a row enters only when every model can form it
  Design dl1 = build_design(view, models.lambda1);
  Design dl2 = build_design(view, models.lambda2);
  Design dp1 = build_design(view, models.exposure_s1);
  Design dp2 = build_design(view, models.exposure_s2);

  auto index_rows = [](const Design& d) {
    std::map<std::pair<int, int>, int> idx;
    for (std::size_t r = 0; r < d.row_it.size(); ++r) idx[d.row_it[r]] = static_cast<int>(r);
    return idx;
  };
  auto i_l1 = index_rows(dl1), i_l2 = index_rows(dl2), i_p1 = index_rows(dp1), i_p2 = index_rows(dp2);

  SnmWork work;
  work.p_w0 = static_cast<int>(dl1.X.cols());
  work.p_w1 = static_cast<int>(dl2.X.cols());
  work.p_p1 = static_cast<int>(dp1.X.cols());
  work.p_p2 = static_cast<int>(dp2.X.cols());
  work.rows_by_year.assign(view.years(), {});

  std::set<int> months;
  for (const auto& [it, r1] : i_l1) {
    auto f2 = i_l2.find(it);
    auto fp1 = i_p1.find(it);
    auto fp2 = i_p2.find(it);
    if (f2 == i_l2.end() || fp1 == i_p1.end() || fp2 == i_p2.end()) continue;
    auto [i, t] = it;
    SnmWork::Row row;
    row.y = dl1.y(r1);
    row.a1 = dp1.y(fp1->second);
    row.a2 = dp2.y(fp2->second);
    row.w0 = dl1.X.row(r1);
    row.w1 = dl2.X.row(f2->second);
    row.x_p1 = dp1.X.row(fp1->second);
    row.x_p2 = dp2.X.row(fp2->second);
    work.rows_by_year[i].push_back(std::move(row));
    months.insert(t);
  }
  if (months_out) months_out->assign(months.begin(), months.end());

  auto all_equal = [](const Eigen::VectorXd& v) {
    for (Eigen::Index r = 1; r < v.size(); ++r)
      if (v(r) != v(0)) return false;
    return v.size() > 0;
  };
  if (all_equal(dp1.y)) {
    work.exposure_s1_constant = true;
    work.const_p1 = dp1.y(0);
  }
  if (all_equal(dp2.y)) {
    work.exposure_s2_constant = true;
    work.const_p2 = dp2.y(0);
  }
  return work;
}

// Shared fitting path for snm() and snm_blocks().
struct SnmFit {
  SnmWork work;
  std::vector<int> months;
  FitResult e0y, e0a2, e1y, e1a2, e1a1;  // history fits of y and the exposures
  FitResult p1, p2;                      // logistic exposure models
  SnmBlocks blocks;
};

SnmFit fit_snm_pieces(const PanelDataset& view, const SnmModels& models,
                      const ModelVariables& vars) {
  SnmFit f;
  auto with_response = [](ModelSpec spec, TermSpec response) {
    spec.response = std::move(response);
    return spec;
  };
  f.e0y = fit_linear(view, models.lambda1);
  f.e0a2 = fit_linear(view, with_response(models.lambda1, term(vars.exposure, 0, 0)));
  f.e1y = fit_linear(view, models.lambda2);
  f.e1a2 = fit_linear(view, with_response(models.lambda2, term(vars.exposure, 0, 0)));
  f.e1a1 = fit_linear(view, with_response(models.lambda2, term(vars.exposure, -1, 0)));
  f.work = build_snm_work(view, models, &f.months);

  Eigen::VectorXd th1, th2;
  if (!f.work.exposure_s1_constant) {
    f.p1 = fit_logistic(view, models.exposure_s1);
    th1 = f.p1.coef;
  }
  if (!f.work.exposure_s2_constant) {
    f.p2 = fit_logistic(view, models.exposure_s2);
    th2 = f.p2.coef;
  }
  f.blocks = blocks_from_work(f.work, f.e0y.coef, f.e0a2.coef, f.e1y.coef, f.e1a2.coef,
                              f.e1a1.coef, th1, th2, f.months);
  return f;
}

}  // namespace

SnmBlocks snm_blocks(const PanelDataset& data, const EstimandSpec& spec, const SnmModels& models,
                     const ModelVariables& vars) {
  PanelDataset view = build_estimand_view(data, spec);
  return fit_snm_pieces(view, models, vars).blocks;
}

EstimateReport snm(const PanelDataset& data, const EstimandSpec& spec, const SnmModels& models,
                   const ModelVariables& vars) {
  Prep prep = prepare(data, spec, vars);
  const PanelDataset& view = prep.view;

  SnmFit pieces = fit_snm_pieces(view, models, vars);
  Eigen::Vector2d beta = pieces.blocks.solve();  // throws on degeneracy

  if (pieces.work.exposure_s1_constant || pieces.work.exposure_s2_constant)
    throw DegenerateDenominatorError("constant exposure leaves no residual variation");

  // history fits stack as plain projection equations
  auto gee_score = [&](const FitResult& fit) {
    return std::make_shared<ScoreFunction>(ScoreFunction::Kind::gaussian_gee,
                                           Design(fit.score->design()), view.years());
  };
  std::vector<std::shared_ptr<const ScoreFunction>> subs{
      gee_score(pieces.e0y), gee_score(pieces.e0a2), gee_score(pieces.e1y),
      gee_score(pieces.e1a2), gee_score(pieces.e1a1), pieces.p1.score, pieces.p2.score};
  std::vector<Eigen::VectorXd> sub_theta{pieces.e0y.coef,  pieces.e0a2.coef, pieces.e1y.coef,
                                         pieces.e1a2.coef, pieces.e1a1.coef, pieces.p1.coef,
                                         pieces.p2.coef};
  std::vector<int> sizes, offsets;
  int p = 0;
  for (const auto& s : subs) {
    offsets.push_back(p);
    sizes.push_back(s->param_count());
    p += s->param_count();
  }
  int i_b1 = p, i_b2 = p + 1;
  p += 2;

  Eigen::VectorXd theta(p);
  for (std::size_t k = 0; k < subs.size(); ++k) theta.segment(offsets[k], sizes[k]) = sub_theta[k];
  theta(i_b1) = beta(0);
  theta(i_b2) = beta(1);

  auto workp = std::make_shared<SnmWork>(std::move(pieces.work));
  EstimatingStack stack;
  stack.theta_hat = theta;
  stack.m = view.years();
  stack.contribution = [subs, offsets, sizes, workp, p, i_b1, i_b2](int i,
                                                                    const Eigen::VectorXd& th) {
    Eigen::VectorXd g(p);
    for (std::size_t k = 0; k < subs.size(); ++k)
      g.segment(offsets[k], sizes[k]) = subs[k]->cluster_score(i, th.segment(offsets[k], sizes[k]));
    g.tail(2) = workp->eq_year(i, th.segment(offsets[0], sizes[0]), th.segment(offsets[1], sizes[1]),
                               th.segment(offsets[2], sizes[2]), th.segment(offsets[3], sizes[3]),
                               th.segment(offsets[4], sizes[4]), th.segment(offsets[5], sizes[5]),
                               th.segment(offsets[6], sizes[6]), th(i_b1), th(i_b2));
    return g;
  };

  auto transform = [i_b1, i_b2](const Eigen::VectorXd& th) { return th(i_b1) + th(i_b2); };
  auto gradient = [i_b1, i_b2, p](const Eigen::VectorXd&) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
    g(i_b1) = 1.0;
    g(i_b2) = 1.0;
    return g;
  };

  std::vector<std::pair<std::string, double>> comps{{"beta1_s", beta(0)}, {"beta2_s", beta(1)}};
  return finalize_report("snm", spec.level, view.years(), stack, transform, gradient,
                         std::move(comps), std::move(prep.diag));
}

EstimateReport estimate(const std::string& method, const PanelDataset& data,
                        const EstimandSpec& spec, const ModelVariables& vars) {
  if (method == "gformula") return gformula(data, spec, default_gformula_models(vars), vars);
  if (method == "msm") {
    WeightSet ws = stabilized_weights(data, spec, default_weight_models(vars));
    return msm(data, spec, ws, vars);
  }
  if (method == "snm") return snm(data, spec, default_snm_models(vars), vars);
  if (method == "gee") return naive_gee(data, spec, vars);
  throw SpecError("unknown method '" + method + "'; valid: gformula, msm, snm, gee");
}

}  // namespace stgm
