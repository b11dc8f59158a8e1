#include "stgm/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "stgm/rng.hpp"

namespace stgm {

void DgpConfig::validate() const {
  for (double sd : {l1_s1_base_sd, l2_base_sd, y_base_sd, l1_s1_sd, l1_s2_sd, l2_sd, y_sd})
    if (!(sd > 0.0)) throw ValueError("all DGP standard deviations must be positive");
  if (!(a_base_p >= 0.0 && a_base_p <= 1.0)) throw ValueError("baseline exposure probability outside [0,1]");
  if (n_months < 1) throw ValueError("DGP needs at least one post-baseline month");
}

DgpConfig DgpConfig::null_effect() const {
  DgpConfig c = *this;
  c.y_a1 = 0.0;
  c.y_a2 = 0.0;
  c.l2_a1 = 0.0;
  return c;
}

std::string DgpConfig::to_json() const {
  nlohmann::json j;
  j["baseline"] = {{"l1_s1", {{"mean", l1_s1_base_mean}, {"sd", l1_s1_base_sd}}},
                   {"l2_s2", {{"mean", l2_base_mean}, {"sd", l2_base_sd}}},
                   {"a", {{"p", a_base_p}}},
                   {"y", {{"mean", y_base_mean}, {"sd", y_base_sd}}}};
  j["l1_s1"] = {{"const", l1_s1_const}, {"lag", l1_s1_lag}, {"sd", l1_s1_sd}};
  j["a_s1"] = {{"const", a1_const}, {"l1", a1_l1}, {"a_lag", a1_alag}};
  j["l1_s2"] = {{"const", l1_s2_const}, {"l1_s1_lag", l1_s2_l1lag}, {"sd", l1_s2_sd}};
  j["l2_s2"] = {{"const", l2_const}, {"l1", l2_l1}, {"lag", l2_lag}, {"a_s1", l2_a1}, {"sd", l2_sd}};
  j["a_s2"] = {{"const", a2_const}, {"l1", a2_l1},   {"l2", a2_l2},
               {"a_s1", a2_a1},     {"a_lag", a2_alag}};
  j["y_s3"] = {{"const", y_const}, {"a_s2", y_a2},   {"a_s1", y_a1}, {"l1_s2", y_l1},
               {"l2_s2", y_l2},    {"y_lag", y_ylag}, {"sd", y_sd}};
  j["n_months"] = n_months;
  return j.dump(2);
}

double true_mu(const DgpConfig& config) { return config.y_a2 + config.y_a1 + config.y_l2 * config.l2_a1; }

PanelDataset simulate_dataset(const DgpConfig& config, int m, std::uint64_t seed) {
  config.validate();
  if (m < 1) throw ValueError("simulate_dataset needs m >= 1");

  std::vector<int> years(m);
  for (int i = 0; i < m; ++i) years[i] = i + 1;
  PanelDataset data(years, {3.0, 2.0, 1.0}, config.n_months, /*has_baseline=*/true);
  for (const auto& v : {"y", "a", "l1", "l2"}) data.add_variable(v);
  data.outcome_var = "y";
  data.exposure_var = "a";
  data.covariate_vars = {"l1", "l2"};
  data.outcome_logged = true;  // the DGP writes the outcome on the log2 scale

  Rng rng(seed);
  for (int i = 0; i < m; ++i) {
    double l1_prev = rng.normal(config.l1_s1_base_mean, config.l1_s1_base_sd);
    double l2_prev = rng.normal(config.l2_base_mean, config.l2_base_sd);
    double a1_prev = rng.bernoulli(config.a_base_p);
    double a2_prev = rng.bernoulli(config.a_base_p);
    double y_prev = rng.normal(config.y_base_mean, config.y_base_sd);
    data.set("l1", i, 0, 0, l1_prev);
    data.set("l2", i, 1, 0, l2_prev);
    data.set("a", i, 0, 0, a1_prev);
    data.set("a", i, 1, 0, a2_prev);
    data.set("y", i, 2, 0, y_prev);

    for (int t = 1; t <= config.n_months; ++t) {
      double l1s1 = rng.normal(config.l1_s1_const + config.l1_s1_lag * l1_prev, config.l1_s1_sd);
      double a1 = rng.bernoulli(1.0 / (1.0 + std::exp(-(config.a1_const + config.a1_l1 * l1s1 +
                                                        config.a1_alag * a1_prev))));
      double l1s2 = rng.normal(config.l1_s2_const + config.l1_s2_l1lag * l1_prev, config.l1_s2_sd);
      double l2 = rng.normal(config.l2_const + config.l2_l1 * l1s2 + config.l2_lag * l2_prev +
                                 config.l2_a1 * a1,
                             config.l2_sd);
      double a2 = rng.bernoulli(
          1.0 / (1.0 + std::exp(-(config.a2_const + config.a2_l1 * l1s2 + config.a2_l2 * l2 +
                                  config.a2_a1 * a1 + config.a2_alag * a2_prev))));
      double y = rng.normal(config.y_const + config.y_a2 * a2 + config.y_a1 * a1 +
                                config.y_l1 * l1s2 + config.y_l2 * l2 + config.y_ylag * y_prev,
                            config.y_sd);

      data.set("l1", i, 0, t, l1s1);
      data.set("a", i, 0, t, a1);
      data.set("l1", i, 1, t, l1s2);
      data.set("l2", i, 1, t, l2);
      data.set("a", i, 1, t, a2);
      data.set("y", i, 2, t, y);

      l1_prev = l1s1;
      l2_prev = l2;
      a1_prev = a1;
      a2_prev = a2;
      y_prev = y;
    }
  }
  return data;
}

void StudyConfig::validate() const {
  if (replicates < 1) throw ValueError("study needs at least one replicate");
  if (methods.empty()) throw ValueError("study needs at least one method");
  if (m_values.empty()) throw ValueError("study needs at least one m");
  for (int m : m_values)
    if (m < 2) throw ValueError("study m values must be >= 2");
  if (!(level > 0.0 && level < 1.0)) throw ValueError("confidence level must be in (0,1)");
  for (const auto& meth : methods)
    if (meth != "gformula" && meth != "msm" && meth != "snm" && meth != "gee")
      throw ValueError("unknown method '" + meth + "'; valid: gformula, msm, snm, gee");
}

namespace {

struct VariantTally {
  long covered = 0;
  double width_sum = 0.0;
};

struct MethodTally {
  double mu_sum = 0.0;
  long successes = 0;
  long failures = 0;
  std::map<std::string, VariantTally> variants;
};

std::vector<std::string> all_variant_keys() {
  std::vector<std::string> keys;
  std::vector<double> bs{0.0};
  bs.insert(bs.end(), EstimateReport::b_values().begin(), EstimateReport::b_values().end());
  for (double b : bs)
    for (Dist dist : {Dist::normal, Dist::t}) keys.push_back(EstimateReport::variant_key(b, dist));
  return keys;
}

struct ReplicateOutcome {
  // per method: (success, mu_hat, per-variant (covered, width))
  struct MethodResult {
    bool ok = false;
    double mu_hat = 0.0;
    std::map<std::string, std::pair<bool, double>> variants;
  };
  std::map<std::string, MethodResult> methods;
};

ReplicateOutcome run_replicate(const DgpConfig& dgp, const StudyConfig& study, int m,
                               std::uint64_t seed, double mu) {
  ReplicateOutcome out;
  PanelDataset data = simulate_dataset(dgp, m, seed);
  EstimandSpec spec{0, 1, 2, study.level};
  ModelVariables vars;  // simulator names are the defaults
  for (const auto& method : study.methods) {
    ReplicateOutcome::MethodResult res;
    try {
      EstimateReport rep = estimate(method, data, spec, vars);
      res.ok = true;
      res.mu_hat = rep.mu_hat;
      for (const auto& [key, ci] : rep.intervals)
        res.variants[key] = {ci.lower <= mu && mu <= ci.upper, ci.upper - ci.lower};
    } catch (const Error&) {
      res.ok = false;
    }
    out.methods[method] = std::move(res);
  }
  return out;
}

}  // namespace

const StudyCell& StudySummary::cell(const std::string& method, int m,
                                    const std::string& variant) const {
  for (const auto& c : cells)
    if (c.method == method && c.m == m && c.ci_variant == variant) return c;
  throw Error("no study cell for " + method + ", m=" + std::to_string(m) + ", " + variant);
}

std::string StudySummary::to_csv() const {
  std::ostringstream out;
  out << "method,m,ci_variant,mean_abs_bias,coverage,mean_width,failures\n";
  for (const auto& c : cells)
    out << c.method << "," << c.m << "," << c.ci_variant << "," << c.mean_abs_bias << ","
        << c.coverage << "," << c.mean_width << "," << c.failures << "\n";
  return out.str();
}

std::string StudySummary::metadata_json() const {
  nlohmann::json j;
  j["true_mu"] = true_mu;
  j["base_seed"] = base_seed;
  j["replicates_per_m"] = replicates;
  j["rng"] = rng_algorithm;
  return j.dump(2);
}

StudySummary run_study(const DgpConfig& dgp, const StudyConfig& study) {
  dgp.validate();
  study.validate();
  double mu = true_mu(dgp);

  StudySummary summary;
  summary.true_mu = mu;
  summary.base_seed = study.base_seed;
  summary.replicates = study.replicates;
  summary.rng_algorithm = Rng::kAlgorithm;

  auto variant_keys = all_variant_keys();

  for (int m : study.m_values) {
    std::vector<ReplicateOutcome> outcomes(study.replicates);
    auto worker = [&](int begin, int end) {
      for (int r = begin; r < end; ++r)
        outcomes[r] = run_replicate(dgp, study, m, Rng::stream_seed(study.base_seed, m, r), mu);
    };
    int threads = std::max(1, study.threads);
    if (threads == 1) {
      worker(0, study.replicates);
    } else {
      std::vector<std::thread> pool;
      int chunk = (study.replicates + threads - 1) / threads;
      for (int k = 0; k < threads; ++k) {
        int begin = k * chunk, end = std::min(study.replicates, (k + 1) * chunk);
        if (begin < end) pool.emplace_back(worker, begin, end);
      }
      for (auto& th : pool) th.join();
    }

    // order-independent aggregation
    for (const auto& method : study.methods) {
      MethodTally tally;
      for (const auto& rep : outcomes) {
        const auto& res = rep.methods.at(method);
        if (!res.ok) {
          ++tally.failures;
          continue;
        }
        ++tally.successes;
        tally.mu_sum += res.mu_hat;
        for (const auto& [key, cw] : res.variants) {
          auto& v = tally.variants[key];
          v.covered += cw.first ? 1 : 0;
          v.width_sum += cw.second;
        }
      }
      double bias = tally.successes > 0 ? std::abs(tally.mu_sum / tally.successes - mu) : 0.0;
      for (const auto& key : variant_keys) {
        StudyCell cell;
        cell.method = method;
        cell.m = m;
        cell.ci_variant = key;
        cell.mean_abs_bias = bias;
        cell.failures = static_cast<int>(tally.failures);
        cell.successes = static_cast<int>(tally.successes);
        const auto& v = tally.variants[key];
        cell.coverage = tally.successes > 0 ? static_cast<double>(v.covered) / tally.successes : 0.0;
        cell.mean_width = tally.successes > 0 ? v.width_sum / tally.successes : 0.0;
        summary.cells.push_back(cell);
      }
    }
  }
  return summary;
}

}  // namespace stgm
