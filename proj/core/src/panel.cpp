#include "stgm/panel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace stgm {

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool is_missing_token(const std::string& s) { return s.empty() || s == "NA" || s == "na" || s == "NaN"; }

}  // namespace

PanelDataset::PanelDataset(std::vector<int> year_labels, std::vector<double> location_km,
                           int n_months, bool has_baseline)
    : year_labels_(std::move(year_labels)),
      location_km_(std::move(location_km)),
      n_months_(n_months),
      has_baseline_(has_baseline) {
  if (n_months_ < 1) throw SchemaError("panel needs at least one month");
  for (std::size_t k = 1; k < location_km_.size(); ++k) {
    if (!(location_km_[k - 1] > location_km_[k]))
      throw SchemaError("location km must be strictly descending (upstream first)");
  }
  outcome_raw_.assign(static_cast<std::size_t>(years()) * locations() * (n_months_ + 1 - first_month()),
                      std::nullopt);
}

std::size_t PanelDataset::cell_index(int i, int s, int t) const {
  int months_total = n_months_ + 1 - first_month();
  return (static_cast<std::size_t>(i) * locations() + s) * months_total + (t - first_month());
}

void PanelDataset::check_cell(int i, int s, int t) const {
  if (!in_grid(i, s, t))
    throw SchemaError("cell (" + std::to_string(i) + "," + std::to_string(s) + "," +
                      std::to_string(t) + ") outside the grid");
}

void PanelDataset::add_variable(const std::string& name) {
  if (vars_.count(name)) return;
  vars_[name].assign(static_cast<std::size_t>(years()) * locations() * (n_months_ + 1 - first_month()),
                     std::nullopt);
}

bool PanelDataset::has_variable(const std::string& name) const { return vars_.count(name) > 0; }

std::vector<std::string> PanelDataset::variables() const {
  std::vector<std::string> out;
  out.reserve(vars_.size());
  for (const auto& [k, v] : vars_) out.push_back(k);
  return out;
}

std::optional<double> PanelDataset::value(const std::string& name, int i, int s, int t) const {
  check_cell(i, s, t);
  auto it = vars_.find(name);
  if (it == vars_.end()) throw SchemaError("unknown variable '" + name + "'");
  return it->second[cell_index(i, s, t)];
}

double PanelDataset::require(const std::string& name, int i, int s, int t) const {
  auto v = value(name, i, s, t);
  if (!v)
    throw MissingDataError("missing value of '" + name + "' at (year " + std::to_string(i) +
                           ", location " + std::to_string(s) + ", month " + std::to_string(t) + ")");
  return *v;
}

void PanelDataset::set(const std::string& name, int i, int s, int t, double v) {
  check_cell(i, s, t);
  auto it = vars_.find(name);
  if (it == vars_.end()) throw SchemaError("unknown variable '" + name + "'");
  it->second[cell_index(i, s, t)] = v;
}

void PanelDataset::clear(const std::string& name, int i, int s, int t) {
  check_cell(i, s, t);
  auto it = vars_.find(name);
  if (it == vars_.end()) throw SchemaError("unknown variable '" + name + "'");
  it->second[cell_index(i, s, t)] = std::nullopt;
}

PanelDataset PanelDataset::without_years(const std::set<int>& year_idx) const {
  std::vector<int> keep;
  for (int i = 0; i < years(); ++i)
    if (!year_idx.count(i)) keep.push_back(i);
  return with_year_order(keep);
}

PanelDataset PanelDataset::with_year_order(const std::vector<int>& perm) const {
  std::vector<int> labels;
  labels.reserve(perm.size());
  for (int i : perm) labels.push_back(year_labels_.at(i));
  PanelDataset out(labels, location_km_, n_months_, has_baseline_);
  out.outcome_var = outcome_var;
  out.exposure_var = exposure_var;
  out.exposure_raw_var = exposure_raw_var;
  out.covariate_vars = covariate_vars;
  out.outcome_logged = outcome_logged;
  for (const auto& [name, grid] : vars_) {
    out.add_variable(name);
    for (std::size_t k = 0; k < perm.size(); ++k)
      for (int s = 0; s < locations(); ++s)
        for (int t = first_month(); t <= n_months_; ++t)
          out.vars_[name][out.cell_index(static_cast<int>(k), s, t)] = grid[cell_index(perm[k], s, t)];
  }
  for (std::size_t k = 0; k < perm.size(); ++k)
    for (int s = 0; s < locations(); ++s)
      for (int t = first_month(); t <= n_months_; ++t)
        out.outcome_raw_[out.cell_index(static_cast<int>(k), s, t)] = outcome_raw_[cell_index(perm[k], s, t)];
  return out;
}

PanelDataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file: " + path, 0);
  auto header = split_csv_line(line);
  for (auto& h : header) h = trim(h);

  auto col_of = [&](const std::string& name) -> int {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("column '" + name + "' not in header of " + path);
    return static_cast<int>(it - header.begin());
  };

  int c_year = col_of(schema.year_col);
  int c_loc = col_of(schema.location_col);
  int c_month = col_of(schema.month_col);
  int c_outcome = schema.outcome_col.empty() ? -1 : col_of(schema.outcome_col);
  int c_exposure = schema.exposure_col.empty() ? -1 : col_of(schema.exposure_col);
  std::vector<int> c_cov;
  for (const auto& c : schema.covariate_cols) c_cov.push_back(col_of(c));

  struct RawRow {
    int year, month;
    double km;
    std::vector<std::optional<double>> fields;  // outcome, exposure, covariates...
  };
  std::vector<RawRow> rows;
  std::set<int> years_seen, months_seen;
  std::set<double> kms_seen;
  std::set<std::tuple<int, double, int>> keys;

  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(f.size()),
                       lineno);
    for (auto& x : f) x = trim(x);

    auto parse_num = [&](int col, const char* what) -> double {
      try {
        std::size_t used = 0;
        double v = std::stod(f[col], &used);
        if (used != f[col].size()) throw std::invalid_argument("trailing");
        return v;
      } catch (const std::exception&) {
        throw ParseError(std::string("bad ") + what + " value '" + f[col] + "'", lineno);
      }
    };
    auto parse_opt = [&](int col) -> std::optional<double> {
      if (col < 0 || is_missing_token(f[col])) return std::nullopt;
      return parse_num(col, header[col].c_str());
    };

    RawRow r;
    double y = parse_num(c_year, "year");
    double mth = parse_num(c_month, "month");
    if (y != std::floor(y)) throw ParseError("non-integer year", lineno);
    if (mth != std::floor(mth) || mth < 0) throw ParseError("bad month", lineno);
    r.year = static_cast<int>(y);
    r.month = static_cast<int>(mth);
    r.km = parse_num(c_loc, "location");
    r.fields.push_back(parse_opt(c_outcome));
    r.fields.push_back(parse_opt(c_exposure));
    for (int c : c_cov) r.fields.push_back(parse_opt(c));

    auto key = std::make_tuple(r.year, r.km, r.month);
    if (!keys.insert(key).second)
      throw DuplicateKeyError("duplicate (year, location, month) = (" + std::to_string(r.year) + ", " +
                              format_double(r.km) + ", " + std::to_string(r.month) + ")");
    years_seen.insert(r.year);
    months_seen.insert(r.month);
    kms_seen.insert(r.km);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ParseError("no data rows in " + path, lineno);

  std::vector<int> year_labels(years_seen.begin(), years_seen.end());
  std::vector<double> kms(kms_seen.rbegin(), kms_seen.rend());  // descending: upstream first
  bool baseline = *months_seen.begin() == 0;
  int n_months = *months_seen.rbegin();
  if (n_months < 1) throw SchemaError("no analysis months (all rows are month 0)");

  PanelDataset data(year_labels, kms, n_months, baseline);
  std::string outcome = schema.outcome_col, exposure_raw = schema.exposure_col;
  if (!outcome.empty()) {
    data.add_variable(outcome);
    data.outcome_var = outcome;
    data.outcome_logged = schema.outcome_logged;
  }
  if (!exposure_raw.empty()) {
    data.add_variable(exposure_raw);
    data.exposure_raw_var = exposure_raw;
  }
  for (const auto& c : schema.covariate_cols) {
    data.add_variable(c);
    data.covariate_vars.push_back(c);
  }

  auto year_index = [&](int y) {
    return static_cast<int>(std::lower_bound(year_labels.begin(), year_labels.end(), y) -
                            year_labels.begin());
  };
  auto loc_index = [&](double km) {
    for (std::size_t s = 0; s < kms.size(); ++s)
      if (kms[s] == km) return static_cast<int>(s);
    throw SchemaError("location lookup failed");
  };

  for (const auto& r : rows) {
    int i = year_index(r.year), s = loc_index(r.km), t = r.month;
    std::size_t fi = 0;
    if (!outcome.empty()) {
      if (auto v = r.fields[fi]) {
        if (schema.outcome_logged) {
          data.set(outcome, i, s, t, *v);
        } else {
          if (*v <= 0.0)
            throw ValueError("non-positive outcome " + format_double(*v) + " at (" +
                             std::to_string(r.year) + ", " + format_double(r.km) + ", " +
                             std::to_string(r.month) + ") cannot be log2-transformed");
          data.set(outcome, i, s, t, std::log2(*v));
          data.outcome_raw_[data.cell_index(i, s, t)] = *v;
        }
      }
    }
    ++fi;
    if (!exposure_raw.empty()) {
      if (auto v = r.fields[fi]) data.set(exposure_raw, i, s, t, *v);
    }
    ++fi;
    for (const auto& c : schema.covariate_cols) {
      if (auto v = r.fields[fi]) data.set(c, i, s, t, *v);
      ++fi;
    }
  }
  return data;
}

void save_csv(const PanelDataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // binary: no platform newline translation
  if (!out) throw Error("cannot write '" + path + "'");

  std::vector<std::string> cols;
  if (!data.outcome_var.empty()) cols.push_back(data.outcome_var);
  if (!data.exposure_raw_var.empty()) cols.push_back(data.exposure_raw_var);
  if (!data.exposure_var.empty() && data.exposure_var != data.exposure_raw_var)
    cols.push_back(data.exposure_var);
  for (const auto& c : data.covariate_vars) cols.push_back(c);

  out << "year,location_km,month";
  for (const auto& c : cols) out << "," << c;
  out << "\n";

  for (int i = 0; i < data.years(); ++i)
    for (int s = 0; s < data.locations(); ++s)
      for (int t = data.first_month(); t <= data.months(); ++t) {
        out << data.year_labels()[i] << "," << format_double(data.location_km()[s]) << "," << t;
        for (const auto& c : cols) {
          out << ",";
          auto v = data.value(c, i, s, t);
          if (c == data.outcome_var && !data.outcome_logged) {
            auto raw = data.outcome_raw_[data.cell_index(i, s, t)];
            if (raw) out << format_double(*raw);
          } else if (v) {
            out << format_double(*v);
          }
        }
        out << "\n";
      }
}

double sample_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw EmptyWindowError("quantile of an empty sample");
  if (q < 0.0 || q > 1.0) throw ValueError("quantile level outside [0,1]");
  std::sort(values.begin(), values.end());
  double h = (static_cast<double>(values.size()) - 1.0) * q;
  auto lo = static_cast<std::size_t>(std::floor(h));
  auto hi = static_cast<std::size_t>(std::ceil(h));
  return values[lo] + (h - lo) * (values[hi] - values[lo]);
}

PanelDataset discretize_exposure(const PanelDataset& data, CutpointRule& rule) {
  if (data.exposure_raw_var.empty()) throw SchemaError("no raw exposure variable registered");
  if (rule.s1 < 0 || rule.s2 < 0 || rule.s1 >= data.locations() || rule.s2 >= data.locations())
    throw SchemaError("cutpoint rule locations outside the grid");

  std::vector<double> pool;
  for (int i = 0; i < data.years(); ++i)
    for (int s : {rule.s1, rule.s2})
      for (int t = data.first_month(); t <= data.months(); ++t) {
        if (!rule.probe_months.empty() && !rule.probe_months.count(t)) continue;
        if (auto v = data.value(data.exposure_raw_var, i, s, t)) pool.push_back(*v);
      }
  if (pool.empty()) throw EmptyWindowError("no non-missing exposure values in the probe window");
  rule.cutpoint = sample_quantile(pool, rule.quantile);

  PanelDataset out = data;
  const std::string a = "a";
  out.add_variable(a);
  out.exposure_var = a;
  for (int i = 0; i < out.years(); ++i)
    for (int s = 0; s < out.locations(); ++s)
      for (int t = out.first_month(); t <= out.months(); ++t) {
        if (auto v = out.value(out.exposure_raw_var, i, s, t))
          out.set(a, i, s, t, *v > rule.cutpoint ? 1.0 : 0.0);
        else
          out.clear(a, i, s, t);
      }
  return out;
}

ImputationResult impute_simple(const PanelDataset& data, const std::string& variable) {
  if (!data.has_variable(variable)) throw SchemaError("unknown variable '" + variable + "'");
  ImputationResult res{data, {}};
  const PanelDataset& orig = data;  // rules read pre-imputation values only

  auto orig_val = [&](int i, int s, int t) -> std::optional<double> {
    if (!orig.in_grid(i, s, t)) return std::nullopt;
    return orig.value(variable, i, s, t);
  };

  for (int i = 0; i < data.years(); ++i)
    for (int s = 0; s < data.locations(); ++s)
      for (int t = data.first_month(); t <= data.months(); ++t) {
        if (orig_val(i, s, t)) continue;
        std::optional<double> fill;
        int rule = 0;
        if (auto up = orig_val(i, s - 1, t), dn = orig_val(i, s + 1, t); up && dn) {
          fill = 0.5 * (*up + *dn);
          rule = 1;
        } else if (auto up2 = orig_val(i, s - 2, t), dn2 = orig_val(i, s + 2, t); up2 && dn2) {
          fill = 0.5 * (*up2 + *dn2);
          rule = 2;
        } else if (auto pm = orig_val(i, s, t - 1), nm = orig_val(i, s, t + 1); pm && nm) {
          fill = 0.5 * (*pm + *nm);
          rule = 3;
        }
        if (fill) {
          res.data.set(variable, i, s, t, *fill);
          ++res.log.filled;
        } else {
          ++res.log.unfilled;
        }
        res.log.records.push_back({i, s, t, variable, rule, fill});
      }
  return res;
}

std::string ImputationLog::to_csv() const {
  std::ostringstream out;
  out << "year_index,location_index,month,variable,rule_used,value\n";
  for (const auto& r : records) {
    out << r.i << "," << r.s << "," << r.t << "," << r.variable << ","
        << (r.rule == 0 ? "unfilled" : std::to_string(r.rule)) << ",";
    if (r.value) out << format_double(*r.value);
    out << "\n";
  }
  return out.str();
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::size_t n = x.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(n);
  std::size_t k = 0;
  while (k < n) {
    std::size_t j = k;
    while (j + 1 < n && x[idx[j + 1]] == x[idx[k]]) ++j;
    double r = 0.5 * (static_cast<double>(k) + static_cast<double>(j)) + 1.0;
    for (std::size_t q = k; q <= j; ++q) rank[idx[q]] = r;
    k = j + 1;
  }
  return rank;
}

}  // namespace

double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ValueError("spearman needs two equal series, n >= 2");
  auto rx = average_ranks(x), ry = average_ranks(y);
  double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t k = 0; k < rx.size(); ++k) {
    sxy += (rx[k] - mx) * (ry[k] - my);
    sxx += (rx[k] - mx) * (rx[k] - mx);
    syy += (ry[k] - my) * (ry[k] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw ValueError("spearman undefined for a constant series");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<SpearmanRow> spearman_screen(const PanelDataset& data, int sstar,
                                         const std::vector<std::string>& variables) {
  if (data.outcome_var.empty()) throw SchemaError("no outcome variable registered");
  if (sstar < 0 || sstar >= data.locations()) throw SchemaError("target location outside the grid");

  std::vector<SpearmanRow> out;
  for (int s = 0; s < data.locations(); ++s) {
    for (const auto& var : variables) {
      std::vector<double> xs, ys;
      for (int i = 0; i < data.years(); ++i)
        for (int t = 1; t <= data.months(); ++t) {
          auto xv = data.value(var, i, s, t);
          auto yv = data.value(data.outcome_var, i, sstar, t);
          if (xv && yv) {
            xs.push_back(*xv);
            ys.push_back(*yv);
          }
        }
      SpearmanRow row{s, data.location_km()[s], var, 0.0, static_cast<int>(xs.size()), false};
      if (xs.size() < 3) {
        row.skipped = true;
      } else {
        row.rho = spearman_rho(xs, ys);
      }
      out.push_back(row);
    }
  }
  return out;
}

}  // namespace stgm
