// Balanced-panel data model: ingestion from long-form delimited files,
// validation, and the weighting / within / detrending transforms that
// produce the stacked regression design. Stacking is time-major: row
// (t-1)*N + i, matching U = (u_1', ..., u_T')'.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pfgls/errors.hpp"

namespace pfgls {

struct PanelData {
  int n_units = 0;     // N
  int n_periods = 0;   // T
  int n_regressors = 0;  // d
  Eigen::MatrixXd y;                // N x T
  std::vector<Eigen::MatrixXd> x;   // d matrices, each N x T
  std::vector<std::string> unit_labels;  // size N, sorted
  std::vector<std::string> time_labels;  // size T, sorted

  void validate() const {
    if (n_units < 2 || n_periods < 2 || n_regressors < 1)
      throw ValidationError("PanelData: need N >= 2, T >= 2, d >= 1 (got N=" +
                            std::to_string(n_units) + ", T=" + std::to_string(n_periods) +
                            ", d=" + std::to_string(n_regressors) + ")");
    if (y.rows() != n_units || y.cols() != n_periods ||
        static_cast<int>(x.size()) != n_regressors)
      throw ValidationError("PanelData: array shapes do not match N, T, d");
    for (const auto& xk : x)
      if (xk.rows() != n_units || xk.cols() != n_periods)
        throw ValidationError("PanelData: regressor array shape mismatch");
    if (!y.allFinite()) throw ValidationError("PanelData: non-finite response value");
    for (const auto& xk : x)
      if (!xk.allFinite()) throw ValidationError("PanelData: non-finite regressor value");
  }
};

struct DesignSpec {
  bool unit_fe = false;    // alpha_i
  bool time_fe = false;    // mu_t
  bool unit_trend = false; // delta_i * t
  std::optional<Eigen::VectorXd> weights;  // per-unit, strictly positive
};

struct StackedModel {
  Eigen::VectorXd y;  // NT, time-major
  Eigen::MatrixXd x;  // NT x d
  int n_units = 0;
  int n_periods = 0;
  std::vector<std::string> transform_log;
};

struct ColumnMap {
  std::string unit;
  std::string time;
  std::string y;
  std::vector<std::string> x;
  std::optional<std::string> weights;
};

struct IngestResult {
  PanelData data;
  std::optional<Eigen::VectorXd> unit_weights;  // from the weights column, per unit
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == delim) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline bool parse_double(const std::string& tok, double& out) {
  if (tok.empty()) return false;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last && std::isfinite(out);
}

// Labels sort numerically when every label parses as a number, so that
// e.g. time labels 2, 10 keep their temporal order; otherwise
// lexicographically.
inline std::vector<std::string> sorted_labels(std::vector<std::string> labels) {
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  bool all_numeric = true;
  std::vector<std::pair<double, std::string>> keyed;
  keyed.reserve(labels.size());
  for (const auto& l : labels) {
    double v;
    if (!parse_double(l, v)) {
      all_numeric = false;
      break;
    }
    keyed.emplace_back(v, l);
  }
  if (all_numeric) {
    std::sort(keyed.begin(), keyed.end());
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = keyed[i].second;
  }
  return labels;
}

}  // namespace detail

// Reads a long-form delimited text file (header row; comma, tab or
// semicolon, auto-detected) into a validated balanced panel. Unit and
// time labels are sorted and indexed 1..N, 1..T.
inline IngestResult ingest_long_csv(const std::string& path, const ColumnMap& cols) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");

  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  while (!lines.empty() && detail::trim(lines.back()).empty()) lines.pop_back();
  if (lines.size() < 2) throw ParseError("'" + path + "': need a header row and data rows", 1);

  // Delimiter: the candidate splitting the header into the most fields.
  char delim = ',';
  size_t best = detail::split_line(lines[0], ',').size();
  for (char cand : {'\t', ';'}) {
    size_t n = detail::split_line(lines[0], cand).size();
    if (n > best) {
      best = n;
      delim = cand;
    }
  }

  const std::vector<std::string> header = detail::split_line(lines[0], delim);
  auto col_index = [&](const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw ParseError("'" + path + "': column '" + name + "' not found in header", 1);
  };
  const int ci_unit = col_index(cols.unit);
  const int ci_time = col_index(cols.time);
  const int ci_y = col_index(cols.y);
  if (cols.x.empty()) throw ConfigError("ingest_long_csv: at least one regressor column required");
  std::vector<int> ci_x;
  for (const auto& name : cols.x) ci_x.push_back(col_index(name));
  int ci_w = -1;
  if (cols.weights) ci_w = col_index(*cols.weights);

  struct Row {
    std::string unit, time;
    double y;
    std::vector<double> x;
    double w;
    long line_no;
  };
  std::vector<Row> rows;
  rows.reserve(lines.size() - 1);
  std::vector<std::string> unit_set, time_set;

  for (size_t li = 1; li < lines.size(); ++li) {
    const long line_no = static_cast<long>(li) + 1;
    if (detail::trim(lines[li]).empty()) continue;
    const std::vector<std::string> f = detail::split_line(lines[li], delim);
    if (f.size() != header.size())
      throw ParseError("'" + path + "': expected " + std::to_string(header.size()) +
                           " fields but found " + std::to_string(f.size()) + " at line " +
                           std::to_string(line_no),
                       line_no);
    Row r;
    r.unit = f[ci_unit];
    r.time = f[ci_time];
    r.line_no = line_no;
    auto numeric = [&](int ci, const std::string& what) {
      double v;
      if (!detail::parse_double(f[ci], v))
        throw ParseError("'" + path + "': non-numeric value '" + f[ci] + "' in column '" + what +
                             "' at line " + std::to_string(line_no),
                         line_no);
      return v;
    };
    r.y = numeric(ci_y, cols.y);
    for (size_t k = 0; k < ci_x.size(); ++k) r.x.push_back(numeric(ci_x[k], cols.x[k]));
    r.w = ci_w >= 0 ? numeric(ci_w, *cols.weights) : 1.0;
    unit_set.push_back(r.unit);
    time_set.push_back(r.time);
    rows.push_back(std::move(r));
  }

  const std::vector<std::string> units = detail::sorted_labels(std::move(unit_set));
  const std::vector<std::string> times = detail::sorted_labels(std::move(time_set));
  const int n = static_cast<int>(units.size());
  const int t_len = static_cast<int>(times.size());
  std::map<std::string, int> unit_ix, time_ix;
  for (int i = 0; i < n; ++i) unit_ix[units[i]] = i;
  for (int t = 0; t < t_len; ++t) time_ix[times[t]] = t;

  PanelData data;
  data.n_units = n;
  data.n_periods = t_len;
  data.n_regressors = static_cast<int>(cols.x.size());
  data.y.setZero(n, t_len);
  data.x.assign(cols.x.size(), Eigen::MatrixXd::Zero(n, t_len));
  data.unit_labels = units;
  data.time_labels = times;

  Eigen::MatrixXd weights = Eigen::MatrixXd::Constant(n, t_len, std::nan(""));
  std::vector<std::vector<char>> seen(n, std::vector<char>(t_len, 0));
  for (const Row& r : rows) {
    const int i = unit_ix.at(r.unit);
    const int t = time_ix.at(r.time);
    if (seen[i][t])
      throw ValidationError("'" + path + "': duplicate cell (" + r.unit + ", " + r.time +
                            ") at line " + std::to_string(r.line_no));
    seen[i][t] = 1;
    data.y(i, t) = r.y;
    for (size_t k = 0; k < r.x.size(); ++k) data.x[k](i, t) = r.x[k];
    weights(i, t) = r.w;
  }

  std::vector<std::string> missing;
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < t_len; ++t)
      if (!seen[i][t] && missing.size() < 10) missing.push_back("(" + units[i] + ", " + times[t] + ")");
  long missing_total = static_cast<long>(n) * t_len - static_cast<long>(rows.size());
  if (missing_total > 0) {
    std::ostringstream msg;
    msg << "'" << path << "': unbalanced panel, " << missing_total << " missing cell(s): ";
    for (size_t k = 0; k < missing.size(); ++k) msg << (k ? ", " : "") << missing[k];
    if (missing_total > static_cast<long>(missing.size())) msg << ", ...";
    throw ValidationError(msg.str());
  }

  data.validate();

  IngestResult out;
  out.data = std::move(data);
  if (ci_w >= 0) {
    Eigen::VectorXd w(n);
    for (int i = 0; i < n; ++i) {
      w(i) = weights(i, 0);
      for (int t = 1; t < t_len; ++t)
        if (weights(i, t) != w(i))
          throw ValidationError("'" + path + "': weights column varies within unit '" + units[i] +
                                "'; per-unit weights must be constant over time");
    }
    out.unit_weights = std::move(w);
  }
  return out;
}

namespace detail {

// Iterated unit/time demeaning to tolerance 1e-12 (one row+column pass
// suffices on balanced data; the loop verifies it).
inline int two_way_demean(Eigen::MatrixXd& m, bool unit_fe, bool time_fe) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  int iter = 0;
  for (; iter < 100; ++iter) {
    if (unit_fe) m.colwise() -= m.rowwise().mean().eval();
    if (time_fe) m.rowwise() -= m.colwise().mean().eval();
    double resid = 0.0;
    if (unit_fe) resid = std::max(resid, m.rowwise().mean().cwiseAbs().maxCoeff());
    if (time_fe) resid = std::max(resid, m.colwise().mean().cwiseAbs().maxCoeff());
    if (resid <= 1e-12 * scale) return iter + 1;
  }
  throw ConvergenceError("two-way demeaning did not reach tolerance", 0, 0);
}

// Partials {1, t} out of every row of m (per-unit linear detrend).
inline void detrend_rows(Eigen::MatrixXd& m) {
  const int t_len = static_cast<int>(m.cols());
  Eigen::VectorXd trend(t_len);
  for (int t = 0; t < t_len; ++t) trend(t) = t + 1;
  const double t_mean = trend.mean();
  const double ss = (trend.array() - t_mean).square().sum();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double y_mean = m.row(i).mean();
    const double slope = ((trend.array() - t_mean) * (m.row(i).transpose().array() - y_mean)).sum() / ss;
    for (int t = 0; t < t_len; ++t) m(i, t) -= y_mean + slope * (trend(t) - t_mean);
  }
}

}  // namespace detail

// Applies, in order: per-unit sqrt(weight) scaling, the within
// transformation for the requested fixed effects, and per-unit linear
// detrending; then stacks time-major.
inline StackedModel build_stacked(const PanelData& data, const DesignSpec& spec) {
  data.validate();
  const int n = data.n_units, t_len = data.n_periods, d = data.n_regressors;

  if (spec.unit_trend && t_len < 3)
    throw ValidationError("build_stacked: per-unit trend needs T >= 3 (intercept plus slope leave "
                          "no residual variation at T=2)");

  Eigen::MatrixXd y = data.y;
  std::vector<Eigen::MatrixXd> x = data.x;
  StackedModel model;
  model.n_units = n;
  model.n_periods = t_len;

  if (spec.weights) {
    if (spec.weights->size() != n)
      throw ValidationError("build_stacked: weights length must equal N");
    if ((spec.weights->array() <= 0.0).any())
      throw ValidationError("build_stacked: weights must be strictly positive");
    const Eigen::VectorXd s = spec.weights->array().sqrt();
    y.array().colwise() *= s.array();
    for (auto& xk : x) xk.array().colwise() *= s.array();
    model.transform_log.push_back("weights: all variables scaled by sqrt(unit weight)");
  }

  if (spec.unit_fe || spec.time_fe) {
    int iters = detail::two_way_demean(y, spec.unit_fe, spec.time_fe);
    for (auto& xk : x) iters = std::max(iters, detail::two_way_demean(xk, spec.unit_fe, spec.time_fe));
    std::string which = spec.unit_fe && spec.time_fe ? "unit and time"
                        : spec.unit_fe              ? "unit"
                                                    : "time";
    model.transform_log.push_back("within: " + which + " effects removed (" +
                                  std::to_string(iters) + " demeaning pass(es))");
  }

  if (spec.unit_trend) {
    detail::detrend_rows(y);
    for (auto& xk : x) detail::detrend_rows(xk);
    model.transform_log.push_back("trend: per-unit linear trend partialled out");
  }

  model.y.resize(static_cast<Eigen::Index>(n) * t_len);
  model.x.resize(static_cast<Eigen::Index>(n) * t_len, d);
  for (int t = 0; t < t_len; ++t)
    for (int i = 0; i < n; ++i) {
      const Eigen::Index row = static_cast<Eigen::Index>(t) * n + i;
      model.y(row) = y(i, t);
      for (int k = 0; k < d; ++k) model.x(row, k) = x[k](i, t);
    }
  return model;
}

// Reshapes a time-major stacked NT vector back to an N x T array.
inline Eigen::MatrixXd unstack(const Eigen::VectorXd& v, int n_units, int n_periods) {
  if (v.size() != static_cast<Eigen::Index>(n_units) * n_periods)
    throw DimensionError("unstack: vector length is not N*T");
  Eigen::MatrixXd m(n_units, n_periods);
  for (int t = 0; t < n_periods; ++t)
    for (int i = 0; i < n_units; ++i) m(i, t) = v(static_cast<Eigen::Index>(t) * n_units + i);
  return m;
}

}  // namespace pfgls
