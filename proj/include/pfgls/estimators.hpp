// Estimators over the stacked panel model: OLS with iid/White/clustered
// standard errors, the FGLS estimator with its non-sandwich variance
// (X' Omega^-1 X)^-1, the infeasible-GLS oracle for tests, normal-based
// Wald tests, and the end-to-end auto-tuned pipeline.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pfgls/block_matrix.hpp"
#include "pfgls/covariance.hpp"
#include "pfgls/errors.hpp"
#include "pfgls/panel.hpp"

namespace pfgls {

enum class EstimatorKind { ols, fgls, fgls_diag, gls_oracle };

inline const char* to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::ols: return "ols";
    case EstimatorKind::fgls: return "fgls";
    case EstimatorKind::fgls_diag: return "fgls_diag";
    case EstimatorKind::gls_oracle: return "gls_oracle";
  }
  return "?";
}

// Tuning trace carried through the pipeline for auditability.
struct TuningProvenance {
  std::optional<double> c;       // PD lower bound
  std::optional<double> C_bar;   // diagonalizing upper bound
  std::optional<double> M_star;  // cross-validated constant (when auto-tuned)
  std::optional<int> P;          // CV folds
  bool small_t_advisory = false;
  std::vector<std::pair<double, double>> cv_curve;
  std::optional<SparsityDiagnostics> diagnostics;
};

struct EstimationResult {
  EstimatorKind kind = EstimatorKind::ols;
  Eigen::VectorXd beta;
  Eigen::MatrixXd vcov;
  Eigen::VectorXd se;
  Eigen::VectorXd t_stats;
  Eigen::MatrixXd gamma_hat;   // X' Omega^-1 X / NT (X'X/NT for OLS)
  Eigen::VectorXd residuals;   // stacked, time-major
  TuningConfig tuning;         // resolved tuning (fgls kinds)
  TuningProvenance provenance;
  std::vector<std::string> transform_log;
};

enum class SeKind { iid, white, cluster_by_unit };

namespace detail {

// Inverts the d x d Gram matrix after a conditioning check; reports the
// smallest singular value of X on failure.
inline Eigen::MatrixXd checked_inverse(const Eigen::MatrixXd& gram, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > 1e12)
    throw SingularMatrixError(std::string(what) +
                                  ": design is numerically singular (smallest singular value " +
                                  std::to_string(std::sqrt(std::max(lo, 0.0))) + ")",
                              std::sqrt(std::max(lo, 0.0)));
  return gram.llt().solve(Eigen::MatrixXd::Identity(gram.rows(), gram.cols()));
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Acklam's rational approximation for the standard normal quantile,
// polished with one Halley step.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("normal_quantile: p must lie in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

}  // namespace detail

// Variance matrix of the OLS coefficients under the requested error
// assumption (no degrees-of-freedom correction on the sandwich forms).
inline Eigen::MatrixXd ols_vcov(const StackedModel& model, const Eigen::VectorXd& residuals,
                                SeKind kind) {
  const Eigen::Index nt = model.x.rows();
  const Eigen::Index d = model.x.cols();
  if (residuals.size() != nt) throw DimensionError("ols_vcov: residual length mismatch");
  const Eigen::MatrixXd inv = detail::checked_inverse(model.x.transpose() * model.x, "ols_vcov");
  switch (kind) {
    case SeKind::iid: {
      const double sigma2 = residuals.squaredNorm() / static_cast<double>(nt - d);
      return sigma2 * inv;
    }
    case SeKind::white: {
      Eigen::MatrixXd weighted = model.x;
      weighted.array().colwise() *= residuals.array().square();
      return inv * (model.x.transpose() * weighted) * inv;
    }
    case SeKind::cluster_by_unit: {
      const int n = model.n_units, t_len = model.n_periods;
      Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(d, d);
      for (int i = 0; i < n; ++i) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(d);
        for (int t = 0; t < t_len; ++t) {
          const Eigen::Index row = static_cast<Eigen::Index>(t) * n + i;
          g += model.x.row(row).transpose() * residuals(row);
        }
        meat += g * g.transpose();
      }
      return inv * meat * inv;
    }
  }
  throw ConfigError("ols_vcov: unknown SE kind");
}

inline Eigen::VectorXd ols_standard_errors(const StackedModel& model,
                                           const Eigen::VectorXd& residuals, SeKind kind) {
  return ols_vcov(model, residuals, kind).diagonal().cwiseMax(0.0).cwiseSqrt();
}

inline EstimationResult ols(const StackedModel& model) {
  const Eigen::Index nt = model.x.rows();
  const Eigen::Index d = model.x.cols();
  if (model.y.size() != nt) throw DimensionError("ols: Y length does not match X");
  if (nt <= d) throw ValidationError("ols: more coefficients than observations");

  const Eigen::MatrixXd gram = model.x.transpose() * model.x;
  const Eigen::MatrixXd inv = detail::checked_inverse(gram, "ols");

  EstimationResult r;
  r.kind = EstimatorKind::ols;
  r.beta = inv * (model.x.transpose() * model.y);
  r.residuals = model.y - model.x * r.beta;
  r.vcov = ols_vcov(model, r.residuals, SeKind::iid);
  r.se = r.vcov.diagonal().cwiseMax(0.0).cwiseSqrt();
  r.t_stats = Eigen::VectorXd::Zero(d);
  for (Eigen::Index k = 0; k < d; ++k) r.t_stats(k) = r.se(k) > 0 ? r.beta(k) / r.se(k) : 0.0;
  r.gamma_hat = gram / static_cast<double>(nt);
  r.transform_log = model.transform_log;
  return r;
}

namespace detail {

inline EstimationResult gls_from_solves(const StackedModel& model, const Eigen::MatrixXd& a,
                                        const Eigen::VectorXd& b, EstimatorKind kind) {
  const Eigen::Index nt = model.x.rows();
  Eigen::MatrixXd gram = model.x.transpose() * a;  // X' Omega^-1 X
  gram = 0.5 * (gram + gram.transpose()).eval();
  const Eigen::MatrixXd inv = checked_inverse(gram, "fgls");

  EstimationResult r;
  r.kind = kind;
  r.beta = inv * (model.x.transpose() * b);
  r.vcov = 0.5 * (inv + inv.transpose());
  r.se = r.vcov.diagonal().cwiseMax(0.0).cwiseSqrt();
  r.t_stats = Eigen::VectorXd::Zero(r.beta.size());
  for (Eigen::Index k = 0; k < r.beta.size(); ++k)
    r.t_stats(k) = r.se(k) > 0 ? r.beta(k) / r.se(k) : 0.0;
  r.gamma_hat = gram / static_cast<double>(nt);
  r.residuals = model.y - model.x * r.beta;
  r.transform_log = model.transform_log;
  return r;
}

}  // namespace detail

// FGLS given an already factored covariance (avoids re-factorizing when
// the caller just built it).
inline EstimationResult fgls(const StackedModel& model, const BandedCholesky& factor,
                             EstimatorKind kind = EstimatorKind::fgls) {
  if (factor.dim() != model.x.rows())
    throw DimensionError("fgls: covariance dimension does not match NT");
  const Eigen::MatrixXd a = factor.solve(model.x);
  const Eigen::VectorXd b = factor.solve(model.y);
  return detail::gls_from_solves(model, a, b, kind);
}

// beta = (X' Omega^-1 X)^-1 X' Omega^-1 Y through banded solves.
inline EstimationResult fgls(const StackedModel& model, const BlockBandedMatrix& omega) {
  if (omega.dim() != model.x.rows())
    throw DimensionError("fgls: covariance dimension does not match NT");
  return fgls(model, cholesky(omega));
}

// Infeasible GLS with the true covariance; test-only oracle.
inline EstimationResult gls_oracle(const StackedModel& model, const Eigen::MatrixXd& omega_true) {
  if (omega_true.rows() != model.x.rows() || omega_true.cols() != model.x.rows())
    throw DimensionError("gls_oracle: covariance dimension does not match NT");
  Eigen::LLT<Eigen::MatrixXd> llt(omega_true);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefiniteError("gls_oracle: true covariance is not positive definite", -1);
  const Eigen::MatrixXd a = llt.solve(model.x);
  const Eigen::VectorXd b = llt.solve(model.y);
  return detail::gls_from_solves(model, a, b, EstimatorKind::gls_oracle);
}

inline EstimationResult gls_oracle(const StackedModel& model, const BlockBandedMatrix& omega_true) {
  EstimationResult r = fgls(model, omega_true);
  r.kind = EstimatorKind::gls_oracle;
  return r;
}

struct WaldResult {
  std::vector<bool> reject;
  Eigen::VectorXd p_values;
  double critical_value = 0.0;
};

// Per-coefficient two-sided tests with N(0,1) critical values; rejection
// requires |t| strictly above the critical value.
inline WaldResult wald_test(const EstimationResult& result, const Eigen::VectorXd& null_value,
                            double level) {
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("wald_test: level must be in (0,1)");
  if (null_value.size() != result.beta.size())
    throw DimensionError("wald_test: null vector length mismatch");
  WaldResult w;
  w.critical_value = detail::normal_quantile(1.0 - level / 2.0);
  w.p_values.resize(result.beta.size());
  w.reject.resize(result.beta.size());
  for (Eigen::Index k = 0; k < result.beta.size(); ++k) {
    const double diff = result.beta(k) - null_value(k);
    double t;
    if (result.se(k) > 0.0)
      t = diff / result.se(k);
    else
      t = diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    w.p_values(k) = std::erfc(std::abs(t) / std::sqrt(2.0));
    w.reject[k] = std::abs(t) > w.critical_value;
  }
  return w;
}

struct PipelineOptions {
  std::optional<int> L;      // default: plug-in bandwidth rule
  std::optional<double> M;   // default: cross-validated
  Kernel kernel = Kernel::bartlett;
  ThresholdMode threshold_mode = ThresholdMode::lag_wise;
  CvOptions cv;
  bool diag_only = false;    // FGLS(Diag): L = 0 and M >= C_bar
};

namespace detail {

template <class F>
auto with_stage(const char* stage, F&& f) {
  try {
    return f();
  } catch (const NotPositiveDefiniteError& e) {
    throw NotPositiveDefiniteError(std::string(stage) + ": " + e.what(), e.row());
  } catch (const SingularMatrixError& e) {
    throw SingularMatrixError(std::string(stage) + ": " + e.what(),
                              e.smallest_singular_value());
  } catch (const TuningError& e) {
    throw TuningError(std::string(stage) + ": " + e.what());
  } catch (const ConvergenceError& e) {
    throw ConvergenceError(std::string(stage) + ": " + e.what(), e.bracket_low(),
                           e.bracket_high());
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(stage) + ": " + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(std::string(stage) + ": " + e.what());
  }
}

}  // namespace detail

inline EstimationResult fgls_pipeline(const StackedModel& model, const PipelineOptions& opt);

// OLS residuals -> tuned covariance estimate -> FGLS, with the full
// tuning provenance embedded in the result.
inline EstimationResult fgls_pipeline(const PanelData& data, const DesignSpec& spec,
                                      const PipelineOptions& opt = PipelineOptions{}) {
  const StackedModel model =
      detail::with_stage("build_stacked", [&] { return build_stacked(data, spec); });
  return fgls_pipeline(model, opt);
}

// Same pipeline starting from an already stacked model.
inline EstimationResult fgls_pipeline(const StackedModel& model,
                                      const PipelineOptions& opt = PipelineOptions{}) {
  const EstimationResult first = detail::with_stage("ols", [&] { return ols(model); });
  const Eigen::MatrixXd res_panel = unstack(first.residuals, model.n_units, model.n_periods);
  const int t_len = model.n_periods;

  TuningConfig cfg;
  cfg.kernel = opt.kernel;
  cfg.threshold_mode = opt.threshold_mode;
  cfg.cv = opt.cv;

  TuningProvenance prov;
  EstimatorKind kind = EstimatorKind::fgls;

  if (opt.diag_only) {
    kind = EstimatorKind::fgls_diag;
    cfg.L = 0;
    const Eigen::MatrixXd r0 = lag_autocov(res_panel, 0)[0];
    const double c_bar =
        diagonalizing_bound(r0, gamma_rate(0, model.n_units, t_len));
    prov.C_bar = c_bar;
    cfg.M = c_bar > 0.0 ? c_bar * (1.0 + 1e-12) : 1.0;
  } else {
    BandwidthChoice bw{0, false};
    if (opt.L) {
      cfg.L = *opt.L;
      if (cfg.L < 0 || cfg.L >= t_len)
        throw ValidationError("fgls_pipeline: requires 0 <= L < T");
    } else {
      bw = default_bandwidth(t_len);
      cfg.L = bw.L;
    }
    prov.small_t_advisory = bw.small_t_advisory;
    if (opt.M) {
      cfg.M = *opt.M;
    } else {
      const CvResult cv = detail::with_stage(
          "cross_validate_M", [&] { return cross_validate_M(res_panel, cfg.L, cfg); });
      cfg.M = cv.M_star;
      prov.c = cv.c;
      prov.C_bar = cv.C_bar;
      prov.M_star = cv.M_star;
      prov.P = cv.P;
      prov.cv_curve = cv.curve;
    }
  }

  OmegaEstimate om =
      detail::with_stage("estimate_omega", [&] { return estimate_omega(res_panel, cfg); });
  EstimationResult result =
      detail::with_stage("fgls", [&] { return fgls(model, om.factor, kind); });
  result.tuning = cfg;
  prov.diagnostics = std::move(om.diagnostics);
  result.provenance = std::move(prov);
  result.transform_log = model.transform_log;
  return result;
}

}  // namespace pfgls
