// Nonparametric estimation of the NT x NT error covariance from panel
// residuals: lag-block autocovariances, entry-dependent soft
// thresholding across units, Bartlett tapering across lags, and the
// tuning machinery for the bandwidth L and threshold constant M
// (positive-definiteness lower bound c, diagonalizing upper bound C_bar,
// multifold cross-validation for M*).
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pfgls/block_matrix.hpp"
#include "pfgls/errors.hpp"

namespace pfgls {

enum class Kernel { bartlett, truncated };
enum class ThresholdMode { lag_wise, universal };

inline const char* to_string(Kernel k) { return k == Kernel::bartlett ? "bartlett" : "truncated"; }
inline const char* to_string(ThresholdMode m) {
  return m == ThresholdMode::lag_wise ? "lag_wise" : "universal";
}

struct CvOptions {
  std::optional<int> P_override;   // number of CV folds; default round(ln T)
  int grid_size = 50;              // points in the M grid
  std::optional<double> M_upper;   // cap on the grid upper bound
};

struct TuningConfig {
  int L = 0;        // bandwidth: lags 0..L retained
  double M = 0.0;   // threshold constant
  Kernel kernel = Kernel::bartlett;
  ThresholdMode threshold_mode = ThresholdMode::lag_wise;
  CvOptions cv;
};

// Raw and thresholded lag blocks plus the thresholding ingredients.
struct LagBlockSet {
  std::vector<Eigen::MatrixXd> raw;          // R_h, h = 0..L
  std::vector<Eigen::MatrixXd> thresholded;  // Omega~_h
  int L = 0;
  double gamma_t = 0.0;             // sqrt(log(max(L,1)*N)/T)
  Eigen::MatrixXd threshold_matrix; // tau_ij
  ThresholdMode mode = ThresholdMode::lag_wise;
};

struct SparsityDiagnostics {
  int m_n_hat = 0;                        // max_h max_i #{j : Omega~_h(i,j) != 0}
  std::vector<double> survivor_fraction;  // per lag, fraction of nonzero off-diagonals
};

// Rate entering the threshold: sqrt(log(L*N)/T), with L floored at 1 so
// the L=0 (lag-0 only) case stays defined.
inline double gamma_rate(int L, int n_units, int n_periods) {
  if (n_units < 1 || n_periods < 1) throw DimensionError("gamma_rate: N and T must be positive");
  return std::sqrt(std::log(static_cast<double>(std::max(L, 1)) * n_units) / n_periods);
}

// Sample lag-h autocovariance blocks of the residual panel (N x T),
// divisor T for every lag: R_h(i,j) = (1/T) sum_{t>h} u_it u_{j,t-h}.
// Negative lags are not stored (R_{-h} = R_h').
inline std::vector<Eigen::MatrixXd> lag_autocov(const Eigen::MatrixXd& residuals, int L) {
  const Eigen::Index t_len = residuals.cols();
  if (L < 0 || L >= t_len) throw ValidationError("lag_autocov: requires 0 <= L < T");
  std::vector<Eigen::MatrixXd> blocks(static_cast<size_t>(L) + 1);
  for (int h = 0; h <= L; ++h)
    blocks[h] = residuals.rightCols(t_len - h) * residuals.leftCols(t_len - h).transpose() /
                static_cast<double>(t_len);
  return blocks;
}

// sgn(z) * (|z| - tau)_+
inline double soft_threshold(double z, double tau) {
  const double mag = std::abs(z) - tau;
  if (mag <= 0.0) return 0.0;
  return z > 0 ? mag : -mag;
}

namespace detail {

// Soft-thresholds the off-diagonal entries of one block; diagonals pass
// through untouched (own-variances and own-autocovariances are never
// shrunk).
inline Eigen::MatrixXd soft_threshold_block(const Eigen::MatrixXd& block,
                                            const Eigen::MatrixXd& tau) {
  Eigen::MatrixXd out = block;
  for (Eigen::Index i = 0; i < block.rows(); ++i)
    for (Eigen::Index j = 0; j < block.cols(); ++j)
      if (i != j) out(i, j) = soft_threshold(block(i, j), tau(i, j));
  return out;
}

}  // namespace detail

// Applies the entry-dependent threshold tau_ij = M * gamma_T *
// sqrt(R_0,ii R_0,jj) to every lag block. lag_wise thresholds each lag
// independently; universal zeroes (i,j) everywhere only when
// max_h |R_h(i,j)| <= tau_ij, so a time-invariant cluster membership is
// recovered from all lags jointly.
inline LagBlockSet soft_threshold_blocks(const std::vector<Eigen::MatrixXd>& raw, double M,
                                         int n_periods,
                                         ThresholdMode mode = ThresholdMode::lag_wise) {
  if (raw.empty()) throw DimensionError("soft_threshold_blocks: no lag blocks");
  const Eigen::Index n = raw[0].rows();
  const int L = static_cast<int>(raw.size()) - 1;

  LagBlockSet out;
  out.raw = raw;
  out.L = L;
  out.mode = mode;
  out.gamma_t = gamma_rate(L, static_cast<int>(n), n_periods);

  for (Eigen::Index i = 0; i < n; ++i)
    if (!(raw[0](i, i) > 0.0))
      throw ValidationError("soft_threshold_blocks: R_0 has a nonpositive diagonal entry at unit " +
                            std::to_string(i + 1) + "; the threshold scale is undefined");

  Eigen::MatrixXd tau(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      tau(i, j) = M * out.gamma_t * std::sqrt(std::abs(raw[0](i, i)) * std::abs(raw[0](j, j)));
  out.threshold_matrix = tau;

  out.thresholded.reserve(raw.size());
  if (mode == ThresholdMode::lag_wise) {
    for (const auto& block : raw) out.thresholded.push_back(detail::soft_threshold_block(block, tau));
  } else {
    Eigen::MatrixXd max_abs = raw[0].cwiseAbs();
    for (int h = 1; h <= L; ++h) max_abs = max_abs.cwiseMax(raw[h].cwiseAbs());
    for (const auto& block : raw) {
      Eigen::MatrixXd t = detail::soft_threshold_block(block, tau);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
          if (i != j && max_abs(i, j) <= tau(i, j)) t(i, j) = 0.0;
      out.thresholded.push_back(std::move(t));
    }
  }
  return out;
}

// Bartlett kernel weights omega(h, L) = 1 - h/(L+1), h = 0..L.
inline std::vector<double> bartlett_weights(int L) {
  if (L < 0) throw ValidationError("bartlett_weights: L must be >= 0");
  std::vector<double> w(static_cast<size_t>(L) + 1);
  for (int h = 0; h <= L; ++h) w[h] = 1.0 - static_cast<double>(h) / (L + 1);
  return w;
}

inline std::vector<double> kernel_weights(Kernel k, int L) {
  if (k == Kernel::bartlett) return bartlett_weights(L);
  if (L < 0) throw ValidationError("kernel_weights: L must be >= 0");
  return std::vector<double>(static_cast<size_t>(L) + 1, 1.0);
}

struct BandwidthChoice {
  int L = 0;
  bool small_t_advisory = false;  // T < 100: the rule is aggressive, L <= 3 recommended
};

// Plug-in bandwidth rule L* = round(4 (T/100)^(2/9)), capped at T-2.
inline BandwidthChoice default_bandwidth(int n_periods) {
  if (n_periods < 2) throw ValidationError("default_bandwidth: T must be >= 2");
  long rule = std::lround(4.0 * std::pow(n_periods / 100.0, 2.0 / 9.0));
  BandwidthChoice out;
  out.L = static_cast<int>(std::max(0L, std::min<long>(rule, n_periods - 2)));
  out.small_t_advisory = n_periods < 100;
  return out;
}

// Smallest constant that zeroes every off-diagonal lag-0 entry:
// C_bar = max_{i != j} |R_0(i,j)| / (gamma sqrt(R_0(i,i) R_0(j,j))).
// Zero when N == 1 (no off-diagonals exist).
inline double diagonalizing_bound(const Eigen::MatrixXd& r0, double gamma) {
  const Eigen::Index n = r0.rows();
  double c_bar = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double scale = gamma * std::sqrt(std::abs(r0(i, i)) * std::abs(r0(j, j)));
      if (scale > 0.0) c_bar = std::max(c_bar, std::abs(r0(i, j)) / scale);
    }
  return c_bar;
}

// Lower bound c on the admissible threshold constants: the boundary
// above which the assembled Omega^(M, L) stays positive definite.
// Tests PD (by Cholesky success) on a coarse grid over (0, C_bar],
// scanning down from C_bar; the first failing point brackets c, which
// is then bisected to an absolute resolution of 1e-3. Returns 0 when
// every tested point is PD.
inline double pd_lower_bound_c(const std::vector<Eigen::MatrixXd>& raw, int n_periods,
                               Kernel kernel = Kernel::bartlett, int grid_points = 20) {
  if (raw.empty()) throw DimensionError("pd_lower_bound_c: no lag blocks");
  const int n = static_cast<int>(raw[0].rows());
  const int L = static_cast<int>(raw.size()) - 1;
  const std::vector<double> w = kernel_weights(kernel, L);

  auto is_pd = [&](double m_val) {
    LagBlockSet lbs = soft_threshold_blocks(raw, m_val, n_periods, ThresholdMode::lag_wise);
    return attempt_cholesky(assemble(lbs.thresholded, n_periods, w)).ok();
  };

  const double gamma = gamma_rate(L, n, n_periods);
  const double c_bar = diagonalizing_bound(raw[0], gamma);
  if (c_bar <= 0.0) {
    // No off-diagonal mass (e.g. N == 1): M has no effect; PD either holds or never will.
    if (is_pd(1.0)) return 0.0;
    throw NotPositiveDefiniteError(
        "pd_lower_bound_c: estimator is not positive definite at any threshold; "
        "try a smaller bandwidth L",
        -1);
  }
  if (!is_pd(c_bar))
    throw NotPositiveDefiniteError(
        "pd_lower_bound_c: estimator is not positive definite even at the diagonalizing "
        "bound C_bar = " + std::to_string(c_bar) + "; try a smaller bandwidth L",
        -1);

  grid_points = std::max(grid_points, 2);
  double fail_at = -1.0, pass_above = c_bar;
  for (int k = grid_points - 1; k >= 0; --k) {
    const double m_val = c_bar * k / grid_points;
    if (!is_pd(m_val)) {
      fail_at = m_val;
      break;
    }
    pass_above = m_val;
  }
  if (fail_at < 0.0) return 0.0;

  double lo = fail_at, hi = pass_above;
  while (hi - lo > 1e-3) {
    const double mid = 0.5 * (lo + hi);
    if (is_pd(mid))
      hi = mid;
    else
      lo = mid;
  }
  return hi;
}

struct CvResult {
  double M_star = 0.0;
  std::vector<std::pair<double, double>> curve;  // (M, objective)
  double c = 0.0;
  double C_bar = 0.0;
  int P = 0;
};

// Multifold cross-validation for the threshold constant. The sample is
// cut into P = round(ln T) contiguous time blocks; fold p uses block
// J_p as validation and thresholds the lag-0 covariance fitted on the
// remaining periods. The objective is the average squared Frobenius
// distance, minimized over a log-spaced grid on [max(c, eps), C_bar].
inline CvResult cross_validate_M(const Eigen::MatrixXd& residuals, int L,
                                 const TuningConfig& cfg = TuningConfig{}) {
  const int n = static_cast<int>(residuals.rows());
  const int t_len = static_cast<int>(residuals.cols());
  if (n < 1 || t_len < 2) throw DimensionError("cross_validate_M: need N >= 1, T >= 2");

  if (n == 1) {
    // Thresholding is vacuous without off-diagonals; any constant works.
    CvResult out;
    out.M_star = 1.0;
    out.curve = {{1.0, 0.0}};
    return out;
  }

  std::vector<Eigen::MatrixXd> raw = lag_autocov(residuals, L);
  const double gamma = gamma_rate(L, n, t_len);

  CvResult out;
  out.C_bar = diagonalizing_bound(raw[0], gamma);
  if (cfg.cv.M_upper) out.C_bar = std::min(out.C_bar, *cfg.cv.M_upper);
  out.c = pd_lower_bound_c(raw, t_len, cfg.kernel);
  const double eps = std::max(1e-3, 0.01 * out.C_bar);
  const double lower = std::max(out.c, eps);
  if (!(lower < out.C_bar))
    throw TuningError("cross_validate_M: empty admissible interval, c = " + std::to_string(out.c) +
                      " >= C_bar = " + std::to_string(out.C_bar) +
                      "; try a larger bandwidth L or check the residuals");

  out.P = cfg.cv.P_override.value_or(
      static_cast<int>(std::max(2L, std::lround(std::log(static_cast<double>(t_len))))));
  if (out.P < 2) throw ValidationError("cross_validate_M: need at least 2 folds");
  if (t_len < 2 * out.P)
    throw ValidationError("cross_validate_M: T = " + std::to_string(t_len) +
                          " too short for P = " + std::to_string(out.P) + " folds");

  // Per-fold validation covariance and training lag-0 covariance.
  struct Fold {
    Eigen::MatrixXd validation;  // lag-0 covariance on J_p
    Eigen::MatrixXd train_r0;    // lag-0 covariance off J_p
    double gamma_train = 0.0;
  };
  std::vector<Fold> folds(out.P);
  for (int p = 0; p < out.P; ++p) {
    const int start = static_cast<int>(static_cast<long>(p) * t_len / out.P);
    const int stop = static_cast<int>(static_cast<long>(p + 1) * t_len / out.P);
    const int len = stop - start;
    const int train_len = t_len - len;
    Eigen::MatrixXd val_block = residuals.middleCols(start, len);
    folds[p].validation = val_block * val_block.transpose() / static_cast<double>(len);
    Eigen::MatrixXd train(n, train_len);
    train.leftCols(start) = residuals.leftCols(start);
    train.rightCols(t_len - stop) = residuals.rightCols(t_len - stop);
    folds[p].train_r0 = train * train.transpose() / static_cast<double>(train_len);
    folds[p].gamma_train = gamma_rate(L, n, train_len);
    for (int i = 0; i < n; ++i)
      if (!(folds[p].train_r0(i, i) > 0.0))
        throw ValidationError("cross_validate_M: training fold " + std::to_string(p + 1) +
                              " has a nonpositive residual variance");
  }

  const int grid = std::max(1, cfg.cv.grid_size);
  out.curve.reserve(grid);
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < grid; ++k) {
    double m_val = grid == 1 ? lower
                             : std::exp(std::log(lower) +
                                        (std::log(out.C_bar) - std::log(lower)) * k / (grid - 1));
    if (k == grid - 1) m_val = out.C_bar;  // pin the endpoint against rounding
    double obj = 0.0;
    for (const Fold& f : folds) {
      Eigen::MatrixXd tau(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          tau(i, j) = m_val * f.gamma_train *
                      std::sqrt(std::abs(f.train_r0(i, i)) * std::abs(f.train_r0(j, j)));
      Eigen::MatrixXd thr = detail::soft_threshold_block(f.train_r0, tau);
      obj += (thr - f.validation).squaredNorm();
    }
    obj /= out.P;
    out.curve.emplace_back(m_val, obj);
    if (obj < best) {
      best = obj;
      out.M_star = m_val;
    }
  }
  return out;
}

struct OmegaEstimate {
  BlockBandedMatrix omega;
  BandedCholesky factor;
  LagBlockSet blocks;
  SparsityDiagnostics diagnostics;
};

inline SparsityDiagnostics sparsity_diagnostics(const LagBlockSet& lbs) {
  SparsityDiagnostics d;
  const Eigen::Index n = lbs.thresholded.empty() ? 0 : lbs.thresholded[0].rows();
  d.survivor_fraction.reserve(lbs.thresholded.size());
  for (const auto& block : lbs.thresholded) {
    int off_nonzero = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int row_nonzero = 0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (block(i, j) != 0.0) {
          ++row_nonzero;
          if (i != j) ++off_nonzero;
        }
      }
      d.m_n_hat = std::max(d.m_n_hat, row_nonzero);
    }
    d.survivor_fraction.push_back(n > 1 ? static_cast<double>(off_nonzero) / (n * (n - 1)) : 0.0);
  }
  return d;
}

// Full pipeline: lag autocovariances -> soft thresholding -> kernel
// weighting -> block-banded assembly, factored and diagnosed. The
// caller supplies M >= c, typically via cross_validate_M.
inline OmegaEstimate estimate_omega(const Eigen::MatrixXd& residuals, const TuningConfig& cfg) {
  const int t_len = static_cast<int>(residuals.cols());
  if (cfg.L < 0 || cfg.L >= t_len)
    throw ValidationError("estimate_omega: requires 0 <= L < T");
  std::vector<Eigen::MatrixXd> raw = lag_autocov(residuals, cfg.L);
  LagBlockSet lbs = soft_threshold_blocks(raw, cfg.M, t_len, cfg.threshold_mode);
  BlockBandedMatrix omega = assemble(lbs.thresholded, t_len, kernel_weights(cfg.kernel, cfg.L));
  CholeskyAttempt attempt = attempt_cholesky(omega);
  if (!attempt.ok()) {
    double c_est = -1.0;
    try {
      c_est = pd_lower_bound_c(raw, t_len, cfg.kernel);
    } catch (const Error&) {
    }
    throw NotPositiveDefiniteError(
        "estimate_omega: Omega(M = " + std::to_string(cfg.M) + ", L = " + std::to_string(cfg.L) +
            ") is not positive definite (pivot failure at row " + std::to_string(attempt.fail_row) +
            (c_est >= 0.0 ? "); PD lower bound c ~= " + std::to_string(c_est) : ")"),
        attempt.fail_row);
  }
  SparsityDiagnostics diag = sparsity_diagnostics(lbs);
  return OmegaEstimate{std::move(omega), std::move(*attempt.factor), std::move(lbs),
                       std::move(diag)};
}

}  // namespace pfgls
