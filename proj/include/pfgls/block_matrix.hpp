// Symmetric block-banded NT x NT matrices stored as one N x N block per
// time lag, banded Cholesky factorization and solves, eigenvalue probes,
// and small dense helpers. The full covariance estimator only has
// nonzero blocks for |t-s| <= L, so factor and solves stay within a
// scalar bandwidth of (L+1)*N - 1 and the inverse is never materialized.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pfgls/errors.hpp"

namespace pfgls {

// Stationary symmetric block-banded matrix. Stores the lag-h blocks
// W_h = block(t, t-h) for h = 0..L; the same block is used for every t
// and the upper triangle is implied by block(s,t) = block(t,s)'.
class BlockBandedMatrix {
 public:
  BlockBandedMatrix(int n_time, std::vector<Eigen::MatrixXd> lag_blocks)
      : n_time_(n_time), blocks_(std::move(lag_blocks)) {
    if (blocks_.empty()) throw DimensionError("BlockBandedMatrix: no lag blocks given");
    n_block_ = static_cast<int>(blocks_[0].rows());
    if (n_block_ < 1 || n_time_ < 1)
      throw DimensionError("BlockBandedMatrix: block dimension and time length must be positive");
    for (const auto& b : blocks_)
      if (b.rows() != n_block_ || b.cols() != n_block_)
        throw DimensionError("BlockBandedMatrix: all lag blocks must be N x N");
    band_ = static_cast<int>(blocks_.size()) - 1;
    if (band_ > n_time_ - 1)
      throw DimensionError("BlockBandedMatrix: band exceeds T-1");
    const double scale = blocks_[0].cwiseAbs().maxCoeff();
    const double asym = (blocks_[0] - blocks_[0].transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * std::max(1.0, scale))
      throw ValidationError("BlockBandedMatrix: lag-0 block is not symmetric");
  }

  int block_dim() const { return n_block_; }
  int n_time() const { return n_time_; }
  int band() const { return band_; }
  Eigen::Index dim() const { return static_cast<Eigen::Index>(n_block_) * n_time_; }
  // Largest |i-j| with a structurally nonzero scalar entry.
  int scalar_bandwidth() const { return (band_ + 1) * n_block_ - 1; }

  const Eigen::MatrixXd& lag_block(int h) const { return blocks_[h]; }

  // The (t,s) block of the implied full matrix (0-based t, s).
  Eigen::MatrixXd block(int t, int s) const {
    const int h = t - s;
    if (h >= 0) {
      if (h <= band_) return blocks_[h];
      return Eigen::MatrixXd::Zero(n_block_, n_block_);
    }
    if (-h <= band_) return blocks_[-h].transpose();
    return Eigen::MatrixXd::Zero(n_block_, n_block_);
  }

  // Dense escape hatch for tests and small problems. The upper triangle
  // is mirrored entry-by-entry from the lower one, so the result is
  // bitwise symmetric.
  Eigen::MatrixXd dense() const {
    const Eigen::Index n = dim();
    Eigen::MatrixXd full = Eigen::MatrixXd::Zero(n, n);
    for (int t = 0; t < n_time_; ++t)
      for (int h = 0; h <= band_ && t - h >= 0; ++h)
        full.block(static_cast<Eigen::Index>(t) * n_block_,
                   static_cast<Eigen::Index>(t - h) * n_block_, n_block_, n_block_) = blocks_[h];
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j) full(i, j) = full(j, i);
    return full;
  }

  // Binary dump of the lag blocks: 8-byte magic, then n_block, n_time,
  // band as int64, then the blocks in lag order, each row-major doubles.
  // Little-endian host assumed (x86/ARM).
  void save_blocks(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(kMagic, 8);
    const std::int64_t hdr[3] = {n_block_, n_time_, band_};
    out.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
    std::vector<double> row_major(static_cast<size_t>(n_block_) * n_block_);
    for (const auto& b : blocks_) {
      for (int i = 0; i < n_block_; ++i)
        for (int j = 0; j < n_block_; ++j) row_major[static_cast<size_t>(i) * n_block_ + j] = b(i, j);
      out.write(reinterpret_cast<const char*>(row_major.data()),
                static_cast<std::streamsize>(row_major.size() * sizeof(double)));
    }
    if (!out) throw Error("short write to '" + path + "'");
  }

  static BlockBandedMatrix load_blocks(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
      throw ParseError("'" + path + "' is not a pfgls block dump");
    std::int64_t hdr[3];
    in.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
    if (!in || hdr[0] < 1 || hdr[1] < 1 || hdr[2] < 0)
      throw ParseError("corrupt block dump header in '" + path + "'");
    const int n = static_cast<int>(hdr[0]);
    std::vector<Eigen::MatrixXd> blocks(static_cast<size_t>(hdr[2]) + 1);
    std::vector<double> row_major(static_cast<size_t>(n) * n);
    for (auto& b : blocks) {
      in.read(reinterpret_cast<char*>(row_major.data()),
              static_cast<std::streamsize>(row_major.size() * sizeof(double)));
      if (!in) throw ParseError("truncated block dump '" + path + "'");
      b.resize(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) b(i, j) = row_major[static_cast<size_t>(i) * n + j];
    }
    return BlockBandedMatrix(static_cast<int>(hdr[1]), std::move(blocks));
  }

 private:
  static constexpr char kMagic[9] = "PFGLSBLK";
  int n_block_;
  int n_time_;
  int band_;
  std::vector<Eigen::MatrixXd> blocks_;
};

// Weighs each lag block by its kernel weight and wraps the result.
// kernel_weights must have one entry per lag block.
inline BlockBandedMatrix assemble(const std::vector<Eigen::MatrixXd>& blocks, int n_time,
                                  const std::vector<double>& kernel_weights) {
  if (blocks.empty()) throw DimensionError("assemble: no lag blocks");
  if (kernel_weights.size() != blocks.size())
    throw DimensionError("assemble: kernel weight count does not match lag count");
  const Eigen::Index n = blocks[0].rows();
  std::vector<Eigen::MatrixXd> weighted;
  weighted.reserve(blocks.size());
  for (size_t h = 0; h < blocks.size(); ++h) {
    if (blocks[h].rows() != n || blocks[h].cols() != n)
      throw DimensionError("assemble: lag blocks must all be N x N");
    weighted.push_back(kernel_weights[h] * blocks[h]);
  }
  return BlockBandedMatrix(n_time, std::move(weighted));
}

class BandedCholesky;
struct CholeskyAttempt;
inline CholeskyAttempt attempt_cholesky(const BlockBandedMatrix& m, double diag_shift = 0.0);

// Lower-triangular banded Cholesky factor. Band storage is column
// major, LAPACK 'L' style: entry(k, j) = L(j+k, j) for k = 0..bw.
class BandedCholesky {
 public:
  Eigen::Index dim() const { return n_; }
  int bandwidth() const { return bw_; }
  double log_det() const { return log_det_; }

  // Solves A x = rhs where A = L L'. rhs is n x k.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const {
    if (rhs.rows() != n_) throw DimensionError("BandedCholesky::solve: rhs row count mismatch");
    Eigen::MatrixXd x = rhs;
    const int ld = bw_ + 1;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      double* xc = x.col(c).data();
      // forward: L y = b
      for (Eigen::Index j = 0; j < n_; ++j) {
        const double* col = &band_[static_cast<size_t>(j) * ld];
        const double yj = xc[j] / col[0];
        xc[j] = yj;
        const Eigen::Index m = std::min<Eigen::Index>(bw_, n_ - 1 - j);
        for (Eigen::Index k = 1; k <= m; ++k) xc[j + k] -= col[k] * yj;
      }
      // backward: L' x = y
      for (Eigen::Index j = n_ - 1; j >= 0; --j) {
        const double* col = &band_[static_cast<size_t>(j) * ld];
        double s = xc[j];
        const Eigen::Index m = std::min<Eigen::Index>(bw_, n_ - 1 - j);
        for (Eigen::Index k = 1; k <= m; ++k) s -= col[k] * xc[j + k];
        xc[j] = s / col[0];
      }
    }
    return x;
  }

  // Entry L(i, j) of the factor (zero outside the band).
  double factor_entry(Eigen::Index i, Eigen::Index j) const {
    if (i < j || i - j > bw_) return 0.0;
    return band_[static_cast<size_t>(j) * (bw_ + 1) + (i - j)];
  }

 private:
  friend CholeskyAttempt attempt_cholesky(const BlockBandedMatrix&, double);
  Eigen::Index n_ = 0;
  int bw_ = 0;
  double log_det_ = 0.0;
  std::vector<double> band_;
};

// Outcome of a factorization attempt. Failure is an ordinary result
// here because the tuning search probes non-PD candidates routinely.
struct CholeskyAttempt {
  std::optional<BandedCholesky> factor;
  long fail_row = -1;
  bool ok() const { return factor.has_value(); }
};

// Attempts the banded Cholesky factorization of m + diag_shift * I.
inline CholeskyAttempt attempt_cholesky(const BlockBandedMatrix& m, double diag_shift) {
  const Eigen::Index n = m.dim();
  const int nb = m.block_dim();
  const int bw = m.scalar_bandwidth();
  const int ld = bw + 1;

  BandedCholesky f;
  f.n_ = n;
  f.bw_ = bw;
  f.band_.assign(static_cast<size_t>(ld) * n, 0.0);

  // Fill the lower band from the lag blocks: row i = t*nb + a,
  // col j = s*nb + b with h = t - s gives A(i,j) = W_h(a, b).
  for (Eigen::Index j = 0; j < n; ++j) {
    const int s = static_cast<int>(j) / nb;
    const int b = static_cast<int>(j) % nb;
    double* col = &f.band_[static_cast<size_t>(j) * ld];
    const Eigen::Index m_end = std::min<Eigen::Index>(n - 1, j + bw);
    for (Eigen::Index i = j; i <= m_end; ++i) {
      const int t = static_cast<int>(i) / nb;
      const int h = t - s;
      if (h > m.band()) break;
      col[i - j] = m.lag_block(h)(static_cast<int>(i) % nb, b);
    }
    col[0] += diag_shift;
  }

  // In-place banded Cholesky (unblocked dpbtrf).
  double log_det = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double* colj = &f.band_[static_cast<size_t>(j) * ld];
    const double d = colj[0];
    if (!(d > 0.0) || !std::isfinite(d)) {
      CholeskyAttempt r;
      r.fail_row = static_cast<long>(j);
      return r;
    }
    const double rd = std::sqrt(d);
    log_det += 2.0 * std::log(rd);
    colj[0] = rd;
    const Eigen::Index m_len = std::min<Eigen::Index>(bw, n - 1 - j);
    const double inv = 1.0 / rd;
    for (Eigen::Index k = 1; k <= m_len; ++k) colj[k] *= inv;
    for (Eigen::Index k = 1; k <= m_len; ++k) {
      const double ljk = colj[k];
      if (ljk == 0.0) continue;
      double* colk = &f.band_[static_cast<size_t>(j + k) * ld];
      for (Eigen::Index i = k; i <= m_len; ++i) colk[i - k] -= colj[i] * ljk;
    }
  }
  f.log_det_ = log_det;
  CholeskyAttempt r;
  r.factor = std::move(f);
  return r;
}

// Throwing wrapper; use attempt_cholesky when failure is expected.
inline BandedCholesky cholesky(const BlockBandedMatrix& m) {
  CholeskyAttempt a = attempt_cholesky(m);
  if (!a.ok())
    throw NotPositiveDefiniteError(
        "banded Cholesky failed: non-positive pivot at row " + std::to_string(a.fail_row),
        a.fail_row);
  return std::move(*a.factor);
}

inline Eigen::MatrixXd solve(const BandedCholesky& f, const Eigen::MatrixXd& rhs) {
  return f.solve(rhs);
}

// Lemma-style bound: max_t sum_s ||block(t,s)||_op dominates the
// spectral norm of the full symmetric block matrix.
inline double block_norm_bound(const BlockBandedMatrix& m) {
  const int tmax = m.n_time();
  std::vector<double> op_norm(m.band() + 1);
  for (int h = 0; h <= m.band(); ++h) {
    const Eigen::MatrixXd& b = m.lag_block(h);
    if (b.rows() == 1) {
      op_norm[h] = std::abs(b(0, 0));
    } else {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b.transpose() * b,
                                                        Eigen::EigenvaluesOnly);
      op_norm[h] = std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
    }
  }
  double bound = 0.0;
  for (int t = 0; t < tmax; ++t) {
    double row_sum = 0.0;
    for (int h = -m.band(); h <= m.band(); ++h) {
      const int s = t - h;
      if (s < 0 || s >= tmax) continue;
      row_sum += op_norm[std::abs(h)];
    }
    bound = std::max(bound, row_sum);
  }
  return bound;
}

namespace detail {

// Bisection on the shift mu, using Cholesky success of m - mu*I as the
// predicate "lambda_min > mu". Works at any size; min_eig_probe prefers
// the dense solver for small problems.
inline double min_eig_bisect(const BlockBandedMatrix& m, int max_iter) {
  const double radius = block_norm_bound(m);
  double lo = -radius - 1.0;  // lambda_min > lo always
  double hi = radius + 1.0;   // lambda_min <= hi always
  const double rel_tol = 1e-6;
  for (int it = 0; it < max_iter; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (attempt_cholesky(m, -mid).ok())
      lo = mid;
    else
      hi = mid;
    if (hi - lo <= rel_tol * std::max({std::abs(lo), std::abs(hi), 1e-12})) return 0.5 * (lo + hi);
  }
  throw ConvergenceError("min_eig_probe: bisection did not converge", lo, hi);
}

}  // namespace detail

// Smallest eigenvalue of the symmetric banded matrix: exact dense solve
// when dim <= 2000, shift bisection beyond that.
inline double min_eig_probe(const BlockBandedMatrix& m, int max_iter = 200) {
  if (m.dim() <= 2000) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.dense(), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  }
  return detail::min_eig_bisect(m, max_iter);
}

// Symmetric PSD square root of a dense matrix via eigendecomposition.
// Slightly negative eigenvalues from roundoff are clipped to zero.
inline Eigen::MatrixXd sym_sqrt_dense(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw DimensionError("sym_sqrt_dense: matrix must be square");
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw ValidationError("sym_sqrt_dense: input is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) throw Error("sym_sqrt_dense: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double floor = -1e-10 * std::max(1.0, ev.size() ? std::abs(ev.maxCoeff()) : 1.0);
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < floor)
      throw ValidationError("sym_sqrt_dense: matrix has eigenvalue " + std::to_string(ev(i)) +
                            " below the PSD tolerance");
    ev(i) = std::sqrt(std::max(0.0, ev(i)));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace pfgls
