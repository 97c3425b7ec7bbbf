// Shared generators and independent dense oracles for the test suites.
// Everything here is deliberately written against plain dense algebra,
// not the banded code paths it is used to check.
#pragma once

#include <Eigen/Dense>

#include <random>
#include <vector>

namespace oracle {

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline Eigen::MatrixXd random_matrix(int r, int c, std::mt19937_64& g) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = u(g);
  return m;
}

inline Eigen::MatrixXd random_symmetric(int n, std::mt19937_64& g) {
  Eigen::MatrixXd m = random_matrix(n, n, g);
  return 0.5 * (m + m.transpose()).eval();
}

inline double op_norm(const Eigen::MatrixXd& m) {
  return m.jacobiSvd().singularValues()(0);
}

// Lag blocks whose banded assembly (with weights <= 1) is strictly SPD:
// the lag-0 block is made diagonally dominant over the off-lag mass.
inline std::vector<Eigen::MatrixXd> random_spd_lag_blocks(int n, int lags, std::mt19937_64& g) {
  std::vector<Eigen::MatrixXd> blocks(lags + 1);
  Eigen::MatrixXd a = random_matrix(n, n, g);
  blocks[0] = a * a.transpose();
  double off_mass = 0.0;
  for (int h = 1; h <= lags; ++h) {
    blocks[h] = random_matrix(n, n, g) * (0.5 / h);
    off_mass += 2.0 * op_norm(blocks[h]);
  }
  blocks[0] += (off_mass + 0.5) * Eigen::MatrixXd::Identity(n, n);
  return blocks;
}

// Random symmetric (not necessarily PD) lag blocks: lag 0 symmetric,
// higher lags unconstrained.
inline std::vector<Eigen::MatrixXd> random_symmetric_lag_blocks(int n, int lags,
                                                                std::mt19937_64& g) {
  std::vector<Eigen::MatrixXd> blocks(lags + 1);
  blocks[0] = random_symmetric(n, g);
  for (int h = 1; h <= lags; ++h) blocks[h] = random_matrix(n, n, g);
  return blocks;
}

// Independent dense assembly of the block-banded matrix from lag blocks
// and kernel weights: block(t,s) = w_h * B_h for h = t-s >= 0, transpose
// for h < 0, zero beyond the band.
inline Eigen::MatrixXd dense_from_lag_blocks(const std::vector<Eigen::MatrixXd>& blocks,
                                             int n_time, const std::vector<double>& weights) {
  const int n = static_cast<int>(blocks[0].rows());
  const int lags = static_cast<int>(blocks.size()) - 1;
  Eigen::MatrixXd full = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n) * n_time,
                                               static_cast<Eigen::Index>(n) * n_time);
  for (int t = 0; t < n_time; ++t) {
    for (int s = 0; s < n_time; ++s) {
      const int h = t - s;
      if (std::abs(h) > lags) continue;
      Eigen::MatrixXd b = weights[std::abs(h)] * blocks[std::abs(h)];
      if (h < 0) b = b.transpose().eval();
      full.block(static_cast<Eigen::Index>(t) * n, static_cast<Eigen::Index>(s) * n, n, n) = b;
    }
  }
  return full;
}

}  // namespace oracle
