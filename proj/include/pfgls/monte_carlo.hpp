// Monte Carlo engine: the clustered heteroskedastic DGP with
// unit-specific serial correlation, panel generation through the
// covariance square roots, and the replication harness producing
// mean/std/RMSE-ratio/SE/rejection summaries per estimator.
#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pfgls/block_matrix.hpp"
#include "pfgls/errors.hpp"
#include "pfgls/estimators.hpp"
#include "pfgls/panel.hpp"

namespace pfgls {

struct DgpConfig {
  int n_units = 50;    // N
  int n_periods = 50;  // T
  int n_clusters = 25; // G; cluster blocks have size N/G
  double gamma = 0.3;           // within-cluster correlation ~ U(0, gamma)
  double hetero_scale_max = std::sqrt(5.0);  // d_i ~ U(1, m)
  double rho_max = 0.6;         // serial correlation rho_i ~ U(0, rho_max)
  double beta0 = 1.0;
  double fe_var = 0.5;          // alpha_i, mu_t ~ N(0, fe_var)
  double error_noise_var = 5.0; // zeta ~ N(0, error_noise_var)
  double x_noise_var = 1.0;     // xi ~ N(0, x_noise_var)
  std::uint64_t seed = 1;
  bool fixed_structure = false; // draw (R_eta, D, rho) once, not per rep

  void validate() const {
    if (n_units < 2 || n_periods < 2) throw ConfigError("DgpConfig: need N >= 2 and T >= 2");
    if (n_clusters < 1 || n_units % n_clusters != 0)
      throw ConfigError("DgpConfig: N must be divisible by G (got N=" + std::to_string(n_units) +
                        ", G=" + std::to_string(n_clusters) + ")");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("DgpConfig: gamma must lie in [0, 1)");
    if (!(rho_max >= 0.0 && rho_max < 1.0))
      throw ConfigError("DgpConfig: rho_max must lie in [0, 1)");
    if (!(hetero_scale_max >= 1.0)) throw ConfigError("DgpConfig: m must be >= 1");
    if (!(fe_var >= 0.0) || !(error_noise_var > 0.0) || !(x_noise_var > 0.0))
      throw ConfigError("DgpConfig: variances must be positive");
  }
};

struct DgpCovariances {
  Eigen::MatrixXd omega_u;  // NT x NT
  Eigen::MatrixXd omega_x;  // NT x NT
  Eigen::MatrixXd sigma_u;  // N x N, D R_eta D
  Eigen::VectorXd rho_u;    // length N
  Eigen::VectorXd rho_x;
  int cluster_size = 0;
  // Symmetric square roots of the per-cluster diagonal blocks (both
  // covariances are exactly block diagonal across clusters), stored in
  // cluster-local time-major order. Used by simulate_panel.
  std::vector<Eigen::MatrixXd> sqrt_u_blocks;
  std::vector<Eigen::MatrixXd> sqrt_x_blocks;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Independent, reproducible stream per replication: serial and parallel
// runs draw identical numbers for a given (seed, index).
inline std::mt19937_64 rep_stream(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t s = seed ^ (0x9E3779B97F4A7C15ull * (index + 1));
  const std::uint64_t a = splitmix64(s);
  const std::uint64_t b = splitmix64(s);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

// Fills the full matrix from sigma and rho: entry ((i,t),(j,s)) =
// sigma(i,j) * serial(i,j)^|t-s| with serial(i,i) = rho_i and
// serial(i,j) = rho_i rho_j. Only within-cluster pairs are nonzero.
inline Eigen::MatrixXd dgp_covariance_matrix(const Eigen::MatrixXd& sigma,
                                             const Eigen::VectorXd& rho, int n_periods,
                                             int cluster_size) {
  const int n = static_cast<int>(sigma.rows());
  const Eigen::Index nt = static_cast<Eigen::Index>(n) * n_periods;
  Eigen::MatrixXd full = Eigen::MatrixXd::Zero(nt, nt);
  std::vector<double> powers(n_periods);
  for (int i = 0; i < n; ++i) {
    const int cluster = i / cluster_size;
    for (int j = cluster * cluster_size; j < (cluster + 1) * cluster_size; ++j) {
      const double base = sigma(i, j);
      if (base == 0.0) continue;
      const double serial = (i == j) ? rho(i) : rho(i) * rho(j);
      powers[0] = 1.0;
      for (int h = 1; h < n_periods; ++h) powers[h] = powers[h - 1] * serial;
      for (int t = 0; t < n_periods; ++t)
        for (int s = 0; s < n_periods; ++s)
          full(static_cast<Eigen::Index>(t) * n + i, static_cast<Eigen::Index>(s) * n + j) =
              base * powers[std::abs(t - s)];
    }
  }
  return full;
}

// Gathers the (cluster-local time-major) diagonal block of a full
// matrix for one cluster.
inline Eigen::MatrixXd gather_cluster_block(const Eigen::MatrixXd& full, int n, int n_periods,
                                            int cluster, int cluster_size) {
  const int dim = cluster_size * n_periods;
  Eigen::MatrixXd block(dim, dim);
  for (int t = 0; t < n_periods; ++t)
    for (int a = 0; a < cluster_size; ++a)
      for (int s = 0; s < n_periods; ++s)
        for (int b = 0; b < cluster_size; ++b)
          block(t * cluster_size + a, s * cluster_size + b) =
              full(static_cast<Eigen::Index>(t) * n + cluster * cluster_size + a,
                   static_cast<Eigen::Index>(s) * n + cluster * cluster_size + b);
  return block;
}

}  // namespace detail

// Draws the correlation/heteroskedasticity structure and materializes
// Omega_U and Omega_X. A draw whose covariance is not positive definite
// is redrawn once, then reported as an error.
inline DgpCovariances build_dgp_covariances(const DgpConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int n = cfg.n_units, t_len = cfg.n_periods, g_count = cfg.n_clusters;
  const int csize = n / g_count;

  for (int attempt = 0; attempt < 2; ++attempt) {
    std::uniform_real_distribution<double> u_gamma(0.0, cfg.gamma);
    std::uniform_real_distribution<double> u_scale(1.0, cfg.hetero_scale_max);
    std::uniform_real_distribution<double> u_rho(0.0, cfg.rho_max);

    Eigen::MatrixXd r_eta = Eigen::MatrixXd::Identity(n, n);
    for (int g = 0; g < g_count; ++g)
      for (int i = g * csize; i < (g + 1) * csize; ++i)
        for (int j = i + 1; j < (g + 1) * csize; ++j) r_eta(i, j) = r_eta(j, i) = u_gamma(rng);

    Eigen::VectorXd d(n);
    for (int i = 0; i < n; ++i) d(i) = u_scale(rng);

    DgpCovariances covs;
    covs.cluster_size = csize;
    covs.sigma_u = d.asDiagonal() * r_eta * d.asDiagonal();
    covs.rho_u.resize(n);
    for (int i = 0; i < n; ++i) covs.rho_u(i) = u_rho(rng);
    covs.rho_x.resize(n);
    for (int i = 0; i < n; ++i) covs.rho_x(i) = u_rho(rng);

    covs.omega_u = detail::dgp_covariance_matrix(covs.sigma_u, covs.rho_u, t_len, csize);
    covs.omega_x = detail::dgp_covariance_matrix(r_eta, covs.rho_x, t_len, csize);

    try {
      covs.sqrt_u_blocks.reserve(g_count);
      covs.sqrt_x_blocks.reserve(g_count);
      for (int g = 0; g < g_count; ++g) {
        covs.sqrt_u_blocks.push_back(
            sym_sqrt_dense(detail::gather_cluster_block(covs.omega_u, n, t_len, g, csize)));
        covs.sqrt_x_blocks.push_back(
            sym_sqrt_dense(detail::gather_cluster_block(covs.omega_x, n, t_len, g, csize)));
      }
    } catch (const ValidationError&) {
      continue;  // indefinite draw: redraw once
    }
    return covs;
  }
  throw NotPositiveDefiniteError(
      "build_dgp_covariances: covariance draw not positive definite after one redraw", -1);
}

// Generates one balanced panel: U = Omega_U^{1/2} zeta, X = Omega_X^{1/2} xi,
// y_it = alpha_i + mu_t + beta0 x_it + u_it.
inline PanelData simulate_panel(const DgpConfig& cfg, const DgpCovariances& covs,
                                std::mt19937_64& rng) {
  const int n = cfg.n_units, t_len = cfg.n_periods;
  const Eigen::Index nt = static_cast<Eigen::Index>(n) * t_len;
  const int csize = covs.cluster_size;
  const int g_count = n / csize;

  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::VectorXd zeta(nt), xi(nt);
  const double zeta_sd = std::sqrt(cfg.error_noise_var);
  const double xi_sd = std::sqrt(cfg.x_noise_var);
  for (Eigen::Index r = 0; r < nt; ++r) zeta(r) = zeta_sd * z(rng);
  for (Eigen::Index r = 0; r < nt; ++r) xi(r) = xi_sd * z(rng);
  Eigen::VectorXd alpha(n), mu(t_len);
  const double fe_sd = std::sqrt(cfg.fe_var);
  for (int i = 0; i < n; ++i) alpha(i) = fe_sd * z(rng);
  for (int t = 0; t < t_len; ++t) mu(t) = fe_sd * z(rng);

  // Both covariances are block diagonal across clusters, so the square
  // root acts cluster by cluster.
  auto apply_sqrt = [&](const std::vector<Eigen::MatrixXd>& blocks,
                        const Eigen::VectorXd& noise) {
    Eigen::VectorXd out(nt);
    Eigen::VectorXd local(static_cast<Eigen::Index>(csize) * t_len);
    for (int g = 0; g < g_count; ++g) {
      for (int t = 0; t < t_len; ++t)
        for (int a = 0; a < csize; ++a)
          local(t * csize + a) = noise(static_cast<Eigen::Index>(t) * n + g * csize + a);
      Eigen::VectorXd mixed = blocks[g] * local;
      for (int t = 0; t < t_len; ++t)
        for (int a = 0; a < csize; ++a)
          out(static_cast<Eigen::Index>(t) * n + g * csize + a) = mixed(t * csize + a);
    }
    return out;
  };
  const Eigen::VectorXd u = apply_sqrt(covs.sqrt_u_blocks, zeta);
  const Eigen::VectorXd x = apply_sqrt(covs.sqrt_x_blocks, xi);

  PanelData p;
  p.n_units = n;
  p.n_periods = t_len;
  p.n_regressors = 1;
  p.y.resize(n, t_len);
  p.x = {Eigen::MatrixXd(n, t_len)};
  for (int t = 0; t < t_len; ++t)
    for (int i = 0; i < n; ++i) {
      const Eigen::Index r = static_cast<Eigen::Index>(t) * n + i;
      p.x[0](i, t) = x(r);
      p.y(i, t) = alpha(i) + mu(t) + cfg.beta0 * x(r) + u(r);
    }
  p.unit_labels.reserve(n);
  for (int i = 0; i < n; ++i) p.unit_labels.push_back(std::to_string(i + 1));
  p.time_labels.reserve(t_len);
  for (int t = 0; t < t_len; ++t) p.time_labels.push_back(std::to_string(t + 1));
  return p;
}

enum McEstimator : unsigned {
  kOls = 1u,
  kFglsDiag = 2u,
  kFgls = 4u,
  kGlsOracle = 8u,
};

struct McTuning {
  std::optional<int> L;      // default: plug-in rule
  std::optional<double> M;   // default: cross-validated per replication
  Kernel kernel = Kernel::bartlett;
  ThresholdMode threshold_mode = ThresholdMode::lag_wise;
  CvOptions cv;
};

struct EstimatorStats {
  std::string name;
  double mean_beta = 0.0;
  double std_beta = 0.0;
  double rmse_ratio = 1.0;  // MSE relative to OLS
  double mean_se = 0.0;
  double std_se = 0.0;
  double rejection_rate = 0.0;
};

struct McExperimentReport {
  DgpConfig config;
  McTuning tuning;
  int requested_reps = 0;
  int completed_reps = 0;
  int skipped = 0;
  unsigned estimator_mask = 0;
  std::vector<EstimatorStats> rows;
  std::vector<std::string> skip_log;
  double elapsed_seconds = 0.0;
};

namespace detail {

struct RepOutcome {
  bool ok = false;
  std::string fail_reason;
  // slot per estimator: [ols, fgls_diag, fgls, oracle]
  double beta[4] = {0, 0, 0, 0};
  double se[4] = {0, 0, 0, 0};
  bool reject[4] = {false, false, false, false};
};

inline RepOutcome run_one_rep(const DgpConfig& cfg, unsigned mask, const McTuning& tuning,
                              const DgpCovariances* shared_covs, std::uint64_t rep_index) {
  RepOutcome out;
  try {
    std::mt19937_64 rng = rep_stream(cfg.seed, rep_index);
    DgpCovariances local;
    const DgpCovariances* covs = shared_covs;
    if (!covs) {
      local = build_dgp_covariances(cfg, rng);
      covs = &local;
    }
    const PanelData panel = simulate_panel(cfg, *covs, rng);

    DesignSpec spec;
    spec.unit_fe = true;
    spec.time_fe = true;
    const StackedModel model = build_stacked(panel, spec);
    const double crit = normal_quantile(0.975);

    auto record = [&](int slot, double beta, double se) {
      out.beta[slot] = beta;
      out.se[slot] = se;
      out.reject[slot] = se > 0.0 && std::abs((beta - cfg.beta0) / se) > crit;
    };

    if (mask & (kOls | kFglsDiag | kFgls)) {
      const EstimationResult o = ols(model);
      if (mask & kOls) {
        const double se = ols_standard_errors(model, o.residuals, SeKind::cluster_by_unit)(0);
        record(0, o.beta(0), se);
      }
    }
    if (mask & kFglsDiag) {
      PipelineOptions opt;
      opt.diag_only = true;
      const EstimationResult r = fgls_pipeline(model, opt);
      record(1, r.beta(0), r.se(0));
    }
    if (mask & kFgls) {
      PipelineOptions opt;
      opt.L = tuning.L;
      opt.M = tuning.M;
      opt.kernel = tuning.kernel;
      opt.threshold_mode = tuning.threshold_mode;
      opt.cv = tuning.cv;
      const EstimationResult r = fgls_pipeline(model, opt);
      record(2, r.beta(0), r.se(0));
    }
    if (mask & kGlsOracle) {
      const EstimationResult r = gls_oracle(model, (cfg.error_noise_var * covs->omega_u).eval());
      record(3, r.beta(0), r.se(0));
    }
    out.ok = true;
  } catch (const Error& e) {
    out.fail_reason = e.what();
  }
  return out;
}

}  // namespace detail

// Runs `reps` independent replications (parallel over a deterministic
// per-rep RNG stream) and aggregates in replication order, so reports
// are bitwise identical for any thread count.
inline McExperimentReport run_experiment(const DgpConfig& cfg, int reps, unsigned estimator_mask,
                                         const McTuning& tuning = McTuning{}, int threads = 1) {
  cfg.validate();
  if (reps < 1) throw ConfigError("run_experiment: reps must be >= 1");
  if (estimator_mask == 0) throw ConfigError("run_experiment: no estimators requested");
  const auto t0 = std::chrono::steady_clock::now();

  std::optional<DgpCovariances> shared;
  if (cfg.fixed_structure) {
    std::mt19937_64 rng = detail::rep_stream(cfg.seed ^ 0xA5A5A5A5A5A5A5A5ull, 0);
    shared = build_dgp_covariances(cfg, rng);
  }

  std::vector<detail::RepOutcome> outcomes(reps);
  threads = std::max(1, std::min(threads, reps));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int rep = next.fetch_add(1);
      if (rep >= reps) return;
      outcomes[rep] = detail::run_one_rep(cfg, estimator_mask, tuning,
                                          shared ? &*shared : nullptr,
                                          static_cast<std::uint64_t>(rep));
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int w = 0; w < threads; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  McExperimentReport report;
  report.config = cfg;
  report.tuning = tuning;
  report.requested_reps = reps;
  report.estimator_mask = estimator_mask;

  std::vector<int> kept;
  for (int rep = 0; rep < reps; ++rep) {
    if (outcomes[rep].ok) {
      kept.push_back(rep);
    } else {
      ++report.skipped;
      report.skip_log.push_back("rep " + std::to_string(rep) + ": " + outcomes[rep].fail_reason);
    }
  }
  report.completed_reps = static_cast<int>(kept.size());
  if (report.skipped > 0.02 * reps) {
    std::ostringstream msg;
    msg << "run_experiment: " << report.skipped << "/" << reps
        << " replications failed (limit 2%):";
    for (size_t k = 0; k < report.skip_log.size() && k < 5; ++k) msg << "\n  " << report.skip_log[k];
    throw Error(msg.str());
  }
  if (kept.empty()) throw Error("run_experiment: no replication succeeded");

  const char* names[4] = {"OLS", "FGLS(Diag)", "FGLS", "GLS(oracle)"};
  const unsigned bits[4] = {kOls, kFglsDiag, kFgls, kGlsOracle};
  double mse[4] = {0, 0, 0, 0};
  const double n_ok = static_cast<double>(kept.size());

  for (int slot = 0; slot < 4; ++slot) {
    if (!(estimator_mask & bits[slot])) continue;
    EstimatorStats s;
    s.name = names[slot];
    double sum_b = 0, sum_se = 0, sum_rej = 0;
    for (int rep : kept) {
      sum_b += outcomes[rep].beta[slot];
      sum_se += outcomes[rep].se[slot];
      sum_rej += outcomes[rep].reject[slot] ? 1.0 : 0.0;
      const double err = outcomes[rep].beta[slot] - cfg.beta0;
      mse[slot] += err * err;
    }
    mse[slot] /= n_ok;
    s.mean_beta = sum_b / n_ok;
    s.mean_se = sum_se / n_ok;
    s.rejection_rate = sum_rej / n_ok;
    if (kept.size() > 1) {
      double ssb = 0, sss = 0;
      for (int rep : kept) {
        ssb += (outcomes[rep].beta[slot] - s.mean_beta) * (outcomes[rep].beta[slot] - s.mean_beta);
        sss += (outcomes[rep].se[slot] - s.mean_se) * (outcomes[rep].se[slot] - s.mean_se);
      }
      s.std_beta = std::sqrt(ssb / (n_ok - 1.0));
      s.std_se = std::sqrt(sss / (n_ok - 1.0));
    }
    report.rows.push_back(std::move(s));
  }
  // MSE ratios relative to OLS (1.000 for OLS itself by construction).
  for (auto& row : report.rows) {
    int slot = 0;
    for (int k = 0; k < 4; ++k)
      if (row.name == names[k]) slot = k;
    if (estimator_mask & kOls)
      row.rmse_ratio = (slot == 0) ? 1.0 : mse[slot] / mse[0];
    else
      row.rmse_ratio = std::numeric_limits<double>::quiet_NaN();
  }

  report.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

namespace detail {

inline std::string format_double(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

}  // namespace detail

// Fixed-width summary table. Timing and thread counts are deliberately
// excluded so identical seeds render identical bytes.
inline std::string render_report_text(const McExperimentReport& r) {
  std::ostringstream out;
  const DgpConfig& c = r.config;
  out << "panel FGLS Monte Carlo\n";
  out << "N=" << c.n_units << " T=" << c.n_periods << " G=" << c.n_clusters
      << " gamma=" << detail::format_double("%.3g", c.gamma) << " m="
      << detail::format_double("%.6g", c.hetero_scale_max)
      << " rho_max=" << detail::format_double("%.3g", c.rho_max)
      << " beta0=" << detail::format_double("%.6g", c.beta0) << " seed=" << c.seed
      << (c.fixed_structure ? " structure=fixed" : " structure=per-rep") << "\n";
  out << "reps=" << r.requested_reps << " completed=" << r.completed_reps
      << " skipped=" << r.skipped;
  out << " L=" << (r.tuning.L ? std::to_string(*r.tuning.L) : std::string("auto"));
  out << " M=" << (r.tuning.M ? detail::format_double("%.6g", *r.tuning.M) : std::string("auto"));
  out << " kernel=" << to_string(r.tuning.kernel) << "\n\n";

  char line[160];
  std::snprintf(line, sizeof(line), "%-12s %9s %9s %8s %10s %9s %11s\n", "estimator", "mean(b)",
                "std(b)", "RMSE", "mean(se)", "std(se)", "reject@5%");
  out << line;
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof(line), "%-12s %9.4f %9.4f %8.3f %10.4f %9.4f %11.3f\n",
                  row.name.c_str(), row.mean_beta, row.std_beta, row.rmse_ratio, row.mean_se,
                  row.std_se, row.rejection_rate);
    out << line;
  }
  if (!r.skip_log.empty()) {
    out << "\nskipped replications:\n";
    for (const auto& s : r.skip_log) out << "  " << s << "\n";
  }
  return out.str();
}

// Full-precision CSV (one row per estimator); used for the determinism
// checks and machine consumption.
inline std::string render_report_csv(const McExperimentReport& r) {
  std::ostringstream out;
  out << "estimator,mean_beta,std_beta,rmse_ratio,mean_se,std_se,rejection_rate\n";
  for (const auto& row : r.rows) {
    out << row.name;
    for (double v : {row.mean_beta, row.std_beta, row.rmse_ratio, row.mean_se, row.std_se,
                     row.rejection_rate})
      out << "," << detail::format_double("%.17g", v);
    out << "\n";
  }
  return out.str();
}

}  // namespace pfgls
