#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <cmath>

#include "pfgls/monte_carlo.hpp"

using namespace pfgls;

namespace {

DgpConfig small_cfg() {
  DgpConfig cfg;
  cfg.n_units = 4;
  cfg.n_periods = 6;
  cfg.n_clusters = 2;
  cfg.seed = 42;
  return cfg;
}

}  // namespace

TEST_CASE("rep_stream: reproducible per index, distinct across indices") {
  auto a = detail::rep_stream(7, 3);
  auto b = detail::rep_stream(7, 3);
  auto c = detail::rep_stream(7, 4);
  REQUIRE(a() == b());
  REQUIRE(a() == b());
  bool differs = false;
  for (int k = 0; k < 4; ++k) differs |= (a() != c());
  REQUIRE(differs);
}

TEST_CASE("build_dgp_covariances: gamma = 0 gives cross-sectional independence") {
  DgpConfig cfg = small_cfg();
  cfg.gamma = 0.0;
  auto rng = detail::rep_stream(cfg.seed, 0);
  DgpCovariances covs = build_dgp_covariances(cfg, rng);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (i != j) REQUIRE(covs.sigma_u(i, j) == 0.0);
  // Every cross-unit entry of Omega_U vanishes as well.
  for (int r = 0; r < covs.omega_u.rows(); ++r)
    for (int c = 0; c < covs.omega_u.cols(); ++c)
      if (r % 4 != c % 4) REQUIRE(covs.omega_u(r, c) == 0.0);
}

TEST_CASE("build_dgp_covariances: rho_max = 0 kills every off-diagonal time block") {
  DgpConfig cfg = small_cfg();
  cfg.rho_max = 0.0;
  auto rng = detail::rep_stream(cfg.seed, 1);
  DgpCovariances covs = build_dgp_covariances(cfg, rng);
  const int n = cfg.n_units;
  for (int t = 0; t < cfg.n_periods; ++t)
    for (int s = 0; s < cfg.n_periods; ++s) {
      if (t == s) continue;
      REQUIRE(covs.omega_u.block(t * n, s * n, n, n).cwiseAbs().maxCoeff() == 0.0);
    }
  // Diagonal time blocks are exactly Sigma_u.
  REQUIRE((covs.omega_u.block(0, 0, n, n) - covs.sigma_u).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("build_dgp_covariances: matches a direct evaluation of the formula, N=4 G=2") {
  DgpConfig cfg = small_cfg();
  auto rng = detail::rep_stream(cfg.seed, 2);
  DgpCovariances covs = build_dgp_covariances(cfg, rng);
  const int n = cfg.n_units, t_len = cfg.n_periods;

  REQUIRE((covs.omega_u - covs.omega_u.transpose()).cwiseAbs().maxCoeff() == 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(covs.omega_u, Eigen::EigenvaluesOnly);
  REQUIRE(es.eigenvalues().minCoeff() > 0.0);

  for (int t = 0; t < t_len; ++t)
    for (int s = 0; s < t_len; ++s)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double serial = (i == j) ? covs.rho_u(i) : covs.rho_u(i) * covs.rho_u(j);
          const double want = covs.sigma_u(i, j) * std::pow(serial, std::abs(t - s));
          REQUIRE(covs.omega_u(t * n + i, s * n + j) == Catch::Approx(want).margin(1e-12));
        }

  DgpConfig bad = cfg;
  bad.n_clusters = 3;  // 4 % 3 != 0
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("simulate_panel: error variance matches error_noise_var * Sigma_u diagonal") {
  DgpConfig cfg;
  cfg.n_units = 6;
  cfg.n_periods = 8;
  cfg.n_clusters = 3;
  cfg.beta0 = 0.0;  // y_it reduces to u_it
  cfg.fe_var = 0.0;
  cfg.seed = 11;
  auto rng = detail::rep_stream(cfg.seed, 0);
  DgpCovariances covs = build_dgp_covariances(cfg, rng);

  const int draws = 2000;
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(cfg.n_units, cfg.n_periods);
  Eigen::MatrixXd acc2 = Eigen::MatrixXd::Zero(cfg.n_units, cfg.n_periods);
  for (int d = 0; d < draws; ++d) {
    PanelData p = simulate_panel(cfg, covs, rng);
    acc += p.y;
    acc2 += p.y.cwiseProduct(p.y);
  }
  for (int i = 0; i < cfg.n_units; ++i) {
    const double want = cfg.error_noise_var * covs.sigma_u(i, i);
    for (int t = 0; t < cfg.n_periods; ++t) {
      const double mean = acc(i, t) / draws;
      const double var = acc2(i, t) / draws - mean * mean;
      REQUIRE(std::abs(var - want) < 0.10 * want);
    }
  }
}

TEST_CASE("simulate_panel: regressor and error are uncorrelated in the pooled sample") {
  DgpConfig cfg;
  cfg.n_units = 4;
  cfg.n_periods = 300;
  cfg.n_clusters = 2;
  cfg.beta0 = 0.0;
  cfg.fe_var = 0.0;
  cfg.seed = 13;
  auto rng = detail::rep_stream(cfg.seed, 0);
  DgpCovariances covs = build_dgp_covariances(cfg, rng);

  double sxy = 0, sx = 0, sy = 0, sxx = 0, syy = 0;
  long count = 0;
  for (int d = 0; d < 5; ++d) {
    PanelData p = simulate_panel(cfg, covs, rng);
    for (int i = 0; i < cfg.n_units; ++i)
      for (int t = 0; t < cfg.n_periods; ++t) {
        const double xv = p.x[0](i, t), uv = p.y(i, t);
        sxy += xv * uv;
        sx += xv;
        sy += uv;
        sxx += xv * xv;
        syy += uv * uv;
        ++count;
      }
  }
  const double n = static_cast<double>(count);
  const double corr = (sxy / n - sx / n * sy / n) /
                      std::sqrt((sxx / n - sx / n * sx / n) * (syy / n - sy / n * sy / n));
  REQUIRE(std::abs(corr) < 0.05);
}

TEST_CASE("simulate_panel: lag-1 autocorrelation of u tracks rho_i") {
  DgpConfig cfg;
  cfg.n_units = 2;
  cfg.n_periods = 500;
  cfg.n_clusters = 2;
  cfg.beta0 = 0.0;
  cfg.fe_var = 0.0;
  cfg.seed = 17;
  auto rng = detail::rep_stream(cfg.seed, 0);
  DgpCovariances covs = build_dgp_covariances(cfg, rng);
  PanelData p = simulate_panel(cfg, covs, rng);

  for (int i = 0; i < cfg.n_units; ++i) {
    double c0 = 0, c1 = 0;
    const double mean = p.y.row(i).mean();
    for (int t = 0; t < cfg.n_periods; ++t) {
      c0 += (p.y(i, t) - mean) * (p.y(i, t) - mean);
      if (t > 0) c1 += (p.y(i, t) - mean) * (p.y(i, t - 1) - mean);
    }
    REQUIRE(std::abs(c1 / c0 - covs.rho_u(i)) < 0.1);
  }
}

TEST_CASE("run_experiment: single replication reports its own values with zero stds") {
  DgpConfig cfg;
  cfg.n_units = 10;
  cfg.n_periods = 30;
  cfg.n_clusters = 5;
  cfg.seed = 23;
  McTuning tuning;
  tuning.L = 2;
  McExperimentReport r = run_experiment(cfg, 1, kOls | kFgls, tuning);
  REQUIRE(r.completed_reps == 1);
  REQUIRE(r.skipped == 0);
  REQUIRE(r.rows.size() == 2);
  for (const auto& row : r.rows) {
    REQUIRE(row.std_beta == 0.0);
    REQUIRE(row.std_se == 0.0);
  }
  REQUIRE(r.rows[0].rmse_ratio == 1.0);
}

TEST_CASE("run_experiment: deterministic across runs and thread counts") {
  DgpConfig cfg;
  cfg.n_units = 6;
  cfg.n_periods = 20;
  cfg.n_clusters = 3;
  cfg.seed = 29;
  McTuning tuning;
  tuning.L = 1;
  McExperimentReport a = run_experiment(cfg, 12, kOls | kFglsDiag | kFgls, tuning, 1);
  McExperimentReport b = run_experiment(cfg, 12, kOls | kFglsDiag | kFgls, tuning, 4);
  REQUIRE(render_report_csv(a) == render_report_csv(b));
  REQUIRE(render_report_text(a) == render_report_text(b));

  McExperimentReport c = run_experiment(cfg, 12, kOls | kFglsDiag | kFgls, tuning, 3);
  REQUIRE(render_report_csv(a) == render_report_csv(c));
}

TEST_CASE("run_experiment: unbiasedness and sane aggregates on a small run") {
  DgpConfig cfg;
  cfg.n_units = 10;
  cfg.n_periods = 30;
  cfg.n_clusters = 5;
  cfg.seed = 31;
  McTuning tuning;
  McExperimentReport r = run_experiment(cfg, 40, kOls | kFglsDiag | kFgls | kGlsOracle, tuning);
  REQUIRE(r.completed_reps == 40);
  REQUIRE(r.rows.size() == 4);
  for (const auto& row : r.rows) {
    REQUIRE(std::abs(row.mean_beta - cfg.beta0) <= 3.0 * row.std_beta / std::sqrt(40.0));
    REQUIRE(row.rejection_rate >= 0.0);
    REQUIRE(row.rejection_rate <= 1.0);
    REQUIRE(row.mean_se > 0.0);
  }
  // Oracle GLS cannot be beaten by FGLS in sampling spread here.
  REQUIRE(r.rows[3].std_beta <= r.rows[2].std_beta * 1.05);
}

TEST_CASE("run_experiment: fixed-structure mode reuses one covariance draw") {
  DgpConfig cfg;
  cfg.n_units = 4;
  cfg.n_periods = 12;
  cfg.n_clusters = 2;
  cfg.seed = 37;
  cfg.fixed_structure = true;
  McTuning tuning;
  tuning.L = 1;
  tuning.M = 1.0;
  McExperimentReport a = run_experiment(cfg, 6, kOls | kFgls, tuning);
  McExperimentReport b = run_experiment(cfg, 6, kOls | kFgls, tuning, 2);
  REQUIRE(render_report_csv(a) == render_report_csv(b));
  REQUIRE(a.completed_reps == 6);
}

TEST_CASE("report rendering includes config echo and estimator rows") {
  DgpConfig cfg;
  cfg.n_units = 4;
  cfg.n_periods = 12;
  cfg.n_clusters = 2;
  cfg.seed = 41;
  McTuning tuning;
  tuning.L = 1;
  tuning.M = 1.2;
  McExperimentReport r = run_experiment(cfg, 3, kOls | kFgls, tuning);
  const std::string text = render_report_text(r);
  REQUIRE(text.find("N=4 T=12 G=2") != std::string::npos);
  REQUIRE(text.find("seed=41") != std::string::npos);
  REQUIRE(text.find("FGLS") != std::string::npos);
  REQUIRE(text.find("reject@5%") != std::string::npos);
  const std::string csv = render_report_csv(r);
  REQUIRE(csv.find("estimator,mean_beta") == 0);
}
