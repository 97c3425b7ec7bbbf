#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "oracle_helpers.hpp"
#include "pfgls/panel.hpp"

using namespace pfgls;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const std::string path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream out(path);
  out << content;
  return path;
}

ColumnMap basic_cols() {
  ColumnMap c;
  c.unit = "state";
  c.time = "year";
  c.y = "y";
  c.x = {"x"};
  return c;
}

}  // namespace

TEST_CASE("ingest: minimal balanced 2x2 panel") {
  const std::string path = write_temp("pfgls_min.csv",
                                      "state,year,y,x\n"
                                      "A,1,1.0,0.5\n"
                                      "A,2,2.0,1.5\n"
                                      "B,1,3.0,2.5\n"
                                      "B,2,4.0,3.5\n");
  IngestResult r = ingest_long_csv(path, basic_cols());
  REQUIRE(r.data.n_units == 2);
  REQUIRE(r.data.n_periods == 2);
  REQUIRE(r.data.n_regressors == 1);
  REQUIRE(r.data.unit_labels == std::vector<std::string>{"A", "B"});
  REQUIRE(r.data.y(1, 1) == 4.0);
  REQUIRE(r.data.x[0](0, 1) == 1.5);
  REQUIRE_FALSE(r.unit_weights.has_value());
  std::filesystem::remove(path);
}

TEST_CASE("ingest: missing cell reports the unbalanced pair") {
  const std::string path = write_temp("pfgls_unbal.csv",
                                      "state,year,y,x\n"
                                      "A,1,1.0,0.5\n"
                                      "A,2,2.0,1.5\n"
                                      "B,1,3.0,2.5\n");
  try {
    ingest_long_csv(path, basic_cols());
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("unbalanced") != std::string::npos);
    REQUIRE(msg.find("(B, 2)") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("ingest: non-numeric cell names its line") {
  const std::string path = write_temp("pfgls_badnum.csv",
                                      "state,year,y,x\n"
                                      "A,1,1.0,0.5\n"
                                      "A,2,abc,1.5\n"
                                      "B,1,3.0,2.5\n"
                                      "B,2,4.0,3.5\n");
  try {
    ingest_long_csv(path, basic_cols());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    REQUIRE(e.line() == 3);
    REQUIRE(std::string(e.what()).find("abc") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("ingest: duplicates, bad columns, and non-finite values rejected") {
  const std::string dup = write_temp("pfgls_dup.csv",
                                     "state,year,y,x\n"
                                     "A,1,1.0,0.5\nA,1,1.1,0.6\nA,2,2.0,1.5\n"
                                     "B,1,3.0,2.5\nB,2,4.0,3.5\n");
  REQUIRE_THROWS_AS(ingest_long_csv(dup, basic_cols()), ValidationError);
  std::filesystem::remove(dup);

  const std::string nan_file = write_temp("pfgls_nan.csv",
                                          "state,year,y,x\n"
                                          "A,1,nan,0.5\nA,2,2.0,1.5\n"
                                          "B,1,3.0,2.5\nB,2,4.0,3.5\n");
  REQUIRE_THROWS_AS(ingest_long_csv(nan_file, basic_cols()), ParseError);
  std::filesystem::remove(nan_file);

  const std::string ok = write_temp("pfgls_cols.csv", "state,year,y,x\nA,1,1,1\n");
  ColumnMap wrong = basic_cols();
  wrong.y = "response";
  REQUIRE_THROWS_AS(ingest_long_csv(ok, wrong), ParseError);
  std::filesystem::remove(ok);

  REQUIRE_THROWS_AS(ingest_long_csv("/nonexistent/file.csv", basic_cols()), ParseError);
}

TEST_CASE("ingest: delimiter auto-detection among comma, tab, semicolon") {
  for (const char* delim : {";", "\t"}) {
    std::string body = "state|year|y|x\nA|1|1.0|0.5\nA|2|2.0|1.5\nB|1|3.0|2.5\nB|2|4.0|3.5\n";
    for (auto& ch : body)
      if (ch == '|') ch = delim[0];
    const std::string path = write_temp("pfgls_delim.csv", body);
    IngestResult r = ingest_long_csv(path, basic_cols());
    REQUIRE(r.data.n_units == 2);
    REQUIRE(r.data.y(0, 0) == 1.0);
    std::filesystem::remove(path);
  }
}

TEST_CASE("ingest: all-numeric time labels keep temporal order") {
  std::string body = "state,year,y,x\n";
  for (const char* u : {"a", "b"})
    for (const char* t : {"9", "10", "2"})
      body += std::string(u) + "," + t + ",1.0,1.0\n";
  const std::string path = write_temp("pfgls_numlab.csv", body);
  IngestResult r = ingest_long_csv(path, basic_cols());
  REQUIRE(r.data.time_labels == std::vector<std::string>{"2", "9", "10"});
  std::filesystem::remove(path);
}

TEST_CASE("ingest: per-unit weights extracted and checked for constancy") {
  const std::string good = write_temp("pfgls_w.csv",
                                      "state,year,y,x,pop\n"
                                      "A,1,1.0,0.5,4\nA,2,2.0,1.5,4\n"
                                      "B,1,3.0,2.5,9\nB,2,4.0,3.5,9\n");
  ColumnMap cols = basic_cols();
  cols.weights = "pop";
  IngestResult r = ingest_long_csv(good, cols);
  REQUIRE(r.unit_weights.has_value());
  REQUIRE((*r.unit_weights)(0) == 4.0);
  REQUIRE((*r.unit_weights)(1) == 9.0);
  std::filesystem::remove(good);

  const std::string bad = write_temp("pfgls_wbad.csv",
                                     "state,year,y,x,pop\n"
                                     "A,1,1.0,0.5,4\nA,2,2.0,1.5,5\n"
                                     "B,1,3.0,2.5,9\nB,2,4.0,3.5,9\n");
  REQUIRE_THROWS_AS(ingest_long_csv(bad, cols), ValidationError);
  std::filesystem::remove(bad);
}

namespace {

PanelData synthetic_panel(int n, int t, std::uint64_t seed) {
  auto g = oracle::rng(seed);
  PanelData p;
  p.n_units = n;
  p.n_periods = t;
  p.n_regressors = 1;
  p.y = oracle::random_matrix(n, t, g);
  p.x = {oracle::random_matrix(n, t, g)};
  for (int i = 0; i < n; ++i) p.unit_labels.push_back("u" + std::to_string(i));
  for (int s = 0; s < t; ++s) p.time_labels.push_back(std::to_string(s + 1));
  return p;
}

}  // namespace

TEST_CASE("build_stacked: identity transform stacks time-major and round-trips") {
  PanelData p = synthetic_panel(3, 4, 61);
  StackedModel m = build_stacked(p, DesignSpec{});
  REQUIRE(m.transform_log.empty());
  for (int t = 0; t < 4; ++t)
    for (int i = 0; i < 3; ++i) {
      REQUIRE(m.y(t * 3 + i) == p.y(i, t));
      REQUIRE(m.x(t * 3 + i, 0) == p.x[0](i, t));
    }
  REQUIRE((unstack(m.y, 3, 4) - p.y).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("build_stacked: two-way within annihilates additive effects") {
  PanelData p = synthetic_panel(5, 7, 67);
  auto g = oracle::rng(71);
  Eigen::VectorXd a = oracle::random_matrix(5, 1, g);
  Eigen::VectorXd b = oracle::random_matrix(7, 1, g);
  for (int i = 0; i < 5; ++i)
    for (int t = 0; t < 7; ++t) p.y(i, t) = a(i) + b(t);

  DesignSpec spec;
  spec.unit_fe = spec.time_fe = true;
  StackedModel m = build_stacked(p, spec);
  REQUIRE(m.y.cwiseAbs().maxCoeff() <= 1e-10);
  REQUIRE(m.transform_log.size() == 1);

  // Demeaned columns have zero unit and time means.
  Eigen::MatrixXd xo = unstack(m.x.col(0), 5, 7);
  REQUIRE(xo.rowwise().mean().cwiseAbs().maxCoeff() <= 1e-10);
  REQUIRE(xo.colwise().mean().cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("build_stacked: per-unit detrending annihilates linear trends") {
  PanelData p = synthetic_panel(3, 6, 73);
  for (int i = 0; i < 3; ++i)
    for (int t = 0; t < 6; ++t) p.y(i, t) = 3.0 * (t + 1);
  DesignSpec spec;
  spec.unit_trend = true;
  StackedModel m = build_stacked(p, spec);
  REQUIRE(m.y.cwiseAbs().maxCoeff() <= 1e-10);

  PanelData tiny = synthetic_panel(3, 2, 79);
  REQUIRE_THROWS_AS(build_stacked(tiny, spec), ValidationError);
}

TEST_CASE("build_stacked: weights scale by sqrt and precede demeaning") {
  PanelData p = synthetic_panel(4, 5, 83);
  DesignSpec spec;
  Eigen::VectorXd w(4);
  w << 1, 4, 9, 16;
  spec.weights = w;
  StackedModel m = build_stacked(p, spec);
  for (int i = 0; i < 4; ++i)
    REQUIRE(m.y(i) == Catch::Approx(std::sqrt(w(i)) * p.y(i, 0)).margin(1e-14));

  // A pure unit effect survives weighting as a unit constant, so the
  // within transform still removes it entirely.
  for (int i = 0; i < 4; ++i)
    for (int t = 0; t < 5; ++t) p.y(i, t) = static_cast<double>(i + 1);
  spec.unit_fe = true;
  StackedModel m2 = build_stacked(p, spec);
  REQUIRE(m2.y.cwiseAbs().maxCoeff() <= 1e-12);
  REQUIRE(m2.transform_log.size() == 2);
  REQUIRE(m2.transform_log[0].find("weights") != std::string::npos);

  Eigen::VectorXd bad = w;
  bad(2) = 0.0;
  spec.weights = bad;
  REQUIRE_THROWS_AS(build_stacked(p, spec), ValidationError);
}

TEST_CASE("build_stacked: within transform is idempotent to 1e-12") {
  PanelData p = synthetic_panel(4, 6, 89);
  DesignSpec spec;
  spec.unit_fe = spec.time_fe = true;
  StackedModel once = build_stacked(p, spec);

  PanelData again = p;
  again.y = unstack(once.y, 4, 6);
  again.x[0] = unstack(once.x.col(0), 4, 6);
  StackedModel twice = build_stacked(again, spec);
  REQUIRE((twice.y - once.y).cwiseAbs().maxCoeff() <= 1e-12);
  REQUIRE((twice.x - once.x).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("PanelData validation enforces shape and finiteness") {
  PanelData p = synthetic_panel(2, 2, 97);
  REQUIRE_NOTHROW(p.validate());
  p.y(0, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(p.validate(), ValidationError);

  PanelData small = synthetic_panel(2, 2, 97);
  small.n_units = 1;
  REQUIRE_THROWS_AS(small.validate(), ValidationError);
}
