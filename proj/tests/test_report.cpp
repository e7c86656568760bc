#include "doctest.h"

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "dira/errors.hpp"
#include "dira/report.hpp"
#include "dira/transfer.hpp"

using namespace dira;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double boost_p(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

report::LedgerRow row(const std::string& method, std::vector<double> runs, double fraction = 0.25) {
  report::LedgerRow r;
  r.task = "segmentation";
  r.method = method;
  r.checkpoint = "ck/" + method;
  r.metric = "dice";
  r.fraction = fraction;
  r.runs = std::move(runs);
  return r;
}

void write_ledger(const fs::path& path, const std::vector<report::LedgerRow>& rows) {
  fs::remove(path);
  for (const auto& r : rows) {
    xfer::FineTuneResult f;
    f.task = r.task;
    f.method = r.method;
    f.checkpoint = r.checkpoint;
    f.fraction = r.fraction;
    f.metric = r.metric;
    f.runs = r.runs;
    f.recompute();
    xfer::append_ledger(path, f);
  }
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dira_test_report_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("Welch examples") {
  const std::vector<double> a{2.1, 2.0, 1.9}, b{1.1, 1.0, 0.9};
  const auto r = report::welch_ttest(a, b);
  CHECK(r.t == doctest::Approx(12.2474487139).epsilon(1e-9));
  CHECK(r.df == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(std::abs(r.p - boost_p(r.t, r.df)) < 1e-9);
  CHECK(std::abs(r.p - 0.00026) < 5e-6);

  const auto same = report::welch_ttest(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);

  const std::vector<double> lo{1, 2, 3}, hi{101, 102, 103};
  CHECK(report::welch_ttest(lo, hi).p < 0.01);
}

TEST_CASE("Welch symmetry and affine invariance") {
  const std::vector<double> a{0.71, 0.74, 0.69, 0.77, 0.73}, b{0.78, 0.75, 0.80, 0.79};
  const auto ab = report::welch_ttest(a, b), ba = report::welch_ttest(b, a);
  CHECK(ab.t == doctest::Approx(-ba.t).epsilon(1e-14));
  CHECK(ab.p == doctest::Approx(ba.p).epsilon(1e-12));
  std::vector<double> a2, b2;
  for (double v : a) a2.push_back(37.0 * v - 4.0);
  for (double v : b) b2.push_back(37.0 * v - 4.0);
  CHECK(report::welch_ttest(a2, b2).p == doctest::Approx(ab.p).epsilon(1e-9));
  CHECK(std::abs(ab.p - boost_p(ab.t, ab.df)) < 1e-9);
}

TEST_CASE("Welch degenerate inputs") {
  const std::vector<double> c1{1, 1, 1}, c2{2, 2};
  CHECK(report::welch_ttest(c1, c1).p == 1.0);
  CHECK_THROWS_AS(report::welch_ttest(c1, c2), DegenerateVarianceError);
  CHECK_THROWS_AS(report::welch_ttest(std::vector<double>{1.0}, c1), PreconditionError);
}

TEST_CASE("t tail probability against Boost") {
  for (double df : {1.0, 2.5, 4.0, 9.0, 30.0, 200.0})
    for (double t : {0.0, 0.3, 1.0, 2.0, 4.5, 12.0, 60.0})
      CHECK(std::abs(report::t_two_sided_p(t, df) - boost_p(t, df)) < 1e-9);
}

TEST_CASE("CSV splitting honours quotes") {
  CHECK(report::split_csv_line("a,\"b,c\",d") == std::vector<std::string>{"a", "b,c", "d"});
  CHECK(report::split_csv_line("x,,y") == std::vector<std::string>{"x", "", "y"});
}

TEST_CASE("comparison rows") {
  const auto one = report::compare({row("moco-di", {0.70, 0.72})});
  REQUIRE(one.size() == 1);
  CHECK_FALSE(one[0].improvement.has_value());
  CHECK_FALSE(one[0].p.has_value());
  CHECK_FALSE(one[0].significant);

  const auto rows = report::compare({row("moco-dira", {0.7655, 0.7855}), row("moco-di", {0.7389, 0.7589})});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].method == "moco-di");
  CHECK(rows[1].method == "moco-dira");
  CHECK(rows[0].mean == doctest::Approx(74.89).epsilon(1e-12));
  CHECK(rows[1].baseline == "moco-di");
  REQUIRE(rows[1].improvement.has_value());
  CHECK(*rows[1].improvement == doctest::Approx(2.66).epsilon(1e-9));
  CHECK(report::comparison_markdown(rows).find("+2.66") != std::string::npos);
  CHECK(report::comparison_csv(rows).find("+2.66") != std::string::npos);

  const auto gap = report::compare({row("simsiam-dir", {0.5, 0.6})});
  REQUIRE(gap.size() == 1);
  CHECK(gap[0].baseline_missing);
  CHECK_FALSE(gap[0].improvement.has_value());

  const auto merged = report::compare({row("moco-di", {0.5, 0.6}), row("moco-di", {0.7})});
  REQUIRE(merged.size() == 1);
  CHECK(merged[0].n_runs == 3);
}

TEST_CASE("report files are deterministic") {
  const fs::path dir = scratch("det");
  const std::vector<report::LedgerRow> rows{
      row("moco-di", {0.60, 0.62, 0.61}, 0.1),  row("moco-dira", {0.66, 0.65, 0.67}, 0.1),
      row("moco-di", {0.70, 0.71, 0.69}, 0.5),  row("moco-dira", {0.72, 0.74, 0.73}, 0.5),
      row("random", {0.40, 0.45}, 0.1)};
  write_ledger(dir / "a.csv", rows);
  write_ledger(dir / "b.csv", rows);
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  CHECK(report::read_ledger(dir / "a.csv").size() == rows.size());

  std::ofstream(dir / "loc.csv") << "method,delta,correct,total,accuracy\nm/two_threshold,0.1,5,10,0.5\n"
                                    "m/two_threshold,0.2,3,10,0.3\n";
  report::build_tables({dir / "a.csv"}, {dir / "loc.csv"}, dir / "out1");
  report::build_tables({dir / "b.csv"}, {dir / "loc.csv"}, dir / "out2");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "out1")) {
    CHECK(slurp(e.path()) == slurp(dir / "out2" / e.path().filename()));
    ++files;
  }
  CHECK(fs::exists(dir / "out1" / "results.md"));
  CHECK(fs::exists(dir / "out1" / "label_fraction_segmentation_dice.png"));
  CHECK(fs::exists(dir / "out1" / "localization.png"));
  CHECK(files >= 6);

  report::build_tables({dir / "missing.csv"}, {}, dir / "empty");
  CHECK(fs::exists(dir / "empty" / "results.csv"));
  CHECK(report::read_ledger(dir / "missing.csv").empty());
  fs::remove_all(dir);
}
