#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dira::report {

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
};

// Welch two-sample t-test. The tail probability of the t distribution is
// integrated numerically. Both variances zero: equal means give p = 1, anything
// else raises DegenerateVarianceError.
WelchResult welch_ttest(std::span<const double> a, std::span<const double> b);

// Two-sided tail 2 P(T > |t|) for a t distribution with df degrees of freedom.
double t_two_sided_p(double t, double df);

// Splits one CSV line, honouring double-quoted fields.
std::vector<std::string> split_csv_line(const std::string& line);

struct LedgerRow {
  std::string task, method, checkpoint, metric;
  double fraction = 0.0;
  std::vector<double> runs;
};
// Missing file or header only: no rows.
std::vector<LedgerRow> read_ledger(const std::filesystem::path& path);

struct LocalizationRow {
  std::string method;
  double delta = 0.0;
  std::size_t correct = 0, total = 0;
  double accuracy = 0.0;
};
std::vector<LocalizationRow> read_localization_csv(const std::filesystem::path& path);

struct ComparisonRow {
  std::string task, metric, method;
  double fraction = 0.0;
  std::size_t n_runs = 0;
  double mean = 0.0, std = 0.0;             // on the 0-100 scale
  std::string baseline;                     // "<prefix>-di" for ablated rows, else empty
  std::optional<double> improvement;        // mean - baseline mean
  std::optional<double> p;                  // Welch p against the baseline
  bool significant = false;                 // p < 0.05
  bool baseline_missing = false;
};

// Rows sharing task, metric, fraction and method are merged (runs concatenated).
// Ordered by task, metric, fraction, method.
std::vector<ComparisonRow> compare(const std::vector<LedgerRow>& rows);

std::string comparison_csv(const std::vector<ComparisonRow>& rows);
std::string comparison_markdown(const std::vector<ComparisonRow>& rows);
std::string localization_markdown(const std::vector<LocalizationRow>& rows);

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};
// Static line plot; colors follow the order of `series` and are listed in the
// Markdown legend written next to it.
void write_line_plot(const std::filesystem::path& path, const std::vector<Series>& series);
std::string plot_legend(const std::vector<Series>& series);

// Reads every ledger and localization CSV and writes tables and plots under out_dir.
void build_tables(const std::vector<std::filesystem::path>& ledgers,
                  const std::vector<std::filesystem::path>& localization_csvs, const std::filesystem::path& out_dir);

}  // namespace dira::report
