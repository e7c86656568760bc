#include "dira/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <tuple>

#include "dira/errors.hpp"
#include "dira/image.hpp"

namespace dira::report {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- Welch

namespace {

double t_pdf(double x, double df) {
  const double log_c = std::lgamma(0.5 * (df + 1.0)) - std::lgamma(0.5 * df) - 0.5 * std::log(df * std::numbers::pi);
  return std::exp(log_c - 0.5 * (df + 1.0) * std::log1p(x * x / df));
}

template <class F>
double simpson(const F& f, double a, double b, double fa, double fm, double fb, double whole, double eps, int depth) {
  const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * eps) return left + right + delta / 15.0;
  return simpson(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1) +
         simpson(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1);
}

template <class F>
double integrate(const F& f, double a, double b, double eps) {
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return simpson(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), eps, 50);
}

}  // namespace

double t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw ParameterError("degrees of freedom must be positive");
  const double x = std::abs(t);
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  if (x < 1.0) {
    const double body = integrate([&](double u) { return t_pdf(u, df); }, 0.0, x, 1e-15);
    return std::clamp(1.0 - 2.0 * body, 0.0, 1.0);
  }
  // Tail over [x, inf) with u = sqrt(x / v), which maps it onto (0, 1] and keeps
  // the integrand smooth at u = 0 for df >= 1.
  auto g = [&](double u) {
    if (u <= 0.0) return 0.0;
    return t_pdf(x / (u * u), df) * 2.0 * x / (u * u * u);
  };
  return std::clamp(2.0 * integrate(g, 0.0, 1.0, 1e-15), 0.0, 1.0);
}

WelchResult welch_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw PreconditionError("Welch t-test needs at least two values per sample");
  auto moments = [](std::span<const double> v) {
    const double n = static_cast<double>(v.size());
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, ss / (n - 1.0)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double qa = va / na, qb = vb / nb, se2 = qa + qb;
  WelchResult r;
  if (se2 == 0.0) {
    if (ma != mb) throw DegenerateVarianceError("both samples have zero variance and different means");
    r.t = 0.0;
    r.df = na + nb - 2.0;
    r.p = 1.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  r.p = t_two_sided_p(r.t, r.df);
  return r;
}

// ---------------------------------------------------------------- CSV input

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  return out;
}

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::vector<std::string>& header) {
  std::vector<std::vector<std::string>> rows;
  if (!fs::exists(path)) return rows;
  std::ifstream in(path);
  if (!in) throw StorageError("cannot read " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (line_no == 1) {
      if (fields != header) throw PreconditionError(path.string() + ": unexpected header '" + line + "'");
      continue;
    }
    if (fields.size() != header.size()) {
      throw PreconditionError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                              std::to_string(header.size()) + " fields");
    }
    rows.push_back(std::move(fields));
  }
  return rows;
}

double to_double(const std::string& s, const fs::path& path) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw PreconditionError(path.string() + ": bad number '" + s + "'");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::vector<LedgerRow> read_ledger(const fs::path& path) {
  std::vector<LedgerRow> out;
  for (const auto& f : read_csv(path, {"task", "method", "checkpoint", "fraction", "metric", "n_runs", "mean", "std",
                                       "runs"})) {
    LedgerRow r{f[0], f[1], f[2], f[4], to_double(f[3], path), {}};
    std::stringstream ss(f[8]);
    std::string item;
    while (std::getline(ss, item, ';'))
      if (!item.empty()) r.runs.push_back(to_double(item, path));
    if (r.runs.size() != static_cast<std::size_t>(to_double(f[5], path))) {
      throw PreconditionError(path.string() + ": n_runs disagrees with the run list");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<LocalizationRow> read_localization_csv(const fs::path& path) {
  std::vector<LocalizationRow> out;
  for (const auto& f : read_csv(path, {"method", "delta", "correct", "total", "accuracy"})) {
    out.push_back({f[0], to_double(f[1], path), static_cast<std::size_t>(to_double(f[2], path)),
                   static_cast<std::size_t>(to_double(f[3], path)), to_double(f[4], path)});
  }
  return out;
}

// ---------------------------------------------------------------- tables

std::vector<ComparisonRow> compare(const std::vector<LedgerRow>& rows) {
  using Key = std::tuple<std::string, std::string, double, std::string>;
  std::map<Key, std::vector<double>> runs;
  for (const auto& r : rows) {
    auto& v = runs[{r.task, r.metric, r.fraction, r.method}];
    v.insert(v.end(), r.runs.begin(), r.runs.end());
  }
  std::vector<ComparisonRow> out;
  for (const auto& [key, v] : runs) {
    ComparisonRow c;
    std::tie(c.task, c.metric, c.fraction, c.method) = key;
    c.n_runs = v.size();
    const double n = static_cast<double>(v.size());
    c.mean = n > 0 ? 100.0 * std::accumulate(v.begin(), v.end(), 0.0) / n : 0.0;
    double ss = 0.0;
    for (double x : v) ss += (100.0 * x - c.mean) * (100.0 * x - c.mean);
    c.std = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;

    const auto dash = c.method.rfind('-');
    if (dash != std::string::npos && c.method.substr(dash + 1) != "di") {
      c.baseline = c.method.substr(0, dash) + "-di";
      const auto it = runs.find({c.task, c.metric, c.fraction, c.baseline});
      if (it == runs.end() || it->second.empty()) {
        c.baseline_missing = true;
      } else {
        const auto& base = it->second;
        const double base_mean = 100.0 * std::accumulate(base.begin(), base.end(), 0.0) / static_cast<double>(base.size());
        c.improvement = c.mean - base_mean;
        if (v.size() >= 2 && base.size() >= 2) {
          try {
            c.p = welch_ttest(v, base).p;
            c.significant = *c.p < 0.05;
          } catch (const DegenerateVarianceError&) {
            c.p = 0.0;
            c.significant = true;
          }
        }
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::string s = "task,metric,fraction,method,n_runs,mean,std,baseline,improvement,p,significant\n";
  for (const auto& r : rows) {
    s += r.task + "," + r.metric + "," + fmt("%g", r.fraction) + "," + r.method + "," + std::to_string(r.n_runs) + "," +
         fmt("%.2f", r.mean) + "," + fmt("%.2f", r.std) + "," + r.baseline + ",";
    s += r.improvement ? fmt("%+.2f", *r.improvement) : (r.baseline_missing ? "missing" : "");
    s += ",";
    s += r.p ? fmt("%.3g", *r.p) : "";
    s += std::string(",") + (r.significant ? "1" : "0") + "\n";
  }
  return s;
}

std::string comparison_markdown(const std::vector<ComparisonRow>& rows) {
  std::string s = "| task | metric | fraction | method | runs | mean ± std | vs. baseline |\n";
  s += "|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    std::string delta;
    if (r.improvement) {
      delta = fmt("%+.2f", *r.improvement) + " vs " + r.baseline;
      if (r.significant) delta += " (p < 0.05)";
    } else if (r.baseline_missing) {
      delta = "no " + r.baseline + " row";
    }
    s += "| " + r.task + " | " + r.metric + " | " + fmt("%g%%", 100.0 * r.fraction) + " | " + r.method + " | " +
         std::to_string(r.n_runs) + " | " + fmt("%.2f", r.mean) + " ± " + fmt("%.2f", r.std) + " | " + delta + " |\n";
  }
  return s;
}

std::string localization_markdown(const std::vector<LocalizationRow>& rows) {
  std::vector<double> deltas;
  std::map<std::string, std::map<double, double>> table;
  for (const auto& r : rows) {
    deltas.push_back(r.delta);
    table[r.method][r.delta] = r.accuracy;
  }
  std::sort(deltas.begin(), deltas.end());
  deltas.erase(std::unique(deltas.begin(), deltas.end()), deltas.end());
  std::string s = "| method |";
  std::string rule = "|---|";
  for (double d : deltas) {
    s += fmt(" δ=%g%% |", 100.0 * d);
    rule += "---|";
  }
  s += "\n" + rule + "\n";
  for (const auto& [method, acc] : table) {
    s += "| " + method + " |";
    for (double d : deltas) {
      const auto it = acc.find(d);
      s += it == acc.end() ? " |" : fmt(" %.2f |", 100.0 * it->second);
    }
    s += "\n";
  }
  return s;
}

// ---------------------------------------------------------------- plots

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette{{{31, 119, 180},
                                                                {255, 127, 14},
                                                                {44, 160, 44},
                                                                {214, 39, 40},
                                                                {148, 103, 189},
                                                                {140, 86, 75},
                                                                {227, 119, 194},
                                                                {127, 127, 127}}};
const char* const kPaletteNames[] = {"blue", "orange", "green", "red", "purple", "brown", "pink", "gray"};

struct Canvas {
  int w, h;
  std::vector<std::uint8_t> rgb;
  Canvas(int w_, int h_) : w(w_), h(h_), rgb(static_cast<std::size_t>(w_ * h_ * 3), 255) {}
  void put(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    auto* p = &rgb[static_cast<std::size_t>((y * w + x) * 3)];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
  void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      put(x0, y0, c);
      put(x0, y0 + 1, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
};

}  // namespace

std::string plot_legend(const std::vector<Series>& series) {
  std::string s;
  for (std::size_t i = 0; i < series.size(); ++i) {
    s += std::string(i ? ", " : "") + kPaletteNames[i % kPalette.size()] + ": " + series[i].label;
  }
  return s;
}

void write_line_plot(const fs::path& path, const std::vector<Series>& series) {
  constexpr int W = 480, H = 320, M = 32;
  Canvas cv(W, H);
  double x_lo = INFINITY, x_hi = -INFINITY, y_lo = INFINITY, y_hi = -INFINITY;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      x_lo = std::min(x_lo, x);
      x_hi = std::max(x_hi, x);
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  if (!std::isfinite(x_lo)) x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
  if (x_hi == x_lo) x_lo -= 0.5, x_hi += 0.5;
  if (y_hi == y_lo) y_lo -= 0.5, y_hi += 0.5;
  const double pad = 0.05 * (y_hi - y_lo);
  y_lo -= pad;
  y_hi += pad;
  auto px = [&](double x) { return M + static_cast<int>(std::lround((x - x_lo) / (x_hi - x_lo) * (W - 2 * M))); };
  auto py = [&](double y) { return H - M - static_cast<int>(std::lround((y - y_lo) / (y_hi - y_lo) * (H - 2 * M))); };

  for (int k = 0; k <= 4; ++k) {
    const int y = H - M - k * (H - 2 * M) / 4;
    cv.line(M, y, W - M, y, {225, 225, 225});
  }
  cv.line(M, H - M, W - M, H - M, {0, 0, 0});
  cv.line(M, M, M, H - M, {0, 0, 0});
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto c = kPalette[i % kPalette.size()];
    auto pts = series[i].points;
    std::sort(pts.begin(), pts.end());
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const int x = px(pts[k].first), y = py(pts[k].second);
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) cv.put(x + dx, y + dy, c);
      if (k) cv.line(px(pts[k - 1].first), py(pts[k - 1].second), x, y, c);
    }
  }
  write_png_rgb(path, cv.rgb, H, W);
}

// ---------------------------------------------------------------- driver

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot write " + path.string());
  out << text;
}

}  // namespace

void build_tables(const std::vector<fs::path>& ledgers, const std::vector<fs::path>& localization_csvs,
                  const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<LedgerRow> rows;
  for (const auto& p : ledgers) {
    auto r = read_ledger(p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const auto cmp = compare(rows);
  write_text(out_dir / "results.csv", comparison_csv(cmp));
  std::string md = "# Fine-tuning results\n\nMetric values are scaled to 0-100.\n\n" + comparison_markdown(cmp);

  // Metric against label fraction, one plot per task and metric with several fractions.
  std::map<std::pair<std::string, std::string>, std::map<std::string, Series>> curves;
  for (const auto& c : cmp) {
    auto& s = curves[{c.task, c.metric}][c.method];
    s.label = c.method;
    s.points.emplace_back(100.0 * c.fraction, c.mean);
  }
  for (const auto& [key, by_method] : curves) {
    std::vector<Series> series;
    bool several = false;
    for (const auto& [m, s] : by_method) {
      series.push_back(s);
      several = several || s.points.size() > 1;
    }
    if (!several) continue;
    const std::string name = "label_fraction_" + key.first + "_" + key.second + ".png";
    write_line_plot(out_dir / name, series);
    md += "\n![" + key.second + " vs label fraction](" + name + ")\n\n" + plot_legend(series) + "\n";
  }
  write_text(out_dir / "results.md", md);

  std::vector<LocalizationRow> loc;
  for (const auto& p : localization_csvs) {
    auto r = read_localization_csv(p);
    loc.insert(loc.end(), r.begin(), r.end());
  }
  std::sort(loc.begin(), loc.end(), [](const auto& a, const auto& b) {
    return std::tie(a.method, a.delta) < std::tie(b.method, b.delta);
  });
  std::string csv = "method,delta,correct,total,accuracy\n";
  for (const auto& r : loc) {
    csv += r.method + "," + fmt("%g", r.delta) + "," + std::to_string(r.correct) + "," + std::to_string(r.total) + "," +
           fmt("%.9g", r.accuracy) + "\n";
  }
  write_text(out_dir / "localization.csv", csv);
  std::string loc_md = "# Localization accuracy (%)\n\n" + localization_markdown(loc);
  if (!loc.empty()) {
    std::map<std::string, Series> by_method;
    for (const auto& r : loc) {
      by_method[r.method].label = r.method;
      by_method[r.method].points.emplace_back(r.delta, 100.0 * r.accuracy);
    }
    std::vector<Series> series;
    for (const auto& [m, s] : by_method) series.push_back(s);
    write_line_plot(out_dir / "localization.png", series);
    loc_md += "\n![accuracy vs delta](localization.png)\n\n" + plot_legend(series) + "\n";
  }
  write_text(out_dir / "localization.md", loc_md);
}

}  // namespace dira::report
