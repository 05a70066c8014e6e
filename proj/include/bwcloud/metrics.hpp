#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "bwcloud/error.hpp"

namespace bwcloud {

inline void check_pair(const std::vector<double>& y, const std::vector<double>& yhat, std::size_t min_n, const char* what) {
  if (y.size() != yhat.size())
    fail(ErrorKind::shape, std::string(what) + ": " + std::to_string(y.size()) + " targets vs " + std::to_string(yhat.size()) + " predictions");
  if (y.size() < min_n) fail(ErrorKind::parameter, std::string(what) + " needs at least " + std::to_string(min_n) + " values");
}

/// Coefficient of determination, 1 - SS_res / SS_tot. May be negative.
inline double r_squared(const std::vector<double>& y, const std::vector<double>& yhat) {
  check_pair(y, yhat, 2, "r_squared");
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    ss_tot += (y[i] - mean) * (y[i] - mean);
  }
  if (ss_tot == 0.0) fail(ErrorKind::undefined_variance, "r_squared with constant targets");
  return 1.0 - ss_res / ss_tot;
}

/// Mean absolute percentage error, in percent.
inline double mape(const std::vector<double>& y, const std::vector<double>& yhat) {
  check_pair(y, yhat, 1, "mape");
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 0.0) fail(ErrorKind::division, "mape with a zero target at index " + std::to_string(i));
    total += std::abs(y[i] - yhat[i]) / std::abs(y[i]);
  }
  return total / static_cast<double>(y.size()) * 100.0;
}

struct MetricPair {
  double r2 = 0.0;
  double mape = 0.0;
  std::size_t n = 0;
};

inline MetricPair evaluate(const std::vector<double>& y, const std::vector<double>& yhat) {
  return {r_squared(y, yhat), mape(y, yhat), y.size()};
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

/// Mean and standard error (sample sd / sqrt(n)); se is 0 for a single value.
inline MeanSe mean_se(const std::vector<double>& v) {
  MeanSe out;
  out.n = v.size();
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return out;
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.se = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  return out;
}

/// One row of a results file, as needed for summarizing.
struct ResultRow {
  std::string strategy;
  std::string scenario;
  std::string model;
  int repeat = 0;
  double r2 = 0.0;
  double mape = 0.0;
};

struct SummaryRow {
  std::string strategy;
  std::string scenario;
  std::string model;
  MeanSe r2;
  MeanSe mape;
};

inline int strategy_rank(const std::string& s) {
  if (s == "single_source") return 0;
  if (s == "joint") return 1;
  if (s == "transfer") return 2;
  return 3;
}

inline int scenario_rank(const std::string& s) {
  if (s == "none") return 0;
  if (s == "medium") return 1;
  if (s == "large") return 2;
  if (s == "medium_plus_large") return 3;
  return 4;
}

/// Mean and standard error per (strategy, scenario, model), ordered
/// single_source, joint, transfer; then scenario; then model name.
inline std::vector<SummaryRow> results_table(const std::vector<ResultRow>& rows) {
  using Key = std::tuple<int, int, std::string, std::string, std::string>;
  std::map<Key, std::pair<std::vector<double>, std::vector<double>>> cells;
  for (const auto& r : rows) {
    auto& cell = cells[Key{strategy_rank(r.strategy), scenario_rank(r.scenario), r.strategy, r.scenario, r.model}];
    cell.first.push_back(r.r2);
    cell.second.push_back(r.mape);
  }
  std::vector<SummaryRow> out;
  for (const auto& [key, cell] : cells)
    out.push_back({std::get<2>(key), std::get<3>(key), std::get<4>(key), mean_se(cell.first), mean_se(cell.second)});
  return out;
}

inline std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "strategy,scenario,model,r2_mean,r2_se,mape_mean,mape_se\n";
  for (const auto& r : rows)
    os << r.strategy << ',' << r.scenario << ',' << r.model << ',' << fmt(r.r2.mean, 6) << ',' << fmt(r.r2.se, 6) << ','
       << fmt(r.mape.mean, 6) << ',' << fmt(r.mape.se, 6) << '\n';
  return os.str();
}

/// Console table in report layout: "mean (se)" per metric.
inline std::string summary_console(const std::vector<SummaryRow>& rows) {
  std::vector<std::vector<std::string>> cells{{"strategy", "scenario", "model", "R2", "MAPE (%)", "n"}};
  for (const auto& r : rows)
    cells.push_back({r.strategy, r.scenario, r.model, fmt(r.r2.mean, 3) + " (" + fmt(r.r2.se, 3) + ")",
                     fmt(r.mape.mean, 2) + " (" + fmt(r.mape.se, 2) + ")", std::to_string(r.r2.n) + (r.r2.n == 1 ? "*" : "")});
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      os << cells[i][c] << std::string(width[c] - cells[i][c].size(), ' ');
      if (c + 1 < cells[i].size()) os << "  ";
    }
    os << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  bool single = false;
  for (const auto& r : rows) single = single || r.r2.n == 1;
  if (single) os << "* single repeat: standard error reported as 0\n";
  return os.str();
}

}  // namespace bwcloud
