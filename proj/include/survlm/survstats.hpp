// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Censoring-aware survival statistics: Kaplan-Meier, log-rank, Harrell's
// concordance index, median risk stratification and a token-level F1
// used as a lexical generation metric.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "survlm/error.hpp"

namespace survlm {

struct SurvivalRecord {
  std::string patient_id;
  double time = 0.0;   // days
  bool event = false;  // false = censored
};

// Right-continuous survival curve with knots at event times only.
struct StepFunction {
  std::vector<double> times;
  std::vector<double> values;
  std::vector<std::size_t> at_risk;
  std::vector<std::size_t> events;
  double value_at_zero = 1.0;

  double operator()(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return value_at_zero;
    return values[static_cast<std::size_t>(it - times.begin()) - 1];
  }
};

enum class RiskGroup { Low, High };

inline const char* to_string(RiskGroup g) { return g == RiskGroup::High ? "High" : "Low"; }

struct LogRankResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

namespace detail {

// Regularized lower incomplete gamma P(a, x) by series, valid for x < a + 1.
inline double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int n = 0; n < 1000; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by modified Lentz continued
// fraction, valid for x >= a + 1.
inline double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 1000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
inline double gamma_q(double a, double x) {
  if (a <= 0.0) throw std::invalid_argument("gamma_q: a must be positive");
  if (x < 0.0) throw std::invalid_argument("gamma_q: x must be nonnegative");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_fraction(a, x);
}

// Upper tail of the chi-square distribution with `dof` degrees of freedom.
inline double chi_square_sf(double x, double dof) {
  if (x <= 0.0) return 1.0;
  return std::clamp(gamma_q(0.5 * dof, 0.5 * x), 0.0, 1.0);
}

inline StepFunction km_estimate(const std::vector<SurvivalRecord>& records) {
  if (records.empty()) throw std::invalid_argument("empty cohort");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return records[a].time < records[b].time;
  });

  StepFunction out;
  double survival = 1.0;
  std::size_t at_risk = records.size();
  for (std::size_t k = 0; k < order.size();) {
    const double t = records[order[k]].time;
    std::size_t deaths = 0;
    std::size_t leaving = 0;
    while (k < order.size() && records[order[k]].time == t) {
      if (records[order[k]].event) ++deaths;
      ++leaving;
      ++k;
    }
    if (deaths > 0) {
      survival *= 1.0 - static_cast<double>(deaths) / static_cast<double>(at_risk);
      out.times.push_back(t);
      out.values.push_back(survival);
      out.at_risk.push_back(at_risk);
      out.events.push_back(deaths);
    }
    at_risk -= leaving;
  }
  return out;
}

// Two-group log-rank test, 1 degree of freedom. Event times where the
// hypergeometric variance vanishes (a single subject at risk) are skipped.
inline LogRankResult log_rank_test(const std::vector<SurvivalRecord>& group_a,
                                   const std::vector<SurvivalRecord>& group_b) {
  if (group_a.empty() || group_b.empty())
    throw std::invalid_argument("log_rank_test: both groups must be nonempty");

  struct Entry {
    double time;
    bool event;
    bool in_a;
  };
  std::vector<Entry> pooled;
  pooled.reserve(group_a.size() + group_b.size());
  for (const auto& r : group_a) pooled.push_back({r.time, r.event, true});
  for (const auto& r : group_b) pooled.push_back({r.time, r.event, false});
  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const Entry& x, const Entry& y) { return x.time < y.time; });

  double n_a = static_cast<double>(group_a.size());
  double n_b = static_cast<double>(group_b.size());
  double observed_minus_expected = 0.0;
  double variance = 0.0;
  std::size_t total_events = 0;
  for (std::size_t k = 0; k < pooled.size();) {
    const double t = pooled[k].time;
    double d_a = 0.0, d_b = 0.0, leave_a = 0.0, leave_b = 0.0;
    while (k < pooled.size() && pooled[k].time == t) {
      const auto& e = pooled[k];
      (e.in_a ? leave_a : leave_b) += 1.0;
      if (e.event) (e.in_a ? d_a : d_b) += 1.0;
      ++k;
    }
    const double d = d_a + d_b;
    const double n = n_a + n_b;
    if (d > 0.0) {
      total_events += static_cast<std::size_t>(d);
      if (n > 1.0) {
        observed_minus_expected += d_a - d * n_a / n;
        variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
      }
    }
    n_a -= leave_a;
    n_b -= leave_b;
  }
  if (total_events == 0) throw std::invalid_argument("degenerate test");
  LogRankResult out;
  if (variance > 0.0) {
    out.statistic = observed_minus_expected * observed_minus_expected / variance;
    out.p_value = chi_square_sf(out.statistic, 1.0);
  }
  return out;
}

// Harrell's c-index. A pair is comparable when the earlier time is an
// event; equal-time pairs count only when both are events, and then
// score 0.5 because neither subject failed first.
inline double concordance_index(const std::vector<SurvivalRecord>& records,
                                const std::vector<double>& risks) {
  if (records.size() != risks.size())
    throw std::invalid_argument("concordance_index: size mismatch");
  if (records.size() < 2) throw std::invalid_argument("concordance_index: need two records");

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return records[a].time < records[b].time;
  });

  double concordant = 0.0;
  double comparable = 0.0;
  for (std::size_t g = 0; g < order.size();) {
    std::size_t g_end = g;
    while (g_end < order.size() && records[order[g_end]].time == records[order[g]].time)
      ++g_end;
    std::size_t tied_events = 0;
    for (std::size_t a = g; a < g_end; ++a) {
      const std::size_t i = order[a];
      if (!records[i].event) continue;
      ++tied_events;
      for (std::size_t b = g_end; b < order.size(); ++b) {
        const std::size_t j = order[b];
        comparable += 1.0;
        if (risks[i] > risks[j]) concordant += 1.0;
        else if (risks[i] == risks[j]) concordant += 0.5;
      }
    }
    const double tied_pairs = 0.5 * static_cast<double>(tied_events) *
                              static_cast<double>(tied_events > 0 ? tied_events - 1 : 0);
    comparable += tied_pairs;
    concordant += 0.5 * tied_pairs;
    g = g_end;
  }
  if (comparable == 0.0) throw std::invalid_argument("no comparable pairs");
  return concordant / comparable;
}

// Lower middle order statistic for even counts.
inline double lower_median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("lower_median: empty input");
  const std::size_t mid = (values.size() - 1) / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid),
                   values.end());
  return values[mid];
}

inline std::vector<RiskGroup> stratify_median(const std::vector<double>& risks) {
  if (risks.empty()) throw std::invalid_argument("stratify_median: empty input");
  const double median = lower_median(risks);
  std::vector<RiskGroup> out;
  out.reserve(risks.size());
  for (double r : risks) out.push_back(r > median ? RiskGroup::High : RiskGroup::Low);
  return out;
}

namespace detail {

inline std::vector<std::string> lowercase_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(word);
  }
  return out;
}

}  // namespace detail

// Multiset token F1 over whitespace tokens, case-insensitive.
inline double token_f1(std::string_view prediction, std::string_view reference) {
  const auto pred = detail::lowercase_words(prediction);
  const auto ref = detail::lowercase_words(reference);
  if (pred.empty() && ref.empty()) return 1.0;
  if (pred.empty() || ref.empty()) return 0.0;
  std::map<std::string, std::size_t> ref_counts;
  for (const auto& w : ref) ++ref_counts[w];
  std::size_t overlap = 0;
  for (const auto& w : pred) {
    auto it = ref_counts.find(w);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// CSV interfaces

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw DataError(context + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

// Cohort CSV: header `patient_id,time,event`, event in {0,1}.
inline std::vector<SurvivalRecord> read_cohort_csv(std::istream& in,
                                                   const std::string& name = "cohort") {
  std::string line;
  if (!std::getline(in, line) || line != "patient_id,time,event")
    throw DataError(name + ": expected header 'patient_id,time,event'");
  std::vector<SurvivalRecord> out;
  std::set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(line_no);
    auto cols = split_csv_line(line);
    if (cols.size() != 3) throw DataError(where + ": expected 3 columns");
    SurvivalRecord r;
    r.patient_id = std::string(cols[0]);
    if (r.patient_id.empty()) throw DataError(where + ": empty patient_id");
    if (!seen.insert(r.patient_id).second)
      throw DataError(where + ": duplicate patient_id " + r.patient_id);
    r.time = parse_double(cols[1], where);
    if (!(r.time >= 0.0)) throw DataError(where + ": time must be nonnegative");
    if (cols[2] == "1") r.event = true;
    else if (cols[2] == "0") r.event = false;
    else throw DataError(where + ": event must be 0 or 1");
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<SurvivalRecord> read_cohort_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_cohort_csv(in, path);
}

inline void write_cohort_csv(std::ostream& out, const std::vector<SurvivalRecord>& records) {
  out << "patient_id,time,event\n";
  for (const auto& r : records)
    out << r.patient_id << ',' << format_double(r.time) << ',' << (r.event ? 1 : 0) << '\n';
}

// KM export: `time,survival,at_risk,events`, one row per knot.
inline void write_km_csv(std::ostream& out, const StepFunction& curve) {
  out << "time,survival,at_risk,events\n";
  for (std::size_t i = 0; i < curve.times.size(); ++i)
    out << format_double(curve.times[i]) << ',' << format_double(curve.values[i]) << ','
        << curve.at_risk[i] << ',' << curve.events[i] << '\n';
}

}  // namespace survlm
