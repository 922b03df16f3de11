#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "segqa/grid.hpp"
#include "segqa/rng.hpp"

namespace segqa {

// Per-structure Dice similarity for the 9 foreground labels plus their mean.
struct DscReport {
  std::array<double, 9> per_structure{};
  double mean = 0.0;
};

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::string method;
};

// Dice per structure: 2|A∩B| / (|A|+|B|); empty/empty counts as perfect
// agreement (1.0), empty vs nonempty as total disagreement (0.0).
inline DscReport dsc(const LabelMap& a, const LabelMap& b) {
  if (a.dims != b.dims) throw ValidationError("dsc: dims mismatch");
  std::array<std::int64_t, kNumLabels> na{}, nb{}, inter{};
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    ++na[a.labels[i]];
    ++nb[b.labels[i]];
    if (a.labels[i] == b.labels[i]) ++inter[a.labels[i]];
  }
  DscReport r;
  double sum = 0.0;
  for (int l = 1; l < kNumLabels; ++l) {
    double d;
    if (na[l] == 0 && nb[l] == 0)
      d = 1.0;
    else if (na[l] == 0 || nb[l] == 0)
      d = 0.0;
    else
      d = 2.0 * inter[l] / static_cast<double>(na[l] + nb[l]);
    r.per_structure[l - 1] = d;
    sum += d;
  }
  r.mean = sum / 9.0;
  return r;
}

inline double mae(const std::vector<double>& y_true, const std::vector<double>& y_pred) {
  if (y_true.size() != y_pred.size()) throw ValidationError("mae: length mismatch");
  if (y_true.empty()) throw ValidationError("mae: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) acc += std::abs(y_true[i] - y_pred[i]);
  return acc / static_cast<double>(y_true.size());
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ValidationError("pearson: length mismatch");
  if (x.size() < 3) throw ValidationError("pearson: need at least 3 points");
  const double n = static_cast<double>(x.size());
  double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) throw ValidationError("pearson: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

// Ranks with average assignment for ties.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(ranks(x), ranks(y));
}

// ---------------------------------------------------------------------------
// Special functions (series/continued-fraction implementations; no tables).
// ---------------------------------------------------------------------------

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

namespace detail {

// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction.
inline double ibeta_cf(double a, double b, double x) {
  const double tiny = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return h;
}

}  // namespace detail

inline double ibeta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw ValidationError("ibeta: a, b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                    b * std::log1p(-x);
  double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::ibeta_cf(a, b, x) / a;
  return 1.0 - front * detail::ibeta_cf(b, a, 1.0 - x) / b;
}

inline double f_cdf(double x, double d1, double d2) {
  if (x <= 0.0) return 0.0;
  return ibeta(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2));
}

// ---------------------------------------------------------------------------
// Hypothesis tests
// ---------------------------------------------------------------------------

enum class Alternative { TwoSided, Greater, Less };

namespace detail {

// Exact tail probability of the signed-rank statistic by enumerating all
// 2^n sign assignments over the observed rank values (ties handled exactly).
inline double signed_rank_exact_p(const std::vector<double>& rank_values, double w_plus,
                                  Alternative alt) {
  const int n = static_cast<int>(rank_values.size());
  const std::uint64_t total = 1ULL << n;
  std::uint64_t ge = 0, le = 0;
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    double w = 0.0;
    for (int i = 0; i < n; ++i)
      if (mask & (1ULL << i)) w += rank_values[i];
    if (w >= w_plus - 1e-12) ++ge;
    if (w <= w_plus + 1e-12) ++le;
  }
  double p_greater = static_cast<double>(ge) / static_cast<double>(total);
  double p_less = static_cast<double>(le) / static_cast<double>(total);
  switch (alt) {
    case Alternative::Greater: return p_greater;
    case Alternative::Less: return p_less;
    default: return std::min(1.0, 2.0 * std::min(p_greater, p_less));
  }
}

inline double signed_rank_approx_p(const std::vector<double>& rank_values, double w_plus,
                                   Alternative alt) {
  const double n = static_cast<double>(rank_values.size());
  double mean = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  // tie correction: subtract sum(t^3 - t)/48 over tie groups of |d| ranks
  std::vector<double> sorted = rank_values;
  std::sort(sorted.begin(), sorted.end());
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    double t = static_cast<double>(j - i + 1);
    var -= (t * t * t - t) / 48.0;
    i = j + 1;
  }
  if (var <= 0.0) throw ValidationError("wilcoxon: zero variance (all ranks tied)");
  double sd = std::sqrt(var);
  auto z_greater = (w_plus - mean - 0.5) / sd;  // continuity corrected
  auto z_less = (w_plus - mean + 0.5) / sd;
  double p_greater = 1.0 - normal_cdf(z_greater);
  double p_less = normal_cdf(z_less);
  switch (alt) {
    case Alternative::Greater: return p_greater;
    case Alternative::Less: return p_less;
    default: return std::min(1.0, 2.0 * std::min(p_greater, p_less));
  }
}

}  // namespace detail

// Paired Wilcoxon signed-rank test. Zero differences are dropped; exact
// enumeration for n <= 12, normal approximation with tie correction above.
inline TestResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                       Alternative alt = Alternative::TwoSided,
                                       bool force_approx = false) {
  if (a.size() != b.size()) throw ValidationError("wilcoxon_signed_rank: length mismatch");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  if (diffs.size() < 5)
    throw ValidationError("wilcoxon_signed_rank: fewer than 5 non-tied pairs");
  std::vector<double> abs_d(diffs.size());
  for (std::size_t i = 0; i < diffs.size(); ++i) abs_d[i] = std::abs(diffs[i]);
  std::vector<double> r = ranks(abs_d);
  double w_plus = 0.0;
  for (std::size_t i = 0; i < diffs.size(); ++i)
    if (diffs[i] > 0.0) w_plus += r[i];
  TestResult res;
  res.statistic = w_plus;
  if (diffs.size() <= 12 && !force_approx) {
    res.p_value = detail::signed_rank_exact_p(r, w_plus, alt);
    res.method = "wilcoxon-signed-rank-exact";
  } else {
    res.p_value = detail::signed_rank_approx_p(r, w_plus, alt);
    res.method = "wilcoxon-signed-rank-normal";
  }
  return res;
}

// Wilcoxon rank-sum (Mann-Whitney) test for two independent samples,
// normal approximation with tie correction and continuity correction.
inline TestResult rank_sum(const std::vector<double>& a, const std::vector<double>& b,
                           Alternative alt = Alternative::TwoSided) {
  if (a.size() < 2 || b.size() < 2) throw ValidationError("rank_sum: need >= 2 per sample");
  const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size());
  std::vector<double> combined = a;
  combined.insert(combined.end(), b.begin(), b.end());
  std::vector<double> r = ranks(combined);
  double w = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) w += r[i];
  double n = n1 + n2;
  double mean = n1 * (n + 1.0) / 2.0;
  // tie correction
  std::vector<double> sorted = combined;
  std::sort(sorted.begin(), sorted.end());
  double tie_sum = 0.0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    double t = static_cast<double>(j - i + 1);
    tie_sum += t * t * t - t;
    i = j + 1;
  }
  double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_sum / (n * (n - 1.0)));
  if (var <= 0.0) throw ValidationError("rank_sum: zero variance (all values tied)");
  double sd = std::sqrt(var);
  double p_greater = 1.0 - normal_cdf((w - mean - 0.5) / sd);
  double p_less = normal_cdf((w - mean + 0.5) / sd);
  TestResult res;
  res.statistic = w;
  res.method = "wilcoxon-rank-sum-normal";
  switch (alt) {
    case Alternative::Greater: res.p_value = p_greater; break;
    case Alternative::Less: res.p_value = p_less; break;
    default: res.p_value = std::min(1.0, 2.0 * std::min(p_greater, p_less));
  }
  return res;
}

// One-way ANOVA: F = MS_between / MS_within, p from the F distribution.
inline TestResult anova_oneway(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw ValidationError("anova_oneway: need >= 2 groups");
  for (const auto& g : groups)
    if (g.size() < 2) throw ValidationError("anova_oneway: each group needs >= 2 values");
  double n_total = 0.0, grand_sum = 0.0;
  for (const auto& g : groups) {
    n_total += static_cast<double>(g.size());
    grand_sum += std::accumulate(g.begin(), g.end(), 0.0);
  }
  double grand_mean = grand_sum / n_total;
  double ss_between = 0.0, ss_within = 0.0;
  for (const auto& g : groups) {
    double m = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
    ss_between += static_cast<double>(g.size()) * (m - grand_mean) * (m - grand_mean);
    for (double v : g) ss_within += (v - m) * (v - m);
  }
  double d1 = static_cast<double>(groups.size()) - 1.0;
  double d2 = n_total - static_cast<double>(groups.size());
  if (ss_within <= 0.0) throw ValidationError("anova_oneway: zero within-group variance");
  double f = (ss_between / d1) / (ss_within / d2);
  TestResult res;
  res.statistic = f;
  res.p_value = 1.0 - f_cdf(f, d1, d2);
  res.method = "anova-oneway";
  return res;
}

}  // namespace segqa
