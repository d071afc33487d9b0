// Two-sided Wilcoxon signed-rank test. Zero differences are discarded,
// absolute differences ranked with midranks, W = min(W+, W-). The p-value is
// exact (full sign-assignment distribution via dynamic programming over
// doubled ranks) for n <= 25 and a tie-corrected normal approximation with
// continuity correction beyond that.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "advseg/common.hpp"

namespace advseg {

struct WilcoxonResult {
  double statistic = 0.0;  // W = min(W+, W-)
  int n_effective = 0;
  double p_value = 1.0;
  std::string method;  // "exact" or "normal-approximation"
};

constexpr int kWilcoxonExactLimit = 25;

namespace detail {

// midranks of |d| as doubled integers (so ties at .5 stay exact)
inline std::vector<std::int64_t> doubled_midranks(const std::vector<double>& abs_d) {
  const std::size_t n = abs_d.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return abs_d[a] < abs_d[b]; });
  std::vector<std::int64_t> ranks2(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]]) ++j;
    // ranks i+1 .. j+1 (1-based); doubled midrank = (i+1 + j+1)
    const std::int64_t mid2 = static_cast<std::int64_t>(i + j + 2);
    for (std::size_t k = i; k <= j; ++k) ranks2[order[k]] = mid2;
    i = j + 1;
  }
  return ranks2;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace detail

inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                           const std::vector<double>& b) {
  ADVSEG_CHECK(a.size() == b.size(), ContractError,
               "wilcoxon_signed_rank: paired samples differ in length");
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diff.push_back(d);
  }
  const int n = static_cast<int>(diff.size());
  ADVSEG_CHECK(n >= 5, InsufficientDataError,
               "wilcoxon_signed_rank: only ", n, " nonzero differences (need >= 5)");

  std::vector<double> abs_d(diff.size());
  for (std::size_t i = 0; i < diff.size(); ++i) abs_d[i] = std::fabs(diff[i]);
  const auto ranks2 = detail::doubled_midranks(abs_d);

  std::int64_t w_plus2 = 0, w_minus2 = 0;
  for (std::size_t i = 0; i < diff.size(); ++i)
    (diff[i] > 0.0 ? w_plus2 : w_minus2) += ranks2[i];
  const std::int64_t w2 = std::min(w_plus2, w_minus2);

  WilcoxonResult res;
  res.statistic = static_cast<double>(w2) / 2.0;
  res.n_effective = n;

  if (n <= kWilcoxonExactLimit) {
    // distribution of W+ (doubled) over all 2^n sign assignments
    const std::int64_t max2 = std::accumulate(ranks2.begin(), ranks2.end(), std::int64_t{0});
    std::vector<std::uint64_t> count(static_cast<std::size_t>(max2) + 1, 0);
    count[0] = 1;
    std::int64_t reach = 0;
    for (std::int64_t r : ranks2) {
      reach += r;
      for (std::int64_t s = reach; s >= r; --s) count[static_cast<std::size_t>(s)] +=
          count[static_cast<std::size_t>(s - r)];
    }
    std::uint64_t le = 0;
    for (std::int64_t s = 0; s <= w2; ++s) le += count[static_cast<std::size_t>(s)];
    const double denom = std::pow(2.0, n);
    res.p_value = std::min(1.0, 2.0 * static_cast<double>(le) / denom);
    res.method = "exact";
  } else {
    const double nd = static_cast<double>(n);
    const double mu = nd * (nd + 1.0) / 4.0;
    double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0;
    // tie correction: sum(t^3 - t) / 48 over tie groups
    {
      std::vector<double> sorted = abs_d;
      std::sort(sorted.begin(), sorted.end());
      std::size_t i = 0;
      while (i < sorted.size()) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
      }
    }
    const double w = res.statistic;
    const double z = (w - mu + 0.5) / std::sqrt(var);  // continuity correction
    res.p_value = std::min(1.0, 2.0 * detail::normal_cdf(z));
    res.method = "normal-approximation";
  }
  return res;
}

}  // namespace advseg
