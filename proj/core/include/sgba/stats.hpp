#pragma once

#include <span>
#include <vector>

namespace sgba::stats {

// Median with the even-count convention (mean of the two middle values).
double median(std::span<const double> values);
double mean(std::span<const double> values);

// Median absolute deviation about the median, unscaled.
double mad(std::span<const double> values);

// Consistency constant making 1.4826 * MAD estimate sigma for normal data.
inline constexpr double kMadConsistency = 1.4826;

// Mann-Whitney U comparison of `high` against `low` (ties get half credit).
struct RankTest {
  double u = 0.0;       // U statistic for `high`
  double auc = 0.5;     // U / (n_high * n_low): P(high > low)
  double z = 0.0;       // normal approximation, tie-corrected
  double p_value = 1.0; // one-sided P(Z >= z)
};
RankTest mann_whitney(std::span<const double> high, std::span<const double> low);

}  // namespace sgba::stats
