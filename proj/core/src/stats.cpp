#include "sgba/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "sgba/common.hpp"

namespace sgba::stats {

double median(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::kInvalidArgument, "median of empty set");
  std::vector<double> v(values.begin(), values.end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + mid));
  }
  return m;
}

double mean(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::kInvalidArgument, "mean of empty set");
  double s = 0.0;
  for (double x : values) s += x;
  return s / static_cast<double>(values.size());
}

double mad(std::span<const double> values) {
  const double med = median(values);
  std::vector<double> dev;
  dev.reserve(values.size());
  for (double x : values) dev.push_back(std::abs(x - med));
  return median(dev);
}

RankTest mann_whitney(std::span<const double> high, std::span<const double> low) {
  if (high.empty() || low.empty()) throw Error(ErrorCode::kInvalidArgument, "rank test needs two samples");
  RankTest r;
  for (double a : high) {
    for (double b : low) r.u += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  }
  const double n1 = static_cast<double>(high.size()), n2 = static_cast<double>(low.size());
  r.auc = r.u / (n1 * n2);

  std::map<double, int> ties;
  for (double a : high) ++ties[a];
  for (double b : low) ++ties[b];
  double tie_term = 0.0;
  for (const auto& [v, t] : ties) tie_term += static_cast<double>(t) * t * t - t;
  const double n = n1 + n2;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var > 0.0) {
    r.z = (r.u - n1 * n2 / 2.0) / std::sqrt(var);
    r.p_value = 0.5 * std::erfc(r.z / std::sqrt(2.0));
  } else {
    r.z = 0.0;
    r.p_value = 1.0;
  }
  return r;
}

}  // namespace sgba::stats
