#include "rtvar/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rtvar {

std::size_t order_statistic_rank(double level, std::size_t count) {
  const double product = level * static_cast<double>(count);
  const double rounded = std::round(product);
  const double rank = std::abs(product - rounded) <= 1e-9 * std::max(1.0, product)
                          ? rounded
                          : std::ceil(product);
  return std::max<std::size_t>(1, static_cast<std::size_t>(rank));
}

double empirical_quantile(std::span<const double> values, double alpha) {
  if (values.empty()) throw std::invalid_argument("empirical_quantile: empty sample");
  std::vector<double> copy(values.begin(), values.end());
  const std::size_t k = std::min(order_statistic_rank(alpha, copy.size()), copy.size()) - 1;
  std::nth_element(copy.begin(), copy.begin() + static_cast<std::ptrdiff_t>(k), copy.end());
  return copy[k];
}

std::vector<double> empirical_quantiles(std::span<const double> values,
                                        std::span<const double> alphas) {
  if (values.empty()) throw std::invalid_argument("empirical_quantiles: empty sample");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out;
  out.reserve(alphas.size());
  for (double a : alphas) {
    const std::size_t k = std::min(order_statistic_rank(a, sorted.size()), sorted.size()) - 1;
    out.push_back(sorted[k]);
  }
  return out;
}

void CompensatedSum::add(double v) {
  const double t = sum_ + v;
  if (std::abs(sum_) >= std::abs(v)) {
    compensation_ += (sum_ - t) + v;
  } else {
    compensation_ += (v - t) + sum_;
  }
  sum_ = t;
}

}  // namespace rtvar
