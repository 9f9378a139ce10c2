#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace rtvar {

/// 1-based rank ceil(level * count), tolerant of the product landing a few ulp
/// above an integer (0.9 * 10 == 9.000000000000002). Clamped to >= 1.
std::size_t order_statistic_rank(double level, std::size_t count);

/// The order_statistic_rank(alpha, n)-th smallest value. Copies the input.
double empirical_quantile(std::span<const double> values, double alpha);

/// Same, for several levels over one sort.
std::vector<double> empirical_quantiles(std::span<const double> values,
                                        std::span<const double> alphas);

/// Neumaier compensated summation.
class CompensatedSum {
 public:
  void add(double v);
  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

}  // namespace rtvar
