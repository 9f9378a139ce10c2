#pragma once

#include <cstddef>
#include <span>

namespace rtvar {

/// Anything that can estimate a conditional alpha-quantile at a point.
class QuantileModel {
 public:
  virtual ~QuantileModel() = default;
  virtual std::size_t dim() const = 0;
  virtual double predict_quantile(std::span<const double> x, double alpha) const = 0;
};

}  // namespace rtvar
