#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "rtvar/market.hpp"
#include "rtvar/quantile_model.hpp"

namespace rtvar {

/// Disjoint train / calibration partition of {0..n-1}, each part ascending.
struct SplitPlan {
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> calib_indices;
  double train_fraction = 0.7;
};

/// Uniformly random partition with round(train_fraction * n) training points.
/// Throws std::invalid_argument when either part would be empty.
SplitPlan split_dataset(std::size_t n, double train_fraction, std::uint64_t seed);

/// Rows `indices` of `data`, in order.
OfflineDataset select_rows(const OfflineDataset& data, std::span<const std::size_t> indices);

/// E_i = L_i - v_alpha(X_i): positive when the model underestimates.
std::vector<double> conformity_scores(const QuantileModel& base, const Matrix& calib_x,
                                      std::span<const double> calib_loss, double alpha,
                                      unsigned threads = 1);

/// Plain: the ceil(alpha*m)-th smallest score. FiniteSample: the
/// ceil(alpha*(m+1))-th smallest, which gives marginal coverage >= alpha under
/// exchangeability; throws CalibrationError if that rank exceeds m.
enum class CorrectionMode { Plain, FiniteSample };

std::string_view to_string(CorrectionMode mode);
CorrectionMode correction_mode_from_string(std::string_view name);

double calibrated_offset(std::span<const double> scores, double alpha, CorrectionMode mode);

/// Smallest calibration-set size whose finite-sample rank is valid at alpha.
std::size_t min_calibration_size(double alpha);

struct Calibration {
  double alpha = 0.0;
  CorrectionMode mode = CorrectionMode::FiniteSample;
  double offset = 0.0;
  std::vector<double> scores;

  bool operator==(const Calibration&) const = default;
};

/// Base quantile model shifted by a calibrated constant.
class ConformalModel {
 public:
  ConformalModel(std::shared_ptr<const QuantileModel> base, Calibration calibration);

  /// Scores the calibration set at `alpha` and computes the offset.
  static ConformalModel calibrate(std::shared_ptr<const QuantileModel> base,
                                  const Matrix& calib_x, std::span<const double> calib_loss,
                                  double alpha, CorrectionMode mode, unsigned threads = 1);

  double predict(std::span<const double> x) const;
  double base_predict(std::span<const double> x) const;

  const QuantileModel& base() const { return *base_; }
  const Calibration& calibration() const { return calibration_; }
  double offset() const { return calibration_.offset; }
  double alpha() const { return calibration_.alpha; }

 private:
  std::shared_ptr<const QuantileModel> base_;
  Calibration calibration_;
};

double conformal_predict(const ConformalModel& model, std::span<const double> x);

}  // namespace rtvar
