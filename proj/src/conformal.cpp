#include "rtvar/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "rtvar/errors.hpp"
#include "rtvar/parallel.hpp"
#include "rtvar/random.hpp"
#include "rtvar/stats.hpp"

namespace rtvar {

namespace {

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
}

}  // namespace

SplitPlan split_dataset(std::size_t n, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split_dataset: train_fraction must lie in (0, 1)");
  }
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n < 2 || n_train < 1 || n_train >= n) {
    throw std::invalid_argument("split_dataset: n=" + std::to_string(n) +
                                " is too small for two nonempty parts at train_fraction=" +
                                std::to_string(train_fraction));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  RngStream rng(seed, StreamTag::Split);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);

  SplitPlan plan;
  plan.train_fraction = train_fraction;
  plan.train_indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  plan.calib_indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(plan.train_indices.begin(), plan.train_indices.end());
  std::sort(plan.calib_indices.begin(), plan.calib_indices.end());
  return plan;
}

OfflineDataset select_rows(const OfflineDataset& data, std::span<const std::size_t> indices) {
  OfflineDataset out{Matrix(indices.size(), data.dim()), std::vector<double>(indices.size()),
                     data.seed};
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto src = data.x.row(indices[k]);
    std::copy(src.begin(), src.end(), out.x.row(k).begin());
    out.loss[k] = data.loss[indices[k]];
  }
  return out;
}

std::vector<double> conformity_scores(const QuantileModel& base, const Matrix& calib_x,
                                      std::span<const double> calib_loss, double alpha,
                                      unsigned threads) {
  check_alpha(alpha);
  if (calib_x.rows() != calib_loss.size()) {
    throw DimensionError("conformity_scores: " + std::to_string(calib_x.rows()) +
                         " rows but " + std::to_string(calib_loss.size()) + " losses");
  }
  std::vector<double> scores(calib_loss.size());
  parallel_for(scores.size(), threads, [&](std::size_t i) {
    scores[i] = calib_loss[i] - base.predict_quantile(calib_x.row(i), alpha);
  });
  return scores;
}

std::string_view to_string(CorrectionMode mode) {
  return mode == CorrectionMode::Plain ? "plain" : "finite_sample";
}

CorrectionMode correction_mode_from_string(std::string_view name) {
  if (name == "plain") return CorrectionMode::Plain;
  if (name == "finite_sample") return CorrectionMode::FiniteSample;
  throw std::invalid_argument("unknown correction mode '" + std::string(name) +
                              "' (expected plain or finite_sample)");
}

std::size_t min_calibration_size(double alpha) {
  check_alpha(alpha);
  std::size_t m = 1;
  while (order_statistic_rank(alpha, m + 1) > m) ++m;
  return m;
}

double calibrated_offset(std::span<const double> scores, double alpha, CorrectionMode mode) {
  check_alpha(alpha);
  if (scores.empty()) throw std::invalid_argument("calibrated_offset: no scores");
  const std::size_t m = scores.size();
  const std::size_t rank = mode == CorrectionMode::Plain ? order_statistic_rank(alpha, m)
                                                         : order_statistic_rank(alpha, m + 1);
  if (rank > m) {
    const std::size_t need = min_calibration_size(alpha);
    throw CalibrationError(
        need, "calibration set too small: alpha=" + std::to_string(alpha) + " needs rank " +
                  std::to_string(rank) + " of " + std::to_string(m) +
                  " scores; use at least " + std::to_string(need) + " calibration points");
  }
  std::vector<double> sorted(scores.begin(), scores.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank - 1),
                   sorted.end());
  return sorted[rank - 1];
}

ConformalModel::ConformalModel(std::shared_ptr<const QuantileModel> base,
                               Calibration calibration)
    : base_(std::move(base)), calibration_(std::move(calibration)) {
  if (!base_) throw std::invalid_argument("ConformalModel: null base model");
  check_alpha(calibration_.alpha);
}

ConformalModel ConformalModel::calibrate(std::shared_ptr<const QuantileModel> base,
                                         const Matrix& calib_x,
                                         std::span<const double> calib_loss, double alpha,
                                         CorrectionMode mode, unsigned threads) {
  if (!base) throw std::invalid_argument("ConformalModel: null base model");
  Calibration c;
  c.alpha = alpha;
  c.mode = mode;
  c.scores = conformity_scores(*base, calib_x, calib_loss, alpha, threads);
  c.offset = calibrated_offset(c.scores, alpha, mode);
  return ConformalModel(std::move(base), std::move(c));
}

double ConformalModel::base_predict(std::span<const double> x) const {
  return base_->predict_quantile(x, calibration_.alpha);
}

double ConformalModel::predict(std::span<const double> x) const {
  return base_predict(x) + calibration_.offset;
}

double conformal_predict(const ConformalModel& model, std::span<const double> x) {
  return model.predict(x);
}

}  // namespace rtvar
