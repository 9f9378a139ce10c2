#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rtvar/conformal.hpp"
#include "rtvar/forest.hpp"
#include "rtvar/market.hpp"
#include "rtvar/matrix.hpp"

namespace rtvar {

// ---- metrics -------------------------------------------------------------------

/// Pinball loss: alpha*a for a > 0, (alpha - 1)*a otherwise.
double pinball(double a, double alpha);

/// Mean over replications (rows) of the per-replication RMSE over points (columns).
double mrise(const Matrix& true_vals, const Matrix& est_vals);

/// Mean of pinball(true - est, alpha) over all entries.
double mpl(const Matrix& true_vals, const Matrix& est_vals, double alpha);

/// Mean over points i of the share of loss_samples(i, .) that are <= estimates[i].
double coverage_rate(std::span<const double> estimates, const Matrix& loss_samples);

/// Same, where each row of `sorted_samples` is sorted ascending.
double coverage_rate_sorted(std::span<const double> estimates, const Matrix& sorted_samples);

// ---- experiment ------------------------------------------------------------------

struct EvalGrid {
  std::size_t n_points = 1000;        // n'
  std::size_t n_reps = 40;            // m'
  std::size_t n_cov_samples = 25000;  // M
  std::vector<double> alphas{0.90, 0.95, 0.99, 0.995};
  std::vector<std::size_t> offline_sizes{1000, 2000, 4000, 8000, 16000};
  std::size_t n_oracle = 200000;
  std::size_t m_inner = 500;
  LossMode loss_mode = LossMode::Nested;
  double train_fraction = 0.7;
  CorrectionMode correction = CorrectionMode::FiniteSample;

  static EvalGrid paper();
  /// n'=100, m'=5, M=2000.
  static EvalGrid desk();
  void validate() const;
};

enum class Method { Qrf, ConformalQrf };
std::string_view to_string(Method m);
Method method_from_string(std::string_view name);

struct MetricRecord {
  Method method = Method::Qrf;
  double alpha = 0.0;
  std::size_t n_offline = 0;
  std::size_t rep = 0;
  double mrise = 0.0;  // per-replication RMSE; averaging over reps gives MRISE
  double mpl = 0.0;
  double mcr = 0.0;
  double fit_seconds = 0.0;
  double predict_micros_per_point = 0.0;
  std::uint64_t seed = 0;  // seed of this replication's offline dataset
};

struct ExperimentOptions {
  unsigned threads = 1;
  /// (rep, n_offline) units already done; they are skipped.
  std::set<std::pair<std::size_t, std::size_t>> completed;
  /// Called with each finished unit's records, in run order.
  std::function<void(std::span<const MetricRecord>)> on_unit;
  std::function<void(std::string_view)> progress;
};

/// For each replication: fresh evaluation covariates with closed-form ground
/// truth and coverage samples (shared by every offline size and method); then
/// per offline size a new dataset, a QRF on all of it, and a conformal QRF
/// fitted on the train split and calibrated on the rest. One record per
/// (rep, size, alpha, method).
std::vector<MetricRecord> run_experiment(const Market& market, const ForestConfig& forest,
                                         const EvalGrid& grid, std::uint64_t seed,
                                         const ExperimentOptions& options = {});

/// Monte Carlo slack for an MCR estimate: 3 binomial standard errors over
/// n_points * n_cov_samples draws.
double coverage_tolerance(double alpha, std::size_t n_points, std::size_t n_cov_samples);

// ---- results CSV -------------------------------------------------------------------

inline constexpr std::string_view kRecordHeader =
    "method,alpha,n_offline,rep,mrise,mpl,mcr,fit_seconds,predict_micros_per_point,seed";
inline constexpr std::string_view kAggregateHeader =
    "method,alpha,n_offline,n_reps,mrise,mpl,mcr,fit_seconds,predict_micros_per_point";

struct AggregateRecord {
  Method method = Method::Qrf;
  double alpha = 0.0;
  std::size_t n_offline = 0;
  std::size_t n_reps = 0;
  double mrise = 0.0;
  double mpl = 0.0;
  double mcr = 0.0;
  double fit_seconds = 0.0;
  double predict_micros_per_point = 0.0;
};

/// Averages over replications, grouped by (method, alpha, n_offline) in
/// ascending order, using compensated sums.
std::vector<AggregateRecord> aggregate(std::span<const MetricRecord> records);

/// With include_timings = false the timing columns are written as 0 so the
/// file depends only on the seed.
std::string format_record(const MetricRecord& r, bool include_timings);
std::string records_to_csv(std::span<const MetricRecord> records, bool include_timings);
std::string aggregate_to_csv(std::span<const AggregateRecord> rows, bool include_timings);
std::vector<MetricRecord> records_from_csv(std::string_view text);

/// Canonical order: rep, n_offline, alpha, method.
void sort_records(std::vector<MetricRecord>& records);

}  // namespace rtvar
