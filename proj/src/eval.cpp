#include "rtvar/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <tuple>

#include "rtvar/errors.hpp"
#include "rtvar/io.hpp"
#include "rtvar/parallel.hpp"
#include "rtvar/random.hpp"
#include "rtvar/stats.hpp"

namespace rtvar {

double pinball(double a, double alpha) { return a > 0.0 ? alpha * a : (alpha - 1.0) * a; }

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) +
                         "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                         "x" + std::to_string(b.cols()) + ")");
  }
  if (a.rows() == 0 || a.cols() == 0) throw DimensionError(std::string(what) + ": empty input");
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

double mrise(const Matrix& true_vals, const Matrix& est_vals) {
  check_same_shape(true_vals, est_vals, "mrise");
  CompensatedSum total;
  for (std::size_t i = 0; i < true_vals.rows(); ++i) {
    CompensatedSum sq;
    for (std::size_t j = 0; j < true_vals.cols(); ++j) {
      const double e = true_vals(i, j) - est_vals(i, j);
      sq.add(e * e);
    }
    total.add(std::sqrt(sq.value() / static_cast<double>(true_vals.cols())));
  }
  return total.value() / static_cast<double>(true_vals.rows());
}

double mpl(const Matrix& true_vals, const Matrix& est_vals, double alpha) {
  check_same_shape(true_vals, est_vals, "mpl");
  CompensatedSum total;
  for (std::size_t i = 0; i < true_vals.rows(); ++i) {
    for (std::size_t j = 0; j < true_vals.cols(); ++j) {
      total.add(pinball(true_vals(i, j) - est_vals(i, j), alpha));
    }
  }
  return total.value() / static_cast<double>(true_vals.rows() * true_vals.cols());
}

double coverage_rate(std::span<const double> estimates, const Matrix& loss_samples) {
  if (estimates.size() != loss_samples.rows() || estimates.empty() || loss_samples.cols() == 0) {
    throw DimensionError("coverage_rate: " + std::to_string(estimates.size()) +
                         " estimates for " + std::to_string(loss_samples.rows()) + " points");
  }
  CompensatedSum total;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const auto row = loss_samples.row(i);
    const auto hits = std::count_if(row.begin(), row.end(),
                                    [&](double y) { return y <= estimates[i]; });
    total.add(static_cast<double>(hits) / static_cast<double>(row.size()));
  }
  return total.value() / static_cast<double>(estimates.size());
}

double coverage_rate_sorted(std::span<const double> estimates, const Matrix& sorted_samples) {
  if (estimates.size() != sorted_samples.rows() || estimates.empty() ||
      sorted_samples.cols() == 0) {
    throw DimensionError("coverage_rate: " + std::to_string(estimates.size()) +
                         " estimates for " + std::to_string(sorted_samples.rows()) + " points");
  }
  CompensatedSum total;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const auto row = sorted_samples.row(i);
    const auto hits = std::upper_bound(row.begin(), row.end(), estimates[i]) - row.begin();
    total.add(static_cast<double>(hits) / static_cast<double>(row.size()));
  }
  return total.value() / static_cast<double>(estimates.size());
}

double coverage_tolerance(double alpha, std::size_t n_points, std::size_t n_cov_samples) {
  return 3.0 * std::sqrt(alpha * (1.0 - alpha) /
                         static_cast<double>(n_points * n_cov_samples));
}

EvalGrid EvalGrid::paper() { return EvalGrid{}; }

EvalGrid EvalGrid::desk() {
  EvalGrid g;
  g.n_points = 100;
  g.n_reps = 5;
  g.n_cov_samples = 2000;
  g.offline_sizes = {1000, 4000, 16000};
  return g;
}

void EvalGrid::validate() const {
  if (n_points < 1) throw ConfigError("n_points", "must be >= 1");
  if (n_reps < 1) throw ConfigError("n_reps", "must be >= 1");
  if (n_cov_samples < 1) throw ConfigError("n_cov_samples", "must be >= 1");
  if (n_oracle < 1) throw ConfigError("n_oracle", "must be >= 1");
  if (loss_mode == LossMode::Nested && m_inner < 1) throw ConfigError("m_inner", "must be >= 1");
  if (alphas.empty()) throw ConfigError("alphas", "must not be empty");
  for (double a : alphas) {
    if (!(a > 0.0 && a < 1.0)) throw ConfigError("alphas", "levels must lie in (0, 1)");
  }
  if (offline_sizes.empty()) throw ConfigError("offline_sizes", "must not be empty");
  for (auto n : offline_sizes) {
    if (n < 2) throw ConfigError("offline_sizes", "sizes must be >= 2");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction", "must lie in (0, 1)");
  }
}

std::string_view to_string(Method m) { return m == Method::Qrf ? "qrf" : "conformal_qrf"; }

Method method_from_string(std::string_view name) {
  if (name == "qrf") return Method::Qrf;
  if (name == "conformal_qrf") return Method::ConformalQrf;
  throw FormatError("unknown method '" + std::string(name) + "'");
}

namespace {

struct Evaluation {
  Matrix x;              // n' x d covariates
  Matrix truth;          // n' x |alphas| ground-truth VaR
  Matrix sorted_losses;  // n' x M conditional losses, rows sorted
};

Evaluation prepare_evaluation(const Market& market, const EvalGrid& grid, std::uint64_t seed,
                              std::size_t rep, unsigned threads) {
  Evaluation ev;
  ev.x = sample_risk_factors(market, grid.n_points,
                             derive_seed(seed, static_cast<std::uint64_t>(StreamTag::Evaluation), rep));
  ev.truth = Matrix(grid.n_points, grid.alphas.size());
  ev.sorted_losses = Matrix(grid.n_points, grid.n_cov_samples);
  parallel_for(grid.n_points, threads, [&](std::size_t j) {
    const auto x = ev.x.row(j);
    const auto truth = ground_truth_var(
        x, grid.alphas, market, grid.n_oracle,
        derive_seed(seed, static_cast<std::uint64_t>(StreamTag::Oracle), rep, j));
    std::copy(truth.begin(), truth.end(), ev.truth.row(j).begin());
    auto losses = conditional_losses(
        x, market, grid.n_cov_samples, LossMode::ClosedForm,
        derive_seed(seed, static_cast<std::uint64_t>(StreamTag::Coverage), rep, j));
    std::sort(losses.begin(), losses.end());
    std::copy(losses.begin(), losses.end(), ev.sorted_losses.row(j).begin());
  });
  return ev;
}

/// Per-alpha metrics for one method on one replication.
void score_method(Method method, const Evaluation& ev, const Matrix& estimates,
                  const EvalGrid& grid, std::size_t n_offline, std::size_t rep,
                  double fit_seconds, double predict_micros, std::uint64_t data_seed,
                  std::vector<MetricRecord>& out) {
  const std::size_t np = grid.n_points;
  for (std::size_t a = 0; a < grid.alphas.size(); ++a) {
    Matrix truth(1, np);
    Matrix est(1, np);
    std::vector<double> est_col(np);
    for (std::size_t j = 0; j < np; ++j) {
      truth(0, j) = ev.truth(j, a);
      est(0, j) = estimates(j, a);
      est_col[j] = estimates(j, a);
    }
    MetricRecord r;
    r.method = method;
    r.alpha = grid.alphas[a];
    r.n_offline = n_offline;
    r.rep = rep;
    r.mrise = rtvar::mrise(truth, est);
    r.mpl = rtvar::mpl(truth, est, grid.alphas[a]);
    r.mcr = coverage_rate_sorted(est_col, ev.sorted_losses);
    r.fit_seconds = fit_seconds;
    r.predict_micros_per_point = predict_micros;
    r.seed = data_seed;
    out.push_back(r);
  }
}

}  // namespace

std::vector<MetricRecord> run_experiment(const Market& market, const ForestConfig& forest,
                                         const EvalGrid& grid, std::uint64_t seed,
                                         const ExperimentOptions& options) {
  grid.validate();
  forest.resolved(market.dim());
  const unsigned threads = std::max(1u, options.threads);
  const auto say = [&](const std::string& msg) {
    if (options.progress) options.progress(msg);
  };

  std::vector<MetricRecord> all;
  for (std::size_t rep = 0; rep < grid.n_reps; ++rep) {
    const bool pending = std::any_of(
        grid.offline_sizes.begin(), grid.offline_sizes.end(),
        [&](std::size_t n) { return !options.completed.contains({rep, n}); });
    if (!pending) continue;

    say("rep " + std::to_string(rep) + ": ground truth and coverage samples");
    const Evaluation ev = prepare_evaluation(market, grid, seed, rep, threads);

    for (const std::size_t n : grid.offline_sizes) {
      if (options.completed.contains({rep, n})) continue;
      say("rep " + std::to_string(rep) + ", n=" + std::to_string(n));
      std::vector<MetricRecord> unit;

      const std::uint64_t data_seed =
          derive_seed(seed, static_cast<std::uint64_t>(StreamTag::Outer), rep, n);
      const OfflineDataset data = generate_offline_dataset(market, n, grid.m_inner,
                                                           grid.loss_mode, data_seed, threads);
      const std::uint64_t forest_seed =
          derive_seed(seed, static_cast<std::uint64_t>(StreamTag::Forest), rep, n);

      // QRF on the full dataset.
      {
        ForestConfig fc = forest;
        fc.seed = derive_seed(forest_seed, 0);
        const auto start = Clock::now();
        const Forest qrf = Forest::fit(data, fc, threads);
        const double fit_s = seconds_since(start);

        Matrix est(grid.n_points, grid.alphas.size());
        const auto predict_start = Clock::now();
        parallel_for(grid.n_points, threads, [&](std::size_t j) {
          const auto q = qrf.predict_quantiles(ev.x.row(j), grid.alphas);
          std::copy(q.begin(), q.end(), est.row(j).begin());
        });
        const double micros =
            1e6 * seconds_since(predict_start) / static_cast<double>(grid.n_points);
        score_method(Method::Qrf, ev, est, grid, n, rep, fit_s, micros, data_seed, unit);
      }

      // Conformal QRF: fit on the train split, one calibration per alpha.
      {
        ForestConfig fc = forest;
        fc.seed = derive_seed(forest_seed, 1);
        const auto start = Clock::now();
        const SplitPlan plan = split_dataset(
            n, grid.train_fraction,
            derive_seed(seed, static_cast<std::uint64_t>(StreamTag::Split), rep, n));
        const OfflineDataset train = select_rows(data, plan.train_indices);
        const OfflineDataset calib = select_rows(data, plan.calib_indices);
        const auto base = std::make_shared<const Forest>(Forest::fit(train, fc, threads));

        Matrix calib_pred(calib.size(), grid.alphas.size());
        parallel_for(calib.size(), threads, [&](std::size_t i) {
          const auto q = base->predict_quantiles(calib.x.row(i), grid.alphas);
          std::copy(q.begin(), q.end(), calib_pred.row(i).begin());
        });
        std::vector<double> offsets(grid.alphas.size());
        for (std::size_t a = 0; a < grid.alphas.size(); ++a) {
          std::vector<double> scores(calib.size());
          for (std::size_t i = 0; i < calib.size(); ++i) {
            scores[i] = calib.loss[i] - calib_pred(i, a);
          }
          offsets[a] = calibrated_offset(scores, grid.alphas[a], grid.correction);
        }
        const double fit_s = seconds_since(start);

        Matrix est(grid.n_points, grid.alphas.size());
        const auto predict_start = Clock::now();
        parallel_for(grid.n_points, threads, [&](std::size_t j) {
          const auto q = base->predict_quantiles(ev.x.row(j), grid.alphas);
          for (std::size_t a = 0; a < q.size(); ++a) est(j, a) = q[a] + offsets[a];
        });
        const double micros =
            1e6 * seconds_since(predict_start) / static_cast<double>(grid.n_points);
        score_method(Method::ConformalQrf, ev, est, grid, n, rep, fit_s, micros, data_seed,
                     unit);
      }

      sort_records(unit);
      if (options.on_unit) options.on_unit(unit);
      all.insert(all.end(), unit.begin(), unit.end());
    }
  }
  sort_records(all);
  return all;
}

void sort_records(std::vector<MetricRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const MetricRecord& a, const MetricRecord& b) {
    return std::tie(a.rep, a.n_offline, a.alpha, a.method) <
           std::tie(b.rep, b.n_offline, b.alpha, b.method);
  });
}

std::vector<AggregateRecord> aggregate(std::span<const MetricRecord> records) {
  struct Acc {
    std::size_t count = 0;
    CompensatedSum mrise, mpl, mcr, fit, predict;
  };
  std::map<std::tuple<Method, double, std::size_t>, Acc> groups;
  for (const auto& r : records) {
    Acc& acc = groups[{r.method, r.alpha, r.n_offline}];
    ++acc.count;
    acc.mrise.add(r.mrise);
    acc.mpl.add(r.mpl);
    acc.mcr.add(r.mcr);
    acc.fit.add(r.fit_seconds);
    acc.predict.add(r.predict_micros_per_point);
  }
  std::vector<AggregateRecord> out;
  for (const auto& [key, acc] : groups) {
    const double c = static_cast<double>(acc.count);
    out.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), acc.count,
                   acc.mrise.value() / c, acc.mpl.value() / c, acc.mcr.value() / c,
                   acc.fit.value() / c, acc.predict.value() / c});
  }
  return out;
}

std::string format_record(const MetricRecord& r, bool include_timings) {
  std::string s;
  s += to_string(r.method);
  s += ',' + format_double(r.alpha);
  s += ',' + std::to_string(r.n_offline);
  s += ',' + std::to_string(r.rep);
  s += ',' + format_double(r.mrise);
  s += ',' + format_double(r.mpl);
  s += ',' + format_double(r.mcr);
  s += ',' + format_double(include_timings ? r.fit_seconds : 0.0);
  s += ',' + format_double(include_timings ? r.predict_micros_per_point : 0.0);
  s += ',' + std::to_string(r.seed);
  return s;
}

std::string records_to_csv(std::span<const MetricRecord> records, bool include_timings) {
  std::string out(kRecordHeader);
  out += '\n';
  for (const auto& r : records) {
    out += format_record(r, include_timings);
    out += '\n';
  }
  return out;
}

std::string aggregate_to_csv(std::span<const AggregateRecord> rows, bool include_timings) {
  std::string out(kAggregateHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += to_string(r.method);
    out += ',' + format_double(r.alpha);
    out += ',' + std::to_string(r.n_offline);
    out += ',' + std::to_string(r.n_reps);
    out += ',' + format_double(r.mrise);
    out += ',' + format_double(r.mpl);
    out += ',' + format_double(r.mcr);
    out += ',' + format_double(include_timings ? r.fit_seconds : 0.0);
    out += ',' + format_double(include_timings ? r.predict_micros_per_point : 0.0);
    out += '\n';
  }
  return out;
}

namespace {

template <typename T>
T parse_field(std::string_view field, std::size_t line_no) {
  T v{};
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
    throw FormatError("results line " + std::to_string(line_no) + ": bad field '" +
                      std::string(field) + "'");
  }
  return v;
}

}  // namespace

std::vector<MetricRecord> records_from_csv(std::string_view text) {
  std::vector<MetricRecord> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto eol = text.find('\n');
    const std::string_view line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    ++line_no;
    if (line_no == 1) {
      if (line != kRecordHeader) throw FormatError("results header does not match schema");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::size_t pos = 0;
    while (true) {
      const auto comma = line.find(',', pos);
      f.push_back(line.substr(pos, comma == std::string_view::npos ? line.npos : comma - pos));
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
    if (f.size() != 10) {
      throw FormatError("results line " + std::to_string(line_no) + ": expected 10 fields");
    }
    MetricRecord r;
    r.method = method_from_string(f[0]);
    r.alpha = parse_field<double>(f[1], line_no);
    r.n_offline = parse_field<std::size_t>(f[2], line_no);
    r.rep = parse_field<std::size_t>(f[3], line_no);
    r.mrise = parse_field<double>(f[4], line_no);
    r.mpl = parse_field<double>(f[5], line_no);
    r.mcr = parse_field<double>(f[6], line_no);
    r.fit_seconds = parse_field<double>(f[7], line_no);
    r.predict_micros_per_point = parse_field<double>(f[8], line_no);
    r.seed = parse_field<std::uint64_t>(f[9], line_no);
    out.push_back(r);
  }
  return out;
}

}  // namespace rtvar
