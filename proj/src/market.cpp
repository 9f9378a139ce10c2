#include "rtvar/market.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "rtvar/errors.hpp"
#include "rtvar/parallel.hpp"
#include "rtvar/stats.hpp"

namespace rtvar {

namespace {

void require_size(const std::vector<double>& v, std::size_t d, const char* field) {
  if (v.size() != d) {
    throw ConfigError(field, "expected " + std::to_string(d) + " entries, got " +
                                 std::to_string(v.size()));
  }
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

MarketConfig MarketConfig::paper() {
  MarketConfig c;
  c.d = 4;
  c.s0.assign(4, 100.0);
  c.mu.assign(4, 0.08);
  c.r = 0.05;
  c.sigma.assign(4, 0.15);
  c.rho = Matrix(4, 4, 0.3);
  for (std::size_t i = 0; i < 4; ++i) c.rho(i, i) = 1.0;
  c.strikes.assign(4, {90.0, 95.0, 100.0, 105.0, 110.0});
  c.maturity = 1.0 / 12.0;
  c.tau = 1.0 / 52.0;
  c.u = 1.0 / 252.0;
  return c;
}

void MarketConfig::validate() const {
  if (d < 1) throw ConfigError("d", "asset count must be >= 1");
  require_size(s0, d, "s0");
  require_size(mu, d, "mu");
  require_size(sigma, d, "sigma");
  for (std::size_t k = 0; k < d; ++k) {
    if (!(s0[k] > 0.0) || !finite(s0[k])) throw ConfigError("s0", "prices must be positive");
    if (!finite(mu[k])) throw ConfigError("mu", "drift must be finite");
    if (!(sigma[k] >= 0.0) || !finite(sigma[k])) {
      throw ConfigError("sigma", "volatility must be non-negative");
    }
  }
  if (!finite(r)) throw ConfigError("r", "rate must be finite");
  if (rho.rows() != d || rho.cols() != d) {
    throw ConfigError("rho", "correlation matrix must be " + std::to_string(d) + "x" +
                                 std::to_string(d));
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (rho(i, i) != 1.0) throw ConfigError("rho", "diagonal entries must be 1");
    for (std::size_t j = 0; j < i; ++j) {
      if (rho(i, j) != rho(j, i)) throw ConfigError("rho", "matrix must be symmetric");
      if (!(std::abs(rho(i, j)) <= 1.0)) {
        throw ConfigError("rho", "off-diagonal entries must lie in [-1, 1]");
      }
    }
  }
  if (strikes.size() != d) {
    throw ConfigError("strikes", "expected one strike list per asset");
  }
  for (const auto& list : strikes) {
    for (double k : list) {
      if (!(k > 0.0) || !finite(k)) throw ConfigError("strikes", "strikes must be positive");
    }
  }
  if (!(u > 0.0)) throw ConfigError("u", "monitoring time must be > 0");
  if (!(tau > u)) throw ConfigError("tau", "risk horizon must exceed u");
  if (!(maturity > tau) || !finite(maturity)) {
    throw ConfigError("T", "maturity must exceed tau");
  }
}

Matrix cholesky(const Matrix& spd) {
  const std::size_t n = spd.rows();
  if (spd.cols() != n) throw std::invalid_argument("cholesky: matrix must be square");
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = spd(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) {
      throw FactorizationError(
          j + 1, "matrix is not positive definite: leading minor of order " +
                     std::to_string(j + 1) + " is not positive");
    }
    l(j, j) = std::sqrt(diag);
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = spd(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / l(j, j);
    }
  }
  return l;
}

CovarianceFactor build_covariance_factor(const MarketConfig& config) {
  Matrix a = cholesky(config.rho);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) a(i, j) *= config.sigma[i];
  }
  return {std::move(a)};
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double bs_call(double s, double k, double r, double sigma, double t) {
  if (s < 0.0 || k < 0.0 || sigma < 0.0 || t < 0.0) {
    throw std::domain_error("bs_call: negative input");
  }
  const double discounted_strike = k * std::exp(-r * t);
  const double vol = sigma * std::sqrt(t);
  if (t == 0.0) return std::max(s - k, 0.0);
  if (vol == 0.0 || k == 0.0 || s == 0.0) return std::max(s - discounted_strike, 0.0);
  const double d1 = (std::log(s / k) + (r + 0.5 * sigma * sigma) * t) / vol;
  const double d2 = d1 - vol;
  return s * normal_cdf(d1) - discounted_strike * normal_cdf(d2);
}

double portfolio_value_0(const MarketConfig& config) {
  double v = 0.0;
  for (std::size_t k = 0; k < config.d; ++k) {
    for (double strike : config.strikes[k]) {
      v += bs_call(config.s0[k], strike, config.r, config.sigma[k], config.maturity);
    }
  }
  return v;
}

Market::Market(MarketConfig config) : config_(std::move(config)) {
  config_.validate();
  factor_ = build_covariance_factor(config_);
  value_0_ = portfolio_value_0(config_);
  risk_free_drift_.assign(config_.d, config_.r);
}

double Market::value_at_horizon(std::span<const double> s_tau) const {
  const double remaining = config_.maturity - config_.tau;
  double v = 0.0;
  for (std::size_t k = 0; k < config_.d; ++k) {
    for (double strike : config_.strikes[k]) {
      v += bs_call(s_tau[k], strike, config_.r, config_.sigma[k], remaining);
    }
  }
  return v;
}

void Market::correlated_normals(RngStream& rng, std::span<double> z_scratch,
                                std::span<double> out) const {
  const std::size_t d = config_.d;
  rng.fill_normal(z_scratch.first(d));
  const Matrix& a = factor_.lower;
  for (std::size_t i = 0; i < d; ++i) {
    double v = 0.0;
    for (std::size_t j = 0; j <= i; ++j) v += a(i, j) * z_scratch[j];
    out[i] = v;
  }
}

void Market::advance(std::span<const double> from, std::span<const double> drift, double dt,
                     RngStream& rng, std::span<double> z_scratch, std::span<double> to) const {
  const std::size_t d = config_.d;
  const double root_dt = std::sqrt(dt);
  // `to` doubles as the buffer for the correlated shocks.
  correlated_normals(rng, z_scratch, to);
  for (std::size_t k = 0; k < d; ++k) {
    const double s = config_.sigma[k];
    to[k] = from[k] * std::exp((drift[k] - 0.5 * s * s) * dt + root_dt * to[k]);
  }
}

void Market::bridge_to_horizon(std::span<const double> x_u, RngStream& rng,
                               std::span<double> s_tau) const {
  std::vector<double> z(config_.d);
  advance(x_u, config_.mu, config_.tau - config_.u, rng, z, s_tau);
}

HorizonSample simulate_to_horizon(const Market& market, RngStream& rng) {
  const auto& c = market.config();
  HorizonSample out{std::vector<double>(c.d), std::vector<double>(c.d)};
  std::vector<double> z(c.d);
  market.advance(c.s0, c.mu, c.u, rng, z, out.x_u);
  market.advance(out.x_u, c.mu, c.tau - c.u, rng, z, out.s_tau);
  return out;
}

NestedEstimate loss_nested_estimate(std::span<const double> s_tau, const Market& market,
                                    std::size_t m_inner, RngStream& rng) {
  if (m_inner < 1) throw std::invalid_argument("loss_nested: m_inner must be >= 1");
  const auto& c = market.config();
  const double remaining = c.maturity - c.tau;
  const double discount = std::exp(-c.r * remaining);
  std::vector<double> drift(c.d, c.r);
  std::vector<double> z(c.d);
  std::vector<double> s_t(c.d);

  CompensatedSum sum;
  CompensatedSum sum_sq;
  for (std::size_t m = 0; m < m_inner; ++m) {
    market.advance(s_tau, drift, remaining, rng, z, s_t);
    double payoff = 0.0;
    for (std::size_t k = 0; k < c.d; ++k) {
      for (double strike : c.strikes[k]) payoff += std::max(s_t[k] - strike, 0.0);
    }
    payoff *= discount;
    sum.add(payoff);
    sum_sq.add(payoff * payoff);
  }
  const double count = static_cast<double>(m_inner);
  const double mean = sum.value() / count;
  double std_error = 0.0;
  if (m_inner > 1) {
    const double var = std::max(0.0, (sum_sq.value() - count * mean * mean) / (count - 1.0));
    std_error = std::sqrt(var / count);
  }
  return {market.value_0() - mean, std_error};
}

double loss_nested(std::span<const double> s_tau, const Market& market, std::size_t m_inner,
                   RngStream& rng) {
  return loss_nested_estimate(s_tau, market, m_inner, rng).loss;
}

double loss_closed_form(std::span<const double> s_tau, const Market& market) {
  return market.value_0() - market.value_at_horizon(s_tau);
}

OfflineDataset generate_offline_dataset(const Market& market, std::size_t n,
                                        std::size_t m_inner, LossMode mode,
                                        std::uint64_t seed, unsigned threads) {
  if (n < 1) throw std::invalid_argument("generate_offline_dataset: n must be >= 1");
  if (mode == LossMode::Nested && m_inner < 1) {
    throw std::invalid_argument("generate_offline_dataset: m_inner must be >= 1");
  }
  const std::size_t d = market.dim();
  OfflineDataset data{Matrix(n, d), std::vector<double>(n), seed};
  parallel_for(n, threads, [&](std::size_t i) {
    RngStream outer(seed, StreamTag::Outer, i);
    const HorizonSample path = simulate_to_horizon(market, outer);
    std::copy(path.x_u.begin(), path.x_u.end(), data.x.row(i).begin());
    if (mode == LossMode::Nested) {
      RngStream inner(seed, StreamTag::Inner, i);
      data.loss[i] = loss_nested(path.s_tau, market, m_inner, inner);
    } else {
      data.loss[i] = loss_closed_form(path.s_tau, market);
    }
  });
  return data;
}

Matrix sample_risk_factors(const Market& market, std::size_t count, std::uint64_t seed) {
  const auto& c = market.config();
  Matrix x(count, c.d);
  RngStream rng(seed, StreamTag::Evaluation);
  std::vector<double> z(c.d);
  for (std::size_t i = 0; i < count; ++i) market.advance(c.s0, c.mu, c.u, rng, z, x.row(i));
  return x;
}

std::vector<double> conditional_losses(std::span<const double> x_u, const Market& market,
                                       std::size_t count, LossMode mode, std::uint64_t seed,
                                       std::size_t m_inner) {
  if (count < 1) throw std::invalid_argument("conditional_losses: count must be >= 1");
  if (x_u.size() != market.dim()) {
    throw DimensionError("conditional_losses: x has " + std::to_string(x_u.size()) +
                         " entries, market has " + std::to_string(market.dim()));
  }
  for (double v : x_u) {
    if (!(v > 0.0)) throw std::invalid_argument("conditional_losses: x must be positive");
  }
  std::vector<double> losses(count);
  std::vector<double> s_tau(market.dim());
  RngStream bridge(seed, StreamTag::Outer);
  for (std::size_t m = 0; m < count; ++m) {
    market.bridge_to_horizon(x_u, bridge, s_tau);
    if (mode == LossMode::Nested) {
      RngStream inner(seed, StreamTag::Inner, m);
      losses[m] = loss_nested(s_tau, market, m_inner, inner);
    } else {
      losses[m] = loss_closed_form(s_tau, market);
    }
  }
  return losses;
}

double ground_truth_var(std::span<const double> x_u, double alpha, const Market& market,
                        std::size_t n_oracle, std::uint64_t seed) {
  const double levels[] = {alpha};
  return ground_truth_var(x_u, levels, market, n_oracle, seed).front();
}

std::vector<double> ground_truth_var(std::span<const double> x_u,
                                     std::span<const double> alphas, const Market& market,
                                     std::size_t n_oracle, std::uint64_t seed) {
  for (double a : alphas) {
    if (!(a > 0.0 && a < 1.0)) throw std::invalid_argument("ground_truth_var: alpha not in (0,1)");
  }
  const auto losses = conditional_losses(x_u, market, n_oracle, LossMode::ClosedForm, seed);
  return empirical_quantiles(losses, alphas);
}

}  // namespace rtvar
