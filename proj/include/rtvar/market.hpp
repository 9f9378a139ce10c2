#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rtvar/matrix.hpp"
#include "rtvar/random.hpp"

namespace rtvar {

/// Market and portfolio parameters. Asset k carries one European call per
/// entry of strikes[k]; all options share the maturity.
struct MarketConfig {
  std::size_t d = 0;
  std::vector<double> s0;
  std::vector<double> mu;     // real-world drift on [0, tau]
  double r = 0.0;             // risk-free rate, drift on (tau, maturity]
  std::vector<double> sigma;
  Matrix rho;
  std::vector<std::vector<double>> strikes;
  double u = 0.0;             // monitoring time
  double tau = 0.0;           // risk horizon
  double maturity = 0.0;      // T

  /// d=4, S(0)=100, mu=0.08, r=0.05, sigma=0.15, rho=0.3, strikes 90..110,
  /// T=1/12, tau=1/52, u=1/252.
  static MarketConfig paper();

  /// Throws ConfigError naming the first invalid field. Positive-definiteness
  /// of rho is checked by build_covariance_factor.
  void validate() const;
};

/// Lower-triangular A with A A^T = Sigma, Sigma_ij = sigma_i sigma_j rho_ij.
struct CovarianceFactor {
  Matrix lower;
};

/// Computed as diag(sigma) * chol(rho), so rho must be positive definite while
/// Sigma itself may be singular when some sigma_i = 0.
CovarianceFactor build_covariance_factor(const MarketConfig& config);

/// Cholesky factor of a symmetric positive-definite matrix. Throws
/// FactorizationError naming the first non-positive leading minor.
Matrix cholesky(const Matrix& spd);

double normal_cdf(double x);

/// Black-Scholes European call. t = 0 (or sigma = 0) gives the deterministic
/// limit max(s - k e^{-rt}, 0). Negative inputs throw std::domain_error.
double bs_call(double s, double k, double r, double sigma, double t);

enum class LossMode { Nested, ClosedForm };

struct HorizonSample {
  std::vector<double> x_u;    // S(u)
  std::vector<double> s_tau;  // S(tau)
};

struct NestedEstimate {
  double loss = 0.0;
  double std_error = 0.0;  // standard error of the inner-sample mean
};

struct OfflineDataset {
  Matrix x;                 // n x d risk factors at u
  std::vector<double> loss; // n losses at tau
  std::uint64_t seed = 0;

  std::size_t size() const { return loss.size(); }
  std::size_t dim() const { return x.cols(); }
};

/// Validated configuration plus everything derived from it that the samplers
/// need repeatedly (covariance factor, V(0), discount factors).
class Market {
 public:
  explicit Market(MarketConfig config);

  const MarketConfig& config() const { return config_; }
  const CovarianceFactor& factor() const { return factor_; }
  std::size_t dim() const { return config_.d; }
  double value_0() const { return value_0_; }

  /// Time-tau portfolio value given S(tau), from Black-Scholes.
  double value_at_horizon(std::span<const double> s_tau) const;

  /// Correlated standard normal increments: out = A z for fresh z.
  void correlated_normals(RngStream& rng, std::span<double> z_scratch,
                          std::span<double> out) const;

  /// Exact log-normal step of length dt with drift `drift[k]` per asset.
  void advance(std::span<const double> from, std::span<const double> drift, double dt,
               RngStream& rng, std::span<double> z_scratch, std::span<double> to) const;

  /// Advance S(u) to S(tau) under the real-world drift.
  void bridge_to_horizon(std::span<const double> x_u, RngStream& rng,
                         std::span<double> s_tau) const;

 private:
  MarketConfig config_;
  CovarianceFactor factor_;
  double value_0_ = 0.0;
  std::vector<double> risk_free_drift_;
};

double portfolio_value_0(const MarketConfig& config);

/// Joint exact draw of S(u) and S(tau) on one path with drift mu.
HorizonSample simulate_to_horizon(const Market& market, RngStream& rng);

NestedEstimate loss_nested_estimate(std::span<const double> s_tau, const Market& market,
                                    std::size_t m_inner, RngStream& rng);

/// L = V(0) - V_hat(tau), V_hat averaged over m_inner independent risk-neutral
/// inner paths from tau to maturity.
double loss_nested(std::span<const double> s_tau, const Market& market, std::size_t m_inner,
                   RngStream& rng);

/// Exact L = V(0) - V(tau) from Black-Scholes prices at tau.
double loss_closed_form(std::span<const double> s_tau, const Market& market);

/// n independent (S(u), L(tau)) pairs. Outer path i draws from stream
/// (seed, Outer, i) and its inner paths from (seed, Inner, i), so results are
/// independent of `threads` and outer draws do not depend on m_inner.
OfflineDataset generate_offline_dataset(const Market& market, std::size_t n,
                                        std::size_t m_inner, LossMode mode,
                                        std::uint64_t seed, unsigned threads = 1);

/// `count` independent draws of S(u), one row each.
Matrix sample_risk_factors(const Market& market, std::size_t count, std::uint64_t seed);

/// M losses at tau conditional on S(u) = x_u.
std::vector<double> conditional_losses(std::span<const double> x_u, const Market& market,
                                       std::size_t count, LossMode mode, std::uint64_t seed,
                                       std::size_t m_inner = 500);

/// Empirical alpha-quantile (order statistic ceil(alpha*N)) of N closed-form
/// conditional losses. The multi-level overload shares one sample.
double ground_truth_var(std::span<const double> x_u, double alpha, const Market& market,
                        std::size_t n_oracle, std::uint64_t seed);
std::vector<double> ground_truth_var(std::span<const double> x_u,
                                     std::span<const double> alphas, const Market& market,
                                     std::size_t n_oracle, std::uint64_t seed);

}  // namespace rtvar
