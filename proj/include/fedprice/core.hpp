#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedprice {

// Errors ---------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input outside the mathematical domain of an operation (e.g. q_n <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class InfeasibleBudget : public Error {
 public:
  InfeasibleBudget(const std::string& what, double minimal_budget)
      : Error(what), minimal_budget_(minimal_budget) {}
  double minimal_budget() const noexcept { return minimal_budget_; }

 private:
  double minimal_budget_;
};

class SolverFailure : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  oss.precision(17);
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

using Rng = std::mt19937_64;

/// Independent generator keyed by a base seed and a tuple of stream tags, so
/// every (round, client) draw is reproducible in isolation.
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags = {}) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed),
                                   static_cast<std::uint32_t>(seed >> 32)};
  for (auto t : tags) {
    words.push_back(static_cast<std::uint32_t>(t));
    words.push_back(static_cast<std::uint32_t>(t >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

// Neumaier compensated summation. Terms are consumed in call order, so a
// fixed iteration order gives bit-identical results across runs.
class CompensatedSum {
 public:
  CompensatedSum& operator+=(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
    return *this;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// Domain types ---------------------------------------------------------------

struct ClientProfile {
  std::size_t index = 0;
  double datasize = 0.0;        // d_n, sample count
  double weight = 0.0;          // a_n = d_n / sum d
  double grad_bound = 0.0;      // G_n
  double cost_coeff = 0.0;      // c_n
  double intrinsic_pref = 0.0;  // v_n
  double q_max = 1.0;
  // F(w_n*) proxy from calibration; only enters the constant utility offset.
  std::optional<double> local_optimum_loss;

  /// a_n^2 G_n^2, the data-quality factor shared by every bound term.
  double quality() const noexcept {
    return weight * weight * grad_bound * grad_bound;
  }

  bool operator==(const ClientProfile&) const = default;
};

using Population = std::vector<ClientProfile>;

/// Constituents of the additive bound constant. Only used when beta is derived
/// instead of supplied.
struct BoundConstituents {
  double smoothness = 0.0;         // L
  double strong_convexity = 0.0;   // mu
  std::vector<double> sigma;       // per-client SGD variance bounds sigma_n
  double global_min = 0.0;         // F*
  std::vector<double> local_mins;  // F_n*
  double init_dist_sq = 0.0;       // ||w_0 - w*||^2

  bool operator==(const BoundConstituents&) const = default;
};

struct GameConstants {
  double alpha = 1.0;
  double beta = 0.0;
  double rounds = 1.0;       // R
  double local_steps = 1.0;  // E
  double q_floor = 0.01;
  std::optional<BoundConstituents> constituents;

  /// alpha / R, the coefficient every per-client term carries.
  double alpha_per_round() const noexcept { return alpha / rounds; }

  bool operator==(const GameConstants&) const = default;
};

struct ParticipationVector {
  std::vector<double> q;

  std::size_t size() const noexcept { return q.size(); }
  double operator[](std::size_t n) const { return q[n]; }
  double& operator[](std::size_t n) { return q[n]; }
  bool operator==(const ParticipationVector&) const = default;
};

struct PricingVector {
  std::vector<double> price;

  std::size_t size() const noexcept { return price.size(); }
  double operator[](std::size_t n) const { return price[n]; }
  double& operator[](std::size_t n) { return price[n]; }
  bool operator==(const PricingVector&) const = default;
};

struct SolveDiagnostics {
  std::string solver;
  int iterations = 0;
  bool budget_slack = false;  // all caps binding with spend < B
  double budget_residual = 0.0;

  bool operator==(const SolveDiagnostics&) const = default;
};

struct EquilibriumResult {
  ParticipationVector q_star;
  PricingVector p_star;
  double lambda_star = 0.0;
  double v_threshold = 0.0;
  double spend = 0.0;
  double bound_value = 0.0;
  std::vector<double> payment;  // P_n q_n
  std::vector<bool> interior;   // q_floor < q_n < q_max
  SolveDiagnostics diagnostics;

  std::size_t interior_count() const noexcept {
    std::size_t k = 0;
    for (bool b : interior) k += b ? 1 : 0;
    return k;
  }

  bool operator==(const EquilibriumResult&) const = default;
};

// Validation -----------------------------------------------------------------

inline void validate(const GameConstants& k) {
  if (!(k.alpha > 0.0))
    throw InvalidInput(detail::concat("alpha must be > 0, got ", k.alpha));
  if (!(k.beta >= 0.0))
    throw InvalidInput(detail::concat("beta must be >= 0, got ", k.beta));
  if (!(k.rounds >= 1.0))
    throw InvalidInput(detail::concat("R must be >= 1, got ", k.rounds));
  if (!(k.local_steps >= 1.0))
    throw InvalidInput(detail::concat("E must be >= 1, got ", k.local_steps));
  if (!(k.q_floor > 0.0 && k.q_floor < 1.0))
    throw InvalidInput(
        detail::concat("q_floor must lie in (0, 1), got ", k.q_floor));
}

inline void validate(const ClientProfile& p) {
  const auto fail = [&](const char* what, double value) {
    throw InvalidInput(
        detail::concat("client ", p.index, ": ", what, ", got ", value));
  };
  if (!(p.weight > 0.0 && p.weight <= 1.0)) fail("weight must lie in (0, 1]", p.weight);
  if (!(p.grad_bound > 0.0)) fail("G must be > 0", p.grad_bound);
  if (!(p.cost_coeff > 0.0)) fail("c must be > 0", p.cost_coeff);
  if (!(p.intrinsic_pref >= 0.0)) fail("v must be >= 0", p.intrinsic_pref);
  if (!(p.q_max > 0.0 && p.q_max <= 1.0)) fail("q_max must lie in (0, 1]", p.q_max);
}

inline void validate(const Population& pop, const GameConstants& k) {
  if (pop.empty()) throw InvalidInput("population is empty");
  validate(k);
  CompensatedSum total;
  for (const auto& p : pop) {
    validate(p);
    if (!(k.q_floor < p.q_max))
      throw InvalidInput(detail::concat("client ", p.index, ": q_floor ", k.q_floor,
                                        " must be below q_max ", p.q_max));
    total += p.weight;
  }
  if (std::abs(total.value() - 1.0) > 1e-9)
    throw InvalidInput(
        detail::concat("client weights sum to ", total.value(), ", expected 1"));
}

// Operations -----------------------------------------------------------------

/// Builds a population, normalizing datasizes into weights.
inline Population make_population(const std::vector<double>& datasizes,
                                  const std::vector<double>& grad_bounds,
                                  const std::vector<double>& cost_coeffs,
                                  const std::vector<double>& intrinsic_prefs,
                                  const std::vector<double>& q_maxes) {
  const std::size_t n = datasizes.size();
  if (n == 0) throw InvalidInput("population needs at least one client");
  if (grad_bounds.size() != n || cost_coeffs.size() != n ||
      intrinsic_prefs.size() != n || q_maxes.size() != n)
    throw InvalidInput(detail::concat(
        "mismatched list lengths: datasizes=", n, " grad_bounds=", grad_bounds.size(),
        " cost_coeffs=", cost_coeffs.size(), " intrinsic_prefs=", intrinsic_prefs.size(),
        " q_maxes=", q_maxes.size()));

  CompensatedSum total;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(datasizes[i] > 0.0) || !std::isfinite(datasizes[i]))
      throw InvalidInput(detail::concat("client ", i, ": datasize must be positive, got ",
                                        datasizes[i]));
    total += datasizes[i];
  }

  Population pop(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = pop[i];
    p.index = i;
    p.datasize = datasizes[i];
    p.weight = datasizes[i] / total.value();
    p.grad_bound = grad_bounds[i];
    p.cost_coeff = cost_coeffs[i];
    p.intrinsic_pref = intrinsic_prefs[i];
    p.q_max = q_maxes[i];
    validate(p);
  }
  return pop;
}

}  // namespace fedprice
