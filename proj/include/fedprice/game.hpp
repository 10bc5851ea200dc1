#pragma once

// Two-stage client-participation pricing game, solved by backward induction.
//
// Stage II: client n picks q_n in [0, q_max] maximizing
//   P_n q_n - c_n q_n^2 - v_n (alpha/R) sum_m (1 - q_m) a_m^2 G_m^2 / q_m + offset.
// Stage I: the server picks prices to minimize the convergence-gap bound
// subject to sum_n P_n q_n <= B, written in q through the inverse best response.
//
// Throughout, K_n denotes (alpha/R) a_n^2 G_n^2.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fedprice/bound.hpp"
#include "fedprice/core.hpp"

namespace fedprice {

struct SolverOptions {
  double lambda_tol = 1e-10;  // relative width of the dual bracket
  double m_step = 1e-3;       // M-grid step as a fraction of [0, sum c q_max^2]
  int m_refinements = 1;      // extra linear passes around the best grid point
  int max_iterations = 500;
  double budget_tol = 1e-9;   // relative to max(1, B)
};

inline void validate(const SolverOptions& o) {
  if (!(o.lambda_tol > 0.0) || !(o.m_step > 0.0) || !(o.budget_tol > 0.0) || o.m_step > 1.0)
    throw InvalidInput("solver tolerances must be positive and m_step <= 1");
  if (o.max_iterations < 1) throw InvalidInput("max_iterations must be >= 1");
  if (o.m_refinements < 0) throw InvalidInput("m_refinements must be >= 0");
}

namespace detail {

inline double scaled_quality(const ClientProfile& p, const GameConstants& k) {
  return k.alpha_per_round() * p.quality();
}

inline double budget_slack_tol(const SolverOptions& o, double budget) {
  return o.budget_tol * std::max(1.0, std::abs(budget));
}

}  // namespace detail

// Stage II -------------------------------------------------------------------

/// Client n's utility at its own level q_n; entries m != n of q_others supply
/// the rest of the bound sum. value_offset carries v_n (F(w_n*) - F* - beta/R),
/// which does not depend on q.
inline double client_utility(double q_n, double price, const Population& pop, std::size_t n,
                             const GameConstants& k, const ParticipationVector& q_others,
                             double value_offset = 0.0) {
  detail::check_sizes(q_others, pop);
  const ClientProfile& p = pop.at(n);
  if (q_n < 0.0 || q_n > p.q_max)
    throw DomainError(detail::concat("client ", n, ": q=", q_n, " outside [0, ", p.q_max, "]"));
  double u = price * q_n - p.cost_coeff * q_n * q_n + value_offset;
  if (p.intrinsic_pref == 0.0) return u;
  if (q_n == 0.0) return -std::numeric_limits<double>::infinity();

  CompensatedSum penalty;
  for (std::size_t m = 0; m < pop.size(); ++m) {
    const double qm = (m == n) ? q_n : q_others[m];
    if (!(qm > 0.0))
      throw DomainError(detail::concat("client ", m, ": participation level must be > 0, got ", qm));
    penalty += (1.0 - qm) * pop[m].quality() / qm;
  }
  return u - p.intrinsic_pref * k.alpha_per_round() * penalty.value();
}

/// Unique maximizer of the concave client problem on [0, q_max]. The stationarity
/// residual P + v K / q^2 - 2 c q is strictly decreasing, so its root is bracketed
/// by bisection on [q_floor * 1e-3, q_max].
inline double client_best_response(double price, const ClientProfile& p, const GameConstants& k) {
  const double c = p.cost_coeff, v = p.intrinsic_pref;
  if (v == 0.0) return std::clamp(price / (2.0 * c), 0.0, p.q_max);

  const double kq = detail::scaled_quality(p, k);
  const auto residual = [&](double q) { return price + v * kq / (q * q) - 2.0 * c * q; };
  double lo = k.q_floor * 1e-3, hi = p.q_max;
  if (residual(hi) >= 0.0) return hi;
  if (residual(lo) <= 0.0) return lo;
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    if (residual(mid) > 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

/// The price under which q_n is the client's stationary point.
inline double inverse_price(double q, const ClientProfile& p, const GameConstants& k) {
  if (!(q >= k.q_floor))
    throw DomainError(detail::concat("client ", p.index, ": q=", q, " below q_floor ", k.q_floor));
  return 2.0 * p.cost_coeff * q - p.intrinsic_pref * detail::scaled_quality(p, k) / (q * q);
}

// Stage I --------------------------------------------------------------------

/// Participation that minimizes the per-client Lagrangian at multiplier lambda:
/// q^3 = alpha a^2 G^2 (1/lambda - v) / (4 R c), clipped to [q_floor, q_max].
/// When 1/lambda <= v no stationary point exists and the client sits at q_floor.
inline double kkt_participation(double lambda, const ClientProfile& p, const GameConstants& k) {
  if (!(lambda > 0.0)) throw DomainError(detail::concat("lambda must be > 0, got ", lambda));
  const double inv = 1.0 / lambda;
  if (inv <= p.intrinsic_pref) return k.q_floor;
  const double q =
      std::cbrt(detail::scaled_quality(p, k) * (inv - p.intrinsic_pref) / (4.0 * p.cost_coeff));
  return std::clamp(q, k.q_floor, p.q_max);
}

/// sum_n P_n(q_n) q_n = sum_n (2 c_n q_n^2 - v_n K_n / q_n).
inline double total_spend(const ParticipationVector& q, const Population& pop,
                          const GameConstants& k) {
  detail::check_sizes(q, pop);
  CompensatedSum s;
  for (std::size_t n = 0; n < q.size(); ++n) s += inverse_price(q[n], pop[n], k) * q[n];
  return s.value();
}

/// Equilibrium price of an interior client written directly in terms of lambda*.
inline double price_closed_form(double lambda_star, const ClientProfile& p,
                                const GameConstants& k) {
  if (!(lambda_star > 0.0))
    throw DomainError(detail::concat("lambda must be > 0, got ", lambda_star));
  const double v = p.intrinsic_pref;
  const double gap = 1.0 / lambda_star - v;
  if (!(gap > 0.0))
    throw DomainError(detail::concat("client ", p.index, ": 1/lambda=", 1.0 / lambda_star,
                                     " does not exceed v=", v, "; client is not interior"));
  const double scale =
      std::cbrt(2.0 * k.alpha * p.cost_coeff * p.cost_coeff * p.quality() / k.rounds);
  return scale * (std::cbrt(gap) - 2.0 * std::pow(std::pow(v, 1.5) / gap, 2.0 / 3.0));
}

/// Intrinsic-value level above which an interior client pays the server.
inline double payment_threshold(double lambda_star) {
  if (!(lambda_star > 0.0))
    throw DomainError(detail::concat("lambda must be > 0, got ", lambda_star));
  return 1.0 / (3.0 * lambda_star);
}

namespace detail {

inline ParticipationVector kkt_profile(double lambda, const Population& pop,
                                       const GameConstants& k) {
  ParticipationVector q{std::vector<double>(pop.size())};
  for (std::size_t n = 0; n < pop.size(); ++n) q[n] = kkt_participation(lambda, pop[n], k);
  return q;
}

inline ParticipationVector constant_profile(const Population& pop, double value) {
  return ParticipationVector{std::vector<double>(pop.size(), value)};
}

inline ParticipationVector cap_profile(const Population& pop) {
  ParticipationVector q{std::vector<double>(pop.size())};
  for (std::size_t n = 0; n < pop.size(); ++n) q[n] = pop[n].q_max;
  return q;
}

/// Multiplier at which client n's KKT participation reaches `level`.
inline double lambda_at_level(const ClientProfile& p, const GameConstants& k, double level) {
  return 1.0 / (p.intrinsic_pref +
                4.0 * p.cost_coeff * level * level * level / scaled_quality(p, k));
}

/// Largest multiplier at which every client still sits at its cap.
inline double saturation_lambda(const Population& pop, const GameConstants& k) {
  double lam = std::numeric_limits<double>::infinity();
  for (const auto& p : pop) lam = std::min(lam, lambda_at_level(p, k, p.q_max));
  return lam;
}

/// Smallest multiplier at which every client sits at the floor.
inline double floor_lambda(const Population& pop, const GameConstants& k) {
  double lam = 0.0;
  for (const auto& p : pop) lam = std::max(lam, lambda_at_level(p, k, k.q_floor));
  return lam;
}

inline EquilibriumResult assemble(ParticipationVector q, double lambda, const Population& pop,
                                  const GameConstants& k, double budget, SolveDiagnostics diag) {
  EquilibriumResult r;
  r.p_star.price.resize(q.size());
  r.payment.resize(q.size());
  r.interior.resize(q.size());
  for (std::size_t n = 0; n < q.size(); ++n) {
    r.p_star[n] = inverse_price(q[n], pop[n], k);
    r.payment[n] = r.p_star[n] * q[n];
    r.interior[n] = q[n] > k.q_floor && q[n] < pop[n].q_max;
  }
  r.spend = total_spend(q, pop, k);
  r.bound_value = convergence_gap_bound(q, pop, k);
  r.lambda_star = lambda;
  r.v_threshold = payment_threshold(lambda);
  diag.budget_residual = r.spend - budget;
  r.diagnostics = std::move(diag);
  r.q_star = std::move(q);
  return r;
}

inline void check_floor_feasible(const Population& pop, const GameConstants& k, double budget,
                                 const SolverOptions& opts) {
  const double floor_spend = total_spend(constant_profile(pop, k.q_floor), pop, k);
  if (floor_spend > budget + budget_slack_tol(opts, budget))
    throw InfeasibleBudget(concat("budget ", budget, " cannot fund the participation floor q=",
                                  k.q_floor, "; minimal feasible budget is ", floor_spend),
                           floor_spend);
}

}  // namespace detail

/// Stage-I equilibrium by bisection on the budget multiplier. Spend along the
/// KKT path is non-increasing in lambda, and the per-client Lagrangian is
/// minimized exactly at each lambda, so hitting spend = B yields the optimum
/// over the [q_floor, q_max] box.
inline EquilibriumResult server_solve(const Population& pop, const GameConstants& k, double budget,
                                      const SolverOptions& opts = {}) {
  validate(pop, k);
  validate(opts);
  if (!std::isfinite(budget)) throw InvalidInput("budget must be finite");
  detail::check_floor_feasible(pop, k, budget, opts);
  const double tol = detail::budget_slack_tol(opts, budget);

  SolveDiagnostics diag{"lambda-bisection", 0, false, 0.0};
  const double lam_cap = detail::saturation_lambda(pop, k);
  auto caps = detail::cap_profile(pop);
  if (total_spend(caps, pop, k) <= budget) {
    diag.budget_slack = true;
    return detail::assemble(std::move(caps), lam_cap, pop, k, budget, std::move(diag));
  }

  double lo = lam_cap, hi = detail::floor_lambda(pop, k);
  const auto spend_at = [&](double lam) { return total_spend(detail::kkt_profile(lam, pop, k), pop, k); };
  const double spend_lo = spend_at(lo), spend_hi = spend_at(hi);
  if (!(spend_lo > budget) || !(spend_hi <= budget + tol))
    throw SolverFailure(detail::concat("lambda bracket [", lo, ", ", hi, "] does not bracket B=",
                                       budget, ": spend(lo)=", spend_lo, " spend(hi)=", spend_hi));

  double best = hi, best_gap = std::abs(spend_hi - budget);
  for (; diag.iterations < opts.max_iterations; ++diag.iterations) {
    const double mid = std::sqrt(lo * hi);
    const double s = spend_at(mid);
    if (std::abs(s - budget) < best_gap && s <= budget + tol) {
      best = mid;
      best_gap = std::abs(s - budget);
    }
    if (s > budget)
      lo = mid;
    else
      hi = mid;
    const bool narrow = hi / lo - 1.0 <= opts.lambda_tol;
    if ((narrow && best_gap <= tol) || hi / lo - 1.0 <= 8.0 * std::numeric_limits<double>::epsilon())
      break;
  }
  if (best_gap > tol)
    throw SolverFailure(detail::concat("lambda bisection stalled at [", lo, ", ", hi,
                                       "] with budget residual ", best_gap));
  return detail::assemble(detail::kkt_profile(best, pop, k), best, pop, k, budget,
                          std::move(diag));
}

namespace detail {

/// Server objective without constants: (alpha/R) sum (1 - q) a^2 G^2 / q.
inline double server_objective(const ParticipationVector& q, const Population& pop,
                               const GameConstants& k) {
  return k.alpha_per_round() * participation_penalty(q, pop);
}

/// Fixed-M subproblem: minimize the server objective subject to
/// sum c q^2 = M and 2M - sum v K / q <= B on the box. Multipliers: nu for the
/// equality, rho for the budget. Per client the Lagrangian
///   K (1 - rho v) / q + nu c q^2
/// is minimized at q^3 = K (1 - rho v) / (2 nu c) when 1 - rho v > 0, else at
/// the floor. Returns nothing when M is infeasible.
class FixedMSubproblem {
 public:
  FixedMSubproblem(const Population& pop, const GameConstants& k, double budget, double tol)
      : pop_(pop), k_(k), budget_(budget), tol_(tol) {
    for (const auto& p : pop_)
      if (p.intrinsic_pref > 0.0) rho_max_ = std::min(rho_max_, 1.0 / p.intrinsic_pref);
  }

  std::optional<ParticipationVector> solve(double m) const {
    auto q = equality_profile(0.0, m);
    if (!q) return std::nullopt;
    if (budget_gap(*q, m) <= tol_) return q;
    if (!std::isfinite(rho_max_)) return std::nullopt;

    // Raising rho shifts mass off high-v clients, increasing sum v K / q.
    double lo = 0.0, hi = rho_max_;
    std::optional<ParticipationVector> best;
    for (int it = 0; it < 100 && hi - lo > 1e-15 * rho_max_; ++it) {
      const double mid = 0.5 * (lo + hi);
      auto qm = equality_profile(mid, m);
      if (!qm) {
        hi = mid;
        continue;
      }
      if (budget_gap(*qm, m) <= tol_) {
        best = std::move(qm);
        hi = mid;
      } else {
        lo = mid;
      }
    }
    return best;
  }

 private:
  double budget_gap(const ParticipationVector& q, double m) const {
    CompensatedSum s;
    for (std::size_t n = 0; n < q.size(); ++n)
      s += pop_[n].intrinsic_pref * scaled_quality(pop_[n], k_) / q[n];
    return 2.0 * m - s.value() - budget_;
  }

  double level(std::size_t n, double rho, double nu) const {
    const auto& p = pop_[n];
    const double drive = 1.0 - rho * p.intrinsic_pref;
    if (drive <= 0.0) return k_.q_floor;
    return std::clamp(std::cbrt(scaled_quality(p, k_) * drive / (2.0 * nu * p.cost_coeff)),
                      k_.q_floor, p.q_max);
  }

  double mass(const ParticipationVector& q) const {
    CompensatedSum s;
    for (std::size_t n = 0; n < q.size(); ++n) s += pop_[n].cost_coeff * q[n] * q[n];
    return s.value();
  }

  ParticipationVector profile(double rho, double nu) const {
    ParticipationVector q{std::vector<double>(pop_.size())};
    for (std::size_t n = 0; n < pop_.size(); ++n) q[n] = level(n, rho, nu);
    return q;
  }

  // Solves sum c q(nu)^2 = m for nu at fixed rho; nothing if m is out of reach.
  std::optional<ParticipationVector> equality_profile(double rho, double m) const {
    double nu_lo = std::numeric_limits<double>::infinity(), nu_hi = 0.0;
    bool any_active = false;
    for (const auto& p : pop_) {
      const double drive = 1.0 - rho * p.intrinsic_pref;
      if (drive <= 0.0) continue;
      any_active = true;
      const double kq = scaled_quality(p, k_) * drive / (2.0 * p.cost_coeff);
      nu_lo = std::min(nu_lo, kq / (p.q_max * p.q_max * p.q_max));
      nu_hi = std::max(nu_hi, kq / (k_.q_floor * k_.q_floor * k_.q_floor));
    }
    const double scale = std::max(1.0, m);
    if (!any_active) {
      auto q = constant_profile(pop_, k_.q_floor);
      if (std::abs(mass(q) - m) <= 1e-12 * scale) return q;
      return std::nullopt;
    }
    auto q_lo = profile(rho, nu_lo);
    auto q_hi = profile(rho, nu_hi);
    const double mass_max = mass(q_lo), mass_min = mass(q_hi);
    if (m > mass_max + 1e-12 * scale || m < mass_min - 1e-12 * scale) return std::nullopt;
    if (m >= mass_max) return q_lo;
    if (m <= mass_min) return q_hi;
    for (int it = 0; it < 200 && nu_hi / nu_lo - 1.0 > 1e-15; ++it) {
      const double mid = std::sqrt(nu_lo * nu_hi);
      if (mass(profile(rho, mid)) > m)
        nu_lo = mid;
      else
        nu_hi = mid;
    }
    return profile(rho, std::sqrt(nu_lo * nu_hi));
  }

  const Population& pop_;
  const GameConstants& k_;
  double budget_;
  double tol_;
  double rho_max_ = std::numeric_limits<double>::infinity();
};

}  // namespace detail

/// Cross-check solver: linear search over M = sum c q^2 with step
/// m_step * sum c q_max^2, each grid point solved as a fixed-M subproblem.
/// Each refinement pass repeats the search at the same relative step inside
/// the two cells around the incumbent.
inline EquilibriumResult server_solve_m_search(const Population& pop, const GameConstants& k,
                                               double budget, const SolverOptions& opts = {}) {
  validate(pop, k);
  validate(opts);
  if (!std::isfinite(budget)) throw InvalidInput("budget must be finite");
  detail::check_floor_feasible(pop, k, budget, opts);

  SolveDiagnostics diag{"m-search", 0, false, 0.0};
  auto caps = detail::cap_profile(pop);
  if (total_spend(caps, pop, k) <= budget) {
    diag.budget_slack = true;
    return detail::assemble(std::move(caps), detail::saturation_lambda(pop, k), pop, k, budget,
                            std::move(diag));
  }

  const detail::FixedMSubproblem sub(pop, k, budget, detail::budget_slack_tol(opts, budget));
  CompensatedSum m_top;
  for (const auto& p : pop) m_top += p.cost_coeff * p.q_max * p.q_max;

  std::optional<ParticipationVector> best;
  double best_obj = std::numeric_limits<double>::infinity(), best_m = 0.0;
  const auto scan = [&](double lo, double hi, double step) {
    const auto cells = static_cast<long>(std::ceil((hi - lo) / step - 1e-9));
    for (long i = 0; i <= cells; ++i) {
      const double m = std::min(hi, lo + static_cast<double>(i) * step);
      ++diag.iterations;
      auto q = sub.solve(m);
      if (!q) continue;
      const double obj = detail::server_objective(*q, pop, k);
      if (obj < best_obj) {
        best_obj = obj;
        best_m = m;
        best = std::move(q);
      }
    }
  };

  // The all-floor point is feasible by the check above, so the search always
  // has at least one candidate even when the feasible M range is narrower than a cell.
  CompensatedSum m_floor;
  for (const auto& p : pop) m_floor += p.cost_coeff * k.q_floor * k.q_floor;
  scan(m_floor.value(), m_floor.value(), 1.0);

  double step = opts.m_step * m_top.value();
  scan(0.0, m_top.value(), step);
  if (!best)
    throw SolverFailure(detail::concat("no feasible M over [0, ", m_top.value(), "]"));
  for (int pass = 0; pass < opts.m_refinements; ++pass) {
    const double lo = std::max(0.0, best_m - step), hi = std::min(m_top.value(), best_m + step);
    step = opts.m_step * (hi - lo);
    scan(lo, hi, step);
  }

  // Recover the budget multiplier from interior clients, where
  // 1/lambda = (4R/alpha) c q^3 / (a^2 G^2) + v holds.
  const auto& q = *best;
  CompensatedSum inv_sum;
  int interior = 0;
  for (std::size_t n = 0; n < q.size(); ++n) {
    if (q[n] > k.q_floor && q[n] < pop[n].q_max) {
      inv_sum += 4.0 * pop[n].cost_coeff * q[n] * q[n] * q[n] /
                     detail::scaled_quality(pop[n], k) +
                 pop[n].intrinsic_pref;
      ++interior;
    }
  }
  const double lambda = interior > 0 ? interior / inv_sum.value() : detail::saturation_lambda(pop, k);
  return detail::assemble(std::move(*best), lambda, pop, k, budget, std::move(diag));
}

// Baselines ------------------------------------------------------------------

/// Participation and spend of every client under fixed prices.
struct SchemeOutcome {
  std::string scheme;
  ParticipationVector q;
  PricingVector prices;
  std::vector<double> payment;
  double spend = 0.0;
  double bound_value = 0.0;  // +inf when some client never participates
  std::optional<double> lambda_star;
  std::optional<double> v_threshold;

  std::size_t negative_payment_count() const noexcept {
    std::size_t k = 0;
    for (double p : prices.price) k += p < 0.0 ? 1 : 0;
    return k;
  }

  bool operator==(const SchemeOutcome&) const = default;
};

inline SchemeOutcome respond_to_prices(std::string scheme, const PricingVector& prices,
                                       const Population& pop, const GameConstants& k) {
  if (prices.size() != pop.size())
    throw InvalidInput(detail::concat("price vector has ", prices.size(), " entries, population has ",
                                      pop.size()));
  SchemeOutcome out;
  out.scheme = std::move(scheme);
  out.prices = prices;
  out.q.q.resize(pop.size());
  out.payment.resize(pop.size());
  CompensatedSum spend;
  bool all_positive = true;
  for (std::size_t n = 0; n < pop.size(); ++n) {
    out.q[n] = client_best_response(prices[n], pop[n], k);
    out.payment[n] = prices[n] * out.q[n];
    spend += out.payment[n];
    all_positive = all_positive && out.q[n] > 0.0;
  }
  out.spend = spend.value();
  out.bound_value = all_positive ? convergence_gap_bound(out.q, pop, k)
                                 : std::numeric_limits<double>::infinity();
  return out;
}

inline SchemeOutcome to_outcome(const EquilibriumResult& r, std::string scheme = "optimal") {
  SchemeOutcome out;
  out.scheme = std::move(scheme);
  out.q = r.q_star;
  out.prices = r.p_star;
  out.payment = r.payment;
  out.spend = r.spend;
  out.bound_value = r.bound_value;
  out.lambda_star = r.lambda_star;
  out.v_threshold = r.v_threshold;
  return out;
}

struct UniformPricing {
  double price = 0.0;
  ParticipationVector q;
};

struct WeightedPricing {
  double scale = 0.0;  // price per unit of datasize
  PricingVector prices;
  ParticipationVector q;
};

namespace detail {

/// Nonnegative scale s with sum_n s w_n q_n(s w_n) = B. Spend is non-decreasing
/// in s because best responses are.
inline double exhaust_budget(const std::vector<double>& multipliers, const Population& pop,
                             const GameConstants& k, double budget, const SolverOptions& opts) {
  if (!(budget >= 0.0)) throw InvalidInput(concat("budget must be >= 0, got ", budget));
  if (budget == 0.0) return 0.0;
  const auto spend = [&](double s) {
    CompensatedSum total;
    for (std::size_t n = 0; n < pop.size(); ++n) {
      const double price = s * multipliers[n];
      total += price * client_best_response(price, pop[n], k);
    }
    return total.value();
  };
  const double tol = budget_slack_tol(opts, budget);
  double lo = 0.0, hi = 1.0;
  for (int it = 0; spend(hi) < budget; ++it) {
    lo = hi;
    hi *= 2.0;
    if (it > 2000)
      throw SolverFailure(concat("could not bracket budget ", budget, "; spend(", hi, ")=", spend(hi)));
  }
  for (int it = 0; it < opts.max_iterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double s = spend(mid);
    if (std::abs(s - budget) <= tol) return mid;
    if (s < budget)
      lo = mid;
    else
      hi = mid;
    if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) break;
  }
  const double s_lo = spend(lo), s_hi = spend(hi);
  const double pick = std::abs(s_lo - budget) <= std::abs(s_hi - budget) ? lo : hi;
  if (std::abs(spend(pick) - budget) > tol)
    throw SolverFailure(concat("price bisection stalled at [", lo, ", ", hi, "]: spend ", s_lo,
                               " .. ", s_hi, " vs budget ", budget));
  return pick;
}

}  // namespace detail

/// One price for every client, scaled until the budget is spent.
inline UniformPricing baseline_uniform(const Population& pop, const GameConstants& k,
                                       double budget, const SolverOptions& opts = {}) {
  validate(pop, k);
  validate(opts);
  const std::vector<double> ones(pop.size(), 1.0);
  UniformPricing out;
  out.price = detail::exhaust_budget(ones, pop, k, budget, opts);
  out.q.q.resize(pop.size());
  for (std::size_t n = 0; n < pop.size(); ++n)
    out.q[n] = client_best_response(out.price, pop[n], k);
  return out;
}

/// Prices proportional to datasize, scaled until the budget is spent.
inline WeightedPricing baseline_weighted(const Population& pop, const GameConstants& k,
                                         double budget, const SolverOptions& opts = {}) {
  validate(pop, k);
  validate(opts);
  double d_max = 0.0;
  for (const auto& p : pop) d_max = std::max(d_max, p.datasize);
  if (!(d_max > 0.0)) throw InvalidInput("weighted pricing needs positive datasizes");
  std::vector<double> rel(pop.size());
  for (std::size_t n = 0; n < pop.size(); ++n) rel[n] = pop[n].datasize / d_max;

  const double s = detail::exhaust_budget(rel, pop, k, budget, opts);
  WeightedPricing out;
  out.scale = s / d_max;
  out.prices.price.resize(pop.size());
  out.q.q.resize(pop.size());
  for (std::size_t n = 0; n < pop.size(); ++n) {
    out.prices[n] = s * rel[n];
    out.q[n] = client_best_response(out.prices[n], pop[n], k);
  }
  return out;
}

// Verification ---------------------------------------------------------------

struct EquilibriumReport {
  std::size_t interior_clients = 0;
  double kkt_residual = 0.0;  // (max - min) / |mean| of (4R/alpha) c q^3/(a^2 G^2) + v
  double budget_residual = 0.0;
  std::size_t threshold_checks = 0;
  std::size_t threshold_violations = 0;
  std::size_t ordering_checks = 0;
  std::size_t ordering_violations = 0;
  std::vector<std::size_t> negative_payers;

  bool consistent(double kkt_tol, double budget_tol) const {
    return kkt_residual <= kkt_tol && std::abs(budget_residual) <= budget_tol &&
           threshold_violations == 0 && ordering_violations == 0;
  }
};

/// (4R/alpha) c q^3 / (a^2 G^2) + v, equal to 1/lambda* for every interior client.
inline double interior_kkt_quantity(double q, const ClientProfile& p, const GameConstants& k) {
  return p.cost_coeff * q * q * q / (k.alpha_per_round() * p.quality() / 4.0) + p.intrinsic_pref;
}

inline EquilibriumReport verify_equilibrium(const EquilibriumResult& r, const Population& pop,
                                            const GameConstants& k, double budget) {
  EquilibriumReport rep;
  rep.budget_residual = r.spend - budget;
  const double vt = r.v_threshold;

  std::vector<std::size_t> inner;
  for (std::size_t n = 0; n < pop.size(); ++n) {
    if (r.p_star[n] < 0.0) rep.negative_payers.push_back(n);
    if (r.interior[n]) inner.push_back(n);
  }
  rep.interior_clients = inner.size();

  if (inner.size() >= 2) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    CompensatedSum mean;
    for (auto n : inner) {
      const double t = interior_kkt_quantity(r.q_star[n], pop[n], k);
      lo = std::min(lo, t);
      hi = std::max(hi, t);
      mean += t;
    }
    rep.kkt_residual = (hi - lo) / std::abs(mean.value() / static_cast<double>(inner.size()));
  }

  const auto strict = [&](double v) { return std::abs(v - vt) > 1e-12 * std::max(1.0, vt); };
  for (auto n : inner) {
    const double v = pop[n].intrinsic_pref, p = r.p_star[n];
    if (!strict(v)) continue;
    ++rep.threshold_checks;
    if ((v < vt && !(p > 0.0)) || (v > vt && !(p < 0.0))) ++rep.threshold_violations;
  }

  for (auto i : inner) {
    for (auto j : inner) {
      if (i == j) continue;
      const auto& a = pop[i];
      const auto& b = pop[j];
      const double si = a.cost_coeff * a.weight * a.grad_bound;
      const double sj = b.cost_coeff * b.weight * b.grad_bound;
      if (!(si > sj)) continue;
      const double vi = a.intrinsic_pref, vj = b.intrinsic_pref;
      const double pi = r.p_star[i], pj = r.p_star[j];
      if (vi < vj && vj < vt && strict(vj)) {
        ++rep.ordering_checks;
        if (!(pi > pj && pj > 0.0)) ++rep.ordering_violations;
      } else if (vi > vj && vj > vt && strict(vj)) {
        ++rep.ordering_checks;
        if (!(pi < pj && pj < 0.0)) ++rep.ordering_violations;
      }
    }
  }
  return rep;
}

}  // namespace fedprice
