#pragma once

// Variance and convergence-gap bounds of unbiased aggregation under
// independent client participation. These stand in for E[F(w^R(q))] - F*
// everywhere in the pricing game.

#include <cstddef>
#include <vector>

#include "fedprice/core.hpp"

namespace fedprice {

namespace detail {

inline void check_sizes(const ParticipationVector& q, const Population& pop) {
  if (q.size() != pop.size())
    throw InvalidInput(concat("participation vector has ", q.size(),
                              " entries, population has ", pop.size()));
}

inline void check_positive(const ParticipationVector& q) {
  for (std::size_t n = 0; n < q.size(); ++n)
    if (!(q[n] > 0.0))
      throw DomainError(concat("client ", n, ": participation level must be > 0, got ", q[n]));
}

/// sum_n (1 - q_n) a_n^2 G_n^2 / q_n, in index order.
inline double participation_penalty(const ParticipationVector& q, const Population& pop) {
  check_sizes(q, pop);
  check_positive(q);
  CompensatedSum s;
  for (std::size_t n = 0; n < q.size(); ++n)
    s += (1.0 - q[n]) * pop[n].quality() / q[n];
  return s.value();
}

}  // namespace detail

/// Upper bound on E||w^{r+1} - wbar^{r+1}||^2 for step size eta and E local steps.
inline double variance_bound(const ParticipationVector& q, const Population& pop,
                             double eta, double local_steps) {
  if (!(eta > 0.0)) throw DomainError(detail::concat("eta must be > 0, got ", eta));
  const double step = eta * local_steps;
  return 4.0 * detail::participation_penalty(q, pop) * step * step;
}

/// (1/R) (alpha sum_n (1 - q_n) a_n^2 G_n^2 / q_n + beta).
inline double convergence_gap_bound(const ParticipationVector& q, const Population& pop,
                                    const GameConstants& k) {
  return (k.alpha * detail::participation_penalty(q, pop) + k.beta) / k.rounds;
}

/// d/dq_n of convergence_gap_bound; every component is strictly negative.
inline std::vector<double> bound_gradient(const ParticipationVector& q, const Population& pop,
                                          const GameConstants& k) {
  detail::check_sizes(q, pop);
  detail::check_positive(q);
  std::vector<double> g(q.size());
  for (std::size_t n = 0; n < q.size(); ++n)
    g[n] = -k.alpha_per_round() * pop[n].quality() / (q[n] * q[n]);
  return g;
}

/// beta assembled from its constituents:
///   2L/(mu^2 E) A0 + 12 L^2/(mu^2 E) Gamma + 4 L^2/(mu E) ||w0 - w*||^2,
///   A0 = sum a_n^2 sigma_n^2 + 8 sum a_n G_n^2 (E-1)^2,  Gamma = F* - sum a_n F_n*.
inline double derive_beta(const BoundConstituents& b, const Population& pop, double local_steps) {
  if (b.sigma.size() != pop.size() || b.local_mins.size() != pop.size())
    throw InvalidInput("bound constituents must carry one sigma and one F_n* per client");
  if (!(b.smoothness > 0.0) || !(b.strong_convexity > 0.0))
    throw InvalidInput("bound constituents need L > 0 and mu > 0");
  const double L = b.smoothness, mu = b.strong_convexity, E = local_steps;
  CompensatedSum a0, weighted_local;
  for (std::size_t n = 0; n < pop.size(); ++n) {
    const double a = pop[n].weight, G = pop[n].grad_bound;
    a0 += a * a * b.sigma[n] * b.sigma[n];
    a0 += 8.0 * a * G * G * (E - 1.0) * (E - 1.0);
    weighted_local += a * b.local_mins[n];
  }
  const double gamma = b.global_min - weighted_local.value();
  return 2.0 * L / (mu * mu * E) * a0.value() + 12.0 * L * L / (mu * mu * E) * gamma +
         4.0 * L * L / (mu * E) * b.init_dist_sq;
}

/// alpha = 8 L E / mu^2.
inline double theoretical_alpha(double smoothness, double strong_convexity, double local_steps) {
  return 8.0 * smoothness * local_steps / (strong_convexity * strong_convexity);
}

}  // namespace fedprice
