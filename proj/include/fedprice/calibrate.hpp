#pragma once

// Estimates the game parameters measured from training: gradient bounds G_n,
// the bound coefficient alpha, and local-optimum losses for the utility offset.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedprice/bound.hpp"
#include "fedprice/core.hpp"
#include "fedprice/dataset.hpp"
#include "fedprice/fltrain.hpp"

namespace fedprice {

struct GradBoundOptions {
  bool use_quantile = false;  // max otherwise
  double quantile = 0.95;
  double floor = 1e-6;
};

struct GradBoundEstimate {
  std::vector<double> grad_bounds;
  std::vector<std::string> warnings;
};

namespace detail {

inline double empirical_quantile(std::vector<double> xs, double level) {
  std::sort(xs.begin(), xs.end());
  const double pos = level * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

}  // namespace detail

/// Runs `pilot_rounds` of full-participation training and records the norm of
/// every local stochastic gradient. G_n is the largest observed norm, or the
/// configured quantile.
inline GradBoundEstimate estimate_grad_bounds(const FederatedDataset& ds, const TrainConfig& cfg,
                                              int pilot_rounds, std::uint64_t seed,
                                              const GradBoundOptions& opts = {}) {
  if (pilot_rounds < 1)
    throw InvalidInput(detail::concat("pilot_rounds must be >= 1, got ", pilot_rounds));
  if (opts.use_quantile && !(opts.quantile > 0.0 && opts.quantile <= 1.0))
    throw InvalidInput(detail::concat("quantile must lie in (0, 1], got ", opts.quantile));
  validate(ds);
  TrainConfig pilot = cfg;
  pilot.q = ParticipationVector{std::vector<double>(ds.clients(), 1.0)};
  pilot.rounds = pilot_rounds;
  pilot.seed = seed;
  validate(pilot, ds.clients());

  const auto sizes = ds.datasizes();
  const std::vector<double> ones(sizes.size(), 1.0);
  const auto pop = make_population(sizes, ones, ones, std::vector<double>(sizes.size(), 0.0), ones);

  std::vector<std::vector<double>> norms(ds.clients());
  ModelState model = ModelState::zeros(ds.classes, ds.dim);
  for (int r = 0; r < pilot_rounds; ++r) {
    const double lr = learning_rate(pilot.lr, r, pilot.local_steps);
    std::map<std::size_t, Eigen::MatrixXd> updates;
    for (std::size_t n = 0; n < ds.clients(); ++n) {
      Rng rng = make_rng(seed, {static_cast<std::uint64_t>(r), n + 1});
      updates.emplace(n, local_sgd(model, ds.shards[n], pilot.local_steps, pilot.batch, lr,
                                   pilot.l2, rng, [&](double g) { norms[n].push_back(g); }));
    }
    model = aggregate(model, updates, pilot.q, pop);
  }

  GradBoundEstimate out;
  out.grad_bounds.resize(ds.clients());
  for (std::size_t n = 0; n < ds.clients(); ++n) {
    double g = opts.use_quantile ? detail::empirical_quantile(norms[n], opts.quantile)
                                 : *std::max_element(norms[n].begin(), norms[n].end());
    if (!std::isfinite(g))
      throw SolverFailure(detail::concat("client ", n, ": non-finite gradient norm in pilot"));
    if (g < opts.floor) {
      out.warnings.push_back(detail::concat("client ", n, ": observed gradient norm ", g,
                                            " floored at ", opts.floor));
      g = opts.floor;
    }
    out.grad_bounds[n] = g;
  }
  return out;
}

/// Final loss of one pilot run.
struct PilotRun {
  ParticipationVector q;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
};

/// Least-squares slope through the origin of loss differences against
/// differences of sum_n (1 - q_n) a_n^2 G_n^2 / q_n / R, taken over every pair of
/// runs that share a seed. Clamped at zero.
inline double estimate_alpha(const std::vector<PilotRun>& pilots, const Population& pop,
                             double rounds) {
  if (!(rounds >= 1.0)) throw InvalidInput(detail::concat("R must be >= 1, got ", rounds));
  std::map<std::uint64_t, std::vector<std::size_t>> by_seed;
  for (std::size_t i = 0; i < pilots.size(); ++i) by_seed[pilots[i].seed].push_back(i);
  std::vector<double> penalty(pilots.size());
  for (std::size_t i = 0; i < pilots.size(); ++i)
    penalty[i] = detail::participation_penalty(pilots[i].q, pop);

  CompensatedSum sxy, sxx;
  std::size_t pairs = 0;
  double largest = 0.0;
  for (const auto& [seed, runs] : by_seed)
    for (std::size_t a = 0; a < runs.size(); ++a)
      for (std::size_t b = a + 1; b < runs.size(); ++b) {
        const double dx = penalty[runs[a]] - penalty[runs[b]];
        const double dy = pilots[runs[a]].final_loss - pilots[runs[b]].final_loss;
        largest = std::max(largest, std::abs(dx));
        sxy += dx / rounds * dy;
        sxx += dx / rounds * (dx / rounds);
        ++pairs;
      }
  if (pairs == 0)
    throw InvalidInput("alpha fit needs at least two pilot runs sharing a seed");
  if (largest < 1e-12)
    throw SolverFailure(detail::concat("alpha fit is ill-conditioned: every regressor difference is below 1e-12 (",
                                       pairs, " pairs)"));
  return std::max(0.0, sxy.value() / sxx.value());
}

// Local optima ---------------------------------------------------------------

struct OptimizerOptions {
  double grad_tol = 1e-6;  // Frobenius norm of the gradient
  int max_iterations = 200000;
};

struct LocalOptima {
  std::vector<double> local;  // F(w_n*) for each client
  double global_proxy = 0.0;  // F at the pooled minimizer
};

namespace detail {

/// Smoothness of the regularized loss on a shard: l2 + lambda_max(X~^T X~ / n) / 2.
inline double shard_smoothness(const Shard& s, double l2) {
  const Eigen::Index d = s.features.cols();
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(d + 1, d + 1);
  gram.topLeftCorner(d, d) = s.features.transpose() * s.features;
  const Eigen::VectorXd colsum = s.features.colwise().sum().transpose();
  gram.topRightCorner(d, 1) = colsum;
  gram.bottomLeftCorner(1, d) = colsum.transpose();
  gram(d, d) = static_cast<double>(s.size());
  gram /= static_cast<double>(s.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
  return l2 + 0.5 * eig.eigenvalues().maxCoeff();
}

/// Accelerated gradient descent with gradient-based restart on F_s from zero.
inline Eigen::MatrixXd minimize_shard(const Shard& s, int classes, double l2,
                                      const OptimizerOptions& opts, const std::string& who) {
  const double step = 1.0 / shard_smoothness(s, l2);
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(classes, s.features.cols() + 1);
  Eigen::MatrixXd y = x;
  double t = 1.0;
  double gnorm = 0.0;
  for (int it = 0; it < opts.max_iterations; ++it) {
    const Eigen::MatrixXd gy = shard_gradient(y, s, l2);
    const Eigen::MatrixXd next = y - step * gy;
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    if ((gy.array() * (next - x).array()).sum() > 0.0) {
      y = x;
      t = 1.0;
      continue;
    }
    y = next + ((t - 1.0) / t_next) * (next - x);
    x = next;
    t = t_next;
    if (it % 10 == 0 || it + 1 == opts.max_iterations) {
      gnorm = shard_gradient(x, s, l2).norm();
      if (gnorm <= opts.grad_tol) return x;
    }
  }
  gnorm = shard_gradient(x, s, l2).norm();
  if (gnorm <= opts.grad_tol) return x;
  throw SolverFailure(concat(who, ": optimizer did not converge in ", opts.max_iterations,
                             " iterations, final gradient norm ", gnorm));
}

}  // namespace detail

/// F(w_n*) for each client's own minimizer and F at the pooled minimizer.
inline LocalOptima local_optimum_losses(const FederatedDataset& ds, const TrainConfig& cfg,
                                        const OptimizerOptions& opts = {}) {
  validate(ds);
  if (!(cfg.l2 > 0.0))
    throw InvalidInput("local optima need l2 > 0 for a unique minimizer");
  LocalOptima out;
  out.local.resize(ds.clients());
  for (std::size_t n = 0; n < ds.clients(); ++n) {
    const auto w = detail::minimize_shard(ds.shards[n], ds.classes, cfg.l2, opts,
                                          detail::concat("client ", n));
    out.local[n] = global_loss(w, ds, cfg.l2);
  }
  const auto w_star = detail::minimize_shard(pooled(ds), ds.classes, cfg.l2, opts, "pooled data");
  out.global_proxy = global_loss(w_star, ds, cfg.l2);
  return out;
}

}  // namespace fedprice
