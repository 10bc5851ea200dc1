#pragma once

// Simulated federated training: Bernoulli client participation, local SGD on
// an l2-regularized multinomial logistic model, inverse-probability weighted
// aggregation.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "fedprice/core.hpp"
#include "fedprice/dataset.hpp"

namespace fedprice {

struct ModelState {
  Eigen::MatrixXd w;  // classes x (dim + 1), bias in the last column
  int round = 0;

  static ModelState zeros(int classes, int dim) {
    return {Eigen::MatrixXd::Zero(classes, dim + 1), 0};
  }
};

struct TheoreticalSchedule {
  double smoothness = 1.0;        // L
  double strong_convexity = 1.0;  // mu
};

struct ExponentialSchedule {
  double eta0 = 0.1;
  double decay = 0.996;
};

using LrSchedule = std::variant<TheoreticalSchedule, ExponentialSchedule>;

/// Step size used during round r (0-based).
inline double learning_rate(const LrSchedule& s, int round, int local_steps) {
  if (const auto* t = std::get_if<TheoreticalSchedule>(&s)) {
    const double mu = t->strong_convexity;
    return 2.0 / (std::max(8.0 * t->smoothness, mu * local_steps) + mu * round);
  }
  const auto& e = std::get<ExponentialSchedule>(s);
  return e.eta0 * std::pow(e.decay, round);
}

struct TrainConfig {
  int local_steps = 10;  // E
  int batch = 24;
  LrSchedule lr = ExponentialSchedule{};
  double l2 = 1e-4;
  int rounds = 200;  // R
  std::uint64_t seed = 0;
  ParticipationVector q;
  double t_base = 1.0;   // simulated seconds per round
  double t_comp = 0.01;  // simulated seconds per local minibatch step
  int eval_stride = 1;
};

inline void validate(const TrainConfig& cfg, std::size_t clients) {
  if (cfg.local_steps < 1) throw InvalidInput(detail::concat("E must be >= 1, got ", cfg.local_steps));
  if (cfg.batch < 1) throw InvalidInput(detail::concat("batch must be >= 1, got ", cfg.batch));
  if (cfg.rounds < 1) throw InvalidInput(detail::concat("R must be >= 1, got ", cfg.rounds));
  if (!(cfg.l2 >= 0.0)) throw InvalidInput(detail::concat("l2 must be >= 0, got ", cfg.l2));
  if (cfg.eval_stride < 1)
    throw InvalidInput(detail::concat("eval stride must be >= 1, got ", cfg.eval_stride));
  if (!(cfg.t_base >= 0.0) || !(cfg.t_comp >= 0.0))
    throw InvalidInput("simulated time constants must be >= 0");
  if (cfg.q.size() != clients)
    throw InvalidInput(detail::concat("participation vector has ", cfg.q.size(),
                                      " entries, dataset has ", clients, " clients"));
  for (std::size_t n = 0; n < clients; ++n)
    if (!(cfg.q[n] >= 0.0 && cfg.q[n] <= 1.0))
      throw InvalidInput(detail::concat("client ", n, ": q must lie in [0, 1], got ", cfg.q[n]));
  if (const auto* t = std::get_if<TheoreticalSchedule>(&cfg.lr))
    if (!(t->smoothness > 0.0) || !(t->strong_convexity > 0.0))
      throw InvalidInput("theoretical schedule needs L > 0 and mu > 0");
  if (const auto* e = std::get_if<ExponentialSchedule>(&cfg.lr))
    if (!(e->eta0 >= 0.0) || !(e->decay > 0.0))
      throw InvalidInput("exponential schedule needs eta0 >= 0 and decay > 0");
}

struct RoundMetrics {
  int round = 0;
  std::vector<std::size_t> participants;
  double loss = 0.0;
  double accuracy = 0.0;
  double sim_time = 0.0;  // cumulative

  bool operator==(const RoundMetrics&) const = default;
};

// Model evaluation -----------------------------------------------------------

namespace detail {

inline void check_model(const Eigen::MatrixXd& w, Eigen::Index dim) {
  if (w.cols() != dim + 1 || w.rows() < 2)
    throw InvalidInput(concat("model is ", w.rows(), "x", w.cols(), ", features have dimension ",
                              dim));
}

/// Summed cross-entropy over the rows of x. When `resid` is given it receives
/// softmax(x w^T + b) minus the one-hot labels.
inline double cross_entropy_sum(const Eigen::MatrixXd& w, const Eigen::Ref<const FeatureMatrix>& x,
                                const int* labels, Eigen::MatrixXd* resid) {
  const Eigen::Index dim = x.cols();
  Eigen::MatrixXd logits = x * w.leftCols(dim).transpose();
  logits.rowwise() += w.col(dim).transpose();
  if (resid) resid->resize(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - m).exp().matrix();
    const double s = e.sum();
    total += m + std::log(s) - logits(i, labels[i]);
    if (resid) {
      resid->row(i) = e / s;
      (*resid)(i, labels[i]) -= 1.0;
    }
  }
  return total;
}

inline Eigen::MatrixXd batch_gradient(const Eigen::MatrixXd& w,
                                      const Eigen::Ref<const FeatureMatrix>& x, const int* labels,
                                      double l2) {
  Eigen::MatrixXd resid;
  cross_entropy_sum(w, x, labels, &resid);
  const double inv = 1.0 / static_cast<double>(x.rows());
  Eigen::MatrixXd g(w.rows(), w.cols());
  g.leftCols(x.cols()).noalias() = inv * resid.transpose() * x;
  g.col(x.cols()) = inv * resid.colwise().sum().transpose();
  g += l2 * w;
  return g;
}

}  // namespace detail

/// F_n(w): mean cross-entropy on the shard plus (l2/2)||w||^2.
inline double shard_loss(const Eigen::MatrixXd& w, const Shard& shard, double l2) {
  if (shard.empty()) throw InvalidInput("loss of an empty shard is undefined");
  detail::check_model(w, shard.features.cols());
  return detail::cross_entropy_sum(w, shard.features, shard.labels.data(), nullptr) /
             static_cast<double>(shard.size()) +
         0.5 * l2 * w.squaredNorm();
}

inline Eigen::MatrixXd shard_gradient(const Eigen::MatrixXd& w, const Shard& shard, double l2) {
  if (shard.empty()) throw InvalidInput("gradient of an empty shard is undefined");
  detail::check_model(w, shard.features.cols());
  return detail::batch_gradient(w, shard.features, shard.labels.data(), l2);
}

/// F(w) = sum_n a_n F_n(w) with a_n = d_n / sum d.
inline double global_loss(const Eigen::MatrixXd& w, const FederatedDataset& ds, double l2) {
  if (ds.shards.empty() || ds.total() == 0) throw InvalidInput("global loss of an empty dataset");
  const double total = static_cast<double>(ds.total());
  CompensatedSum f;
  for (const auto& s : ds.shards)
    if (!s.empty()) f += static_cast<double>(s.size()) / total * shard_loss(w, s, l2);
  return f.value();
}

inline double test_accuracy(const Eigen::MatrixXd& w, const Shard& test) {
  if (test.empty()) throw InvalidInput("accuracy of an empty test set is undefined");
  detail::check_model(w, test.features.cols());
  const Eigen::Index dim = test.features.cols();
  Eigen::MatrixXd logits = test.features * w.leftCols(dim).transpose();
  logits.rowwise() += w.col(dim).transpose();
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    correct += (arg == test.labels[static_cast<std::size_t>(i)]) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

/// L = mu + max ||(x, 1)||^2 / 4 over every client sample, with mu = l2.
inline TheoreticalSchedule theoretical_schedule(const FederatedDataset& ds, double l2) {
  double max_sq = 0.0;
  for (const auto& s : ds.shards)
    if (!s.empty()) max_sq = std::max(max_sq, s.features.rowwise().squaredNorm().maxCoeff());
  return {l2 + (max_sq + 1.0) / 4.0, l2};
}

// Training primitives --------------------------------------------------------

/// E minibatch SGD steps from w. Batches are drawn with replacement; a batch at
/// least as large as the shard uses the whole shard. `observe` receives the
/// Frobenius norm of every stochastic gradient taken.
template <typename Observer>
Eigen::MatrixXd local_sgd(const ModelState& w, const Shard& shard, int local_steps, int batch,
                          double lr, double l2, Rng& rng, Observer&& observe) {
  if (shard.empty()) throw InvalidInput("local SGD on an empty shard");
  if (batch < 1) throw InvalidInput(detail::concat("batch must be >= 1, got ", batch));
  detail::check_model(w.w, shard.features.cols());
  Eigen::MatrixXd x = w.w;
  const std::size_t n = shard.size();
  const bool full = static_cast<std::size_t>(batch) >= n;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  FeatureMatrix bx(full ? 0 : batch, shard.features.cols());
  std::vector<int> by(full ? 0 : static_cast<std::size_t>(batch));
  for (int step = 0; step < local_steps; ++step) {
    Eigen::MatrixXd g;
    if (full) {
      g = detail::batch_gradient(x, shard.features, shard.labels.data(), l2);
    } else {
      for (int b = 0; b < batch; ++b) {
        const std::size_t i = pick(rng);
        bx.row(b) = shard.features.row(static_cast<Eigen::Index>(i));
        by[static_cast<std::size_t>(b)] = shard.labels[i];
      }
      g = detail::batch_gradient(x, bx, by.data(), l2);
    }
    observe(g.norm());
    x -= lr * g;
  }
  return x;
}

inline Eigen::MatrixXd local_sgd(const ModelState& w, const Shard& shard, int local_steps,
                                 int batch, double lr, double l2, Rng& rng) {
  return local_sgd(w, shard, local_steps, batch, lr, l2, rng, [](double) {});
}

/// Each client joins independently with probability q_n. Indices are sorted.
inline std::vector<std::size_t> sample_participants(const ParticipationVector& q, Rng& rng) {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < q.size(); ++n) {
    if (!(q[n] >= 0.0 && q[n] <= 1.0))
      throw InvalidInput(detail::concat("client ", n, ": q must lie in [0, 1], got ", q[n]));
    if (std::bernoulli_distribution(q[n])(rng)) out.push_back(n);
  }
  return out;
}

/// w_prev + sum_{n in S} (a_n / q_n)(w_n - w_prev); the map key order fixes
/// the summation order.
inline ModelState aggregate(const ModelState& prev, const std::map<std::size_t, Eigen::MatrixXd>& updates,
                            const ParticipationVector& q, const Population& pop) {
  if (q.size() != pop.size())
    throw InvalidInput(detail::concat("participation vector has ", q.size(),
                                      " entries, population has ", pop.size()));
  ModelState next{prev.w, prev.round + 1};
  for (const auto& [n, wn] : updates) {
    if (n >= pop.size())
      throw InvalidInput(detail::concat("update from unknown client ", n));
    if (!(q[n] > 0.0))
      throw DomainError(detail::concat("client ", n, ": update received with q = ", q[n]));
    if (wn.rows() != prev.w.rows() || wn.cols() != prev.w.cols())
      throw InvalidInput(detail::concat("client ", n, ": update has shape ", wn.rows(), "x",
                                        wn.cols()));
    next.w += (pop[n].weight / q[n]) * (wn - prev.w);
  }
  return next;
}

/// Runs exactly R rounds and returns metrics for round 0 and every
/// eval_stride-th round, always including the last.
inline std::vector<RoundMetrics> train(const FederatedDataset& ds, const TrainConfig& cfg,
                                       const Population& pop) {
  validate(ds);
  validate(cfg, ds.clients());
  if (pop.size() != ds.clients())
    throw InvalidInput(detail::concat("population has ", pop.size(), " clients, dataset has ",
                                      ds.clients()));
  const bool has_test = !ds.test.empty();
  ModelState model = ModelState::zeros(ds.classes, ds.dim);
  std::vector<RoundMetrics> out;
  const auto evaluate = [&](int r, std::vector<std::size_t> participants, double t) {
    out.push_back({r, std::move(participants), global_loss(model.w, ds, cfg.l2),
                   has_test ? test_accuracy(model.w, ds.test) : 0.0, t});
  };
  evaluate(0, {}, 0.0);

  double sim_time = 0.0;
  for (int r = 0; r < cfg.rounds; ++r) {
    Rng round_rng = make_rng(cfg.seed, {static_cast<std::uint64_t>(r), 0});
    auto participants = sample_participants(cfg.q, round_rng);
    const double lr = learning_rate(cfg.lr, r, cfg.local_steps);
    std::map<std::size_t, Eigen::MatrixXd> updates;
    std::size_t largest = 0;
    for (auto n : participants) {
      Rng client_rng = make_rng(cfg.seed, {static_cast<std::uint64_t>(r), n + 1});
      updates.emplace(n, local_sgd(model, ds.shards[n], cfg.local_steps, cfg.batch, lr, cfg.l2,
                                   client_rng));
      largest = std::max(largest, ds.shards[n].size());
    }
    model = aggregate(model, updates, cfg.q, pop);
    sim_time += cfg.t_base + cfg.t_comp * (static_cast<double>(largest) * cfg.local_steps /
                                           static_cast<double>(cfg.batch));
    if ((r + 1) % cfg.eval_stride == 0 || r + 1 == cfg.rounds)
      evaluate(r + 1, std::move(participants), sim_time);
  }
  return out;
}

// Metric CSV -----------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "run_id,seed,round,sim_time,participants,loss,accuracy";

namespace detail {

/// Shortest round-trip decimal form.
inline std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw FormatError(concat(where, ": not a number: '", s, "'"));
  return v;
}

template <typename Int>
Int parse_int(const std::string& s, const std::string& where) {
  Int v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw FormatError(concat(where, ": not an integer: '", s, "'"));
  return v;
}

}  // namespace detail

struct MetricRow {
  std::string run_id;
  std::uint64_t seed = 0;
  int round = 0;
  double sim_time = 0.0;
  std::size_t participants = 0;
  double loss = 0.0;
  double accuracy = 0.0;

  bool operator==(const MetricRow&) const = default;
};

inline void write_metrics_csv(std::ostream& os, const std::string& run_id, std::uint64_t seed,
                              const std::vector<RoundMetrics>& metrics) {
  if (run_id.find_first_of(",\n\r\"") != std::string::npos)
    throw InvalidInput(detail::concat("run id '", run_id, "' contains a CSV metacharacter"));
  os << kMetricsHeader << '\n';
  for (const auto& m : metrics)
    os << run_id << ',' << seed << ',' << m.round << ',' << detail::format_double(m.sim_time)
       << ',' << m.participants.size() << ',' << detail::format_double(m.loss) << ','
       << detail::format_double(m.accuracy) << '\n';
}

inline std::vector<MetricRow> read_metrics_csv(std::istream& is, const std::string& source) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError(detail::concat(source, ": empty metrics file"));
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader)
    throw FormatError(detail::concat(source, ": unexpected header '", line, "'"));
  std::vector<MetricRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const std::string where = detail::concat(source, ":", lineno);
    if (f.size() != 7)
      throw FormatError(detail::concat(where, ": expected 7 fields, got ", f.size()));
    rows.push_back({f[0], detail::parse_int<std::uint64_t>(f[1], where),
                    detail::parse_int<int>(f[2], where), detail::parse_double(f[3], where),
                    detail::parse_int<std::size_t>(f[4], where), detail::parse_double(f[5], where),
                    detail::parse_double(f[6], where)});
  }
  return rows;
}

}  // namespace fedprice
