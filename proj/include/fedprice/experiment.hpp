#pragma once

// End-to-end experiment pipeline: dataset, calibration, per-scheme pricing,
// seeded training runs, and summary reports computed from the saved files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "fedprice/calibrate.hpp"
#include "fedprice/core.hpp"
#include "fedprice/data.hpp"
#include "fedprice/fltrain.hpp"
#include "fedprice/game.hpp"
#include "fedprice/io.hpp"

namespace fedprice {

// Configuration --------------------------------------------------------------

struct DataSettings {
  std::string source = "synthetic";  // synthetic | idx
  SyntheticConfig synthetic;
  std::string images, labels, test_images, test_labels;  // idx source
  std::size_t subsample = 0;                               // 0 keeps every sample
  std::vector<int> label_filter;
  int classes_min = 1;
  int classes_max = 6;
  double holdout_fraction = 0.1;  // idx source without test files
};

struct CalibrationSettings {
  int pilot_rounds = 20;
  std::optional<double> grad_quantile;  // max when absent
  std::optional<double> alpha;          // fitted when absent
  std::vector<double> alpha_levels{0.2, 0.5, 1.0};
  int alpha_seeds = 3;
  double beta = 0.0;
  double q_floor = 0.01;
  bool local_optima = true;
};

struct Economics {
  double budget = 200.0;
  double mean_cost = 50.0;
  double mean_value = 4000.0;
  double q_max = 1.0;
};

struct ExperimentConfig {
  std::string setup = "desk";
  std::uint64_t seed = 1;
  int repeats = 5;
  std::vector<std::string> schemes{"optimal", "uniform", "weighted"};
  DataSettings data;
  TrainConfig train;  // q is filled per scheme
  CalibrationSettings calibration;
  Economics economics;
  std::optional<double> target_loss;
  std::optional<double> target_accuracy;
};

inline const std::vector<std::string>& known_schemes() {
  static const std::vector<std::string> s{"optimal", "uniform", "weighted"};
  return s;
}

inline void validate(const ExperimentConfig& c) {
  if (c.repeats < 1) throw InvalidInput(detail::concat("repeats must be >= 1, got ", c.repeats));
  if (c.schemes.empty()) throw InvalidInput("at least one scheme is required");
  std::set<std::string> seen;
  for (const auto& s : c.schemes) {
    if (std::find(known_schemes().begin(), known_schemes().end(), s) == known_schemes().end())
      throw InvalidInput(detail::concat("unknown scheme '", s, "' (expected optimal, uniform or weighted)"));
    if (!seen.insert(s).second) throw InvalidInput(detail::concat("scheme '", s, "' listed twice"));
  }
  if (c.data.source == "synthetic") {
    validate(c.data.synthetic);
  } else if (c.data.source == "idx") {
    if (c.data.images.empty() || c.data.labels.empty())
      throw InvalidInput("idx data source needs data.images and data.labels paths");
    if (c.data.test_images.empty() != c.data.test_labels.empty())
      throw InvalidInput("data.test_images and data.test_labels must be given together");
  } else {
    throw InvalidInput(detail::concat("unknown data source '", c.data.source, "' (expected synthetic or idx)"));
  }
  if (c.calibration.pilot_rounds < 1)
    throw InvalidInput(detail::concat("calibration.pilot_rounds must be >= 1, got ", c.calibration.pilot_rounds));
  if (c.calibration.alpha && !(*c.calibration.alpha > 0.0))
    throw InvalidInput(detail::concat("calibration.alpha must be > 0, got ", *c.calibration.alpha));
  if (!c.calibration.alpha && (c.calibration.alpha_levels.size() < 2 || c.calibration.alpha_seeds < 1))
    throw InvalidInput("fitting alpha needs >= 2 pilot levels and >= 1 pilot seed");
  for (double l : c.calibration.alpha_levels)
    if (!(l > 0.0 && l <= 1.0))
      throw InvalidInput(detail::concat("alpha pilot level must lie in (0, 1], got ", l));
  if (!(c.economics.mean_cost > 0.0) || !(c.economics.mean_value >= 0.0))
    throw InvalidInput("economics needs mean_cost > 0 and mean_value >= 0");
  if (!(c.economics.q_max > c.calibration.q_floor && c.economics.q_max <= 1.0))
    throw InvalidInput(detail::concat("economics.q_max must lie in (q_floor, 1], got ", c.economics.q_max));
  TrainConfig t = c.train;
  t.q = ParticipationVector{{1.0}};
  validate(t, 1);
}

/// Named presets. `desk` is the scaled Setup-1 analogue; setup1..3 use the
/// full-scale sizes and economics.
inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.setup = name;
  c.train.local_steps = 10;
  c.train.batch = 24;
  c.train.rounds = 200;
  c.train.lr = ExponentialSchedule{0.1, 0.996};
  c.train.l2 = 1e-4;
  c.data.synthetic.dim = 60;
  c.data.synthetic.classes = 10;
  if (name == "desk") {
    c.data.synthetic.clients = 10;
    c.data.synthetic.total_samples = 5594;
    c.repeats = 5;
    c.economics = {200.0, 50.0, 4000.0, 1.0};
  } else if (name == "setup1") {
    c.data.synthetic.clients = 40;
    c.data.synthetic.total_samples = 22377;
    c.train.rounds = 1000;
    c.train.local_steps = 100;
    c.repeats = 20;
    c.economics = {200.0, 50.0, 4000.0, 1.0};
  } else if (name == "setup2") {
    c.data.source = "idx";
    c.data.images = "data/mnist/train-images-idx3-ubyte";
    c.data.labels = "data/mnist/train-labels-idx1-ubyte";
    c.data.test_images = "data/mnist/t10k-images-idx3-ubyte";
    c.data.test_labels = "data/mnist/t10k-labels-idx1-ubyte";
    c.data.subsample = 14463;
    c.data.synthetic.clients = 40;
    c.data.classes_min = 1;
    c.data.classes_max = 6;
    c.train.rounds = 1000;
    c.train.local_steps = 100;
    c.repeats = 20;
    c.economics = {40.0, 20.0, 30000.0, 1.0};
  } else if (name == "setup3") {
    c.data.source = "idx";
    c.data.images = "data/emnist/emnist-byclass-train-images-idx3-ubyte";
    c.data.labels = "data/emnist/emnist-byclass-train-labels-idx1-ubyte";
    c.data.test_images = "data/emnist/emnist-byclass-test-images-idx3-ubyte";
    c.data.test_labels = "data/emnist/emnist-byclass-test-labels-idx1-ubyte";
    for (int y = 36; y < 62; ++y) c.data.label_filter.push_back(y);
    c.data.synthetic.clients = 40;
    c.data.classes_min = 1;
    c.data.classes_max = 10;
    c.train.rounds = 1000;
    c.train.local_steps = 100;
    c.repeats = 20;
    c.economics = {500.0, 80.0, 10000.0, 1.0};
  } else {
    throw InvalidInput(detail::concat("unknown preset '", name, "' (expected desk, setup1, setup2 or setup3)"));
  }
  return c;
}

// Config JSON ----------------------------------------------------------------

inline Json to_json(const ExperimentConfig& c) {
  Json lr;
  if (const auto* t = std::get_if<TheoreticalSchedule>(&c.train.lr))
    lr = {{"schedule", "theoretical"}, {"L", t->smoothness}, {"mu", t->strong_convexity}};
  else {
    const auto& e = std::get<ExponentialSchedule>(c.train.lr);
    lr = {{"schedule", "exponential"}, {"eta0", e.eta0}, {"decay", e.decay}};
  }
  const auto& s = c.data.synthetic;
  return {
      {"setup", c.setup},
      {"seed", c.seed},
      {"repeats", c.repeats},
      {"schemes", c.schemes},
      {"data",
       {{"source", c.data.source},
        {"clients", s.clients},
        {"dim", s.dim},
        {"classes", s.classes},
        {"alpha", s.alpha},
        {"beta", s.beta},
        {"total_samples", s.total_samples},
        {"power_exponent", s.power_exponent},
        {"test_fraction", s.test_fraction},
        {"label_noise", s.label_noise},
        {"images", c.data.images},
        {"labels", c.data.labels},
        {"test_images", c.data.test_images},
        {"test_labels", c.data.test_labels},
        {"subsample", c.data.subsample},
        {"label_filter", c.data.label_filter},
        {"classes_min", c.data.classes_min},
        {"classes_max", c.data.classes_max},
        {"holdout_fraction", c.data.holdout_fraction}}},
      {"train",
       {{"rounds", c.train.rounds},
        {"local_steps", c.train.local_steps},
        {"batch", c.train.batch},
        {"lr", lr},
        {"l2", c.train.l2},
        {"t_base", c.train.t_base},
        {"t_comp", c.train.t_comp},
        {"eval_stride", c.train.eval_stride}}},
      {"calibration",
       {{"pilot_rounds", c.calibration.pilot_rounds},
        {"grad_quantile", detail::optional_number(c.calibration.grad_quantile)},
        {"alpha", detail::optional_number(c.calibration.alpha)},
        {"alpha_levels", c.calibration.alpha_levels},
        {"alpha_seeds", c.calibration.alpha_seeds},
        {"beta", c.calibration.beta},
        {"q_floor", c.calibration.q_floor},
        {"local_optima", c.calibration.local_optima}}},
      {"economics",
       {{"budget", c.economics.budget},
        {"mean_cost", c.economics.mean_cost},
        {"mean_value", c.economics.mean_value},
        {"q_max", c.economics.q_max}}},
      {"targets",
       {{"loss", detail::optional_number(c.target_loss)},
        {"accuracy", detail::optional_number(c.target_accuracy)}}}};
}

namespace detail {

inline void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw InvalidInput(concat("config: '", where, "' must be an object"));
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }))
      throw InvalidInput(concat("config: unknown key '", where.empty() ? "" : where + ".", it.key(), "'"));
}

template <typename T>
T field(const Json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw InvalidInput(concat("config: '", where, ".", key, "' is missing or has the wrong type"));
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
  using detail::field;
  detail::check_keys(j, "", {"setup", "seed", "repeats", "schemes", "data", "train", "calibration", "economics", "targets"});
  ExperimentConfig c;
  c.setup = field<std::string>(j, "setup", "");
  c.seed = field<std::uint64_t>(j, "seed", "");
  c.repeats = field<int>(j, "repeats", "");
  c.schemes = field<std::vector<std::string>>(j, "schemes", "");

  const Json& d = j.at("data");
  detail::check_keys(d, "data", {"source", "clients", "dim", "classes", "alpha", "beta", "total_samples",
                                 "power_exponent", "test_fraction", "label_noise", "images", "labels",
                                 "test_images", "test_labels", "subsample", "label_filter",
                                 "classes_min", "classes_max", "holdout_fraction"});
  c.data.source = field<std::string>(d, "source", "data");
  auto& s = c.data.synthetic;
  s.clients = field<std::size_t>(d, "clients", "data");
  s.dim = field<int>(d, "dim", "data");
  s.classes = field<int>(d, "classes", "data");
  s.alpha = field<double>(d, "alpha", "data");
  s.beta = field<double>(d, "beta", "data");
  s.total_samples = field<std::size_t>(d, "total_samples", "data");
  s.power_exponent = field<double>(d, "power_exponent", "data");
  s.test_fraction = field<double>(d, "test_fraction", "data");
  s.label_noise = field<double>(d, "label_noise", "data");
  c.data.images = field<std::string>(d, "images", "data");
  c.data.labels = field<std::string>(d, "labels", "data");
  c.data.test_images = field<std::string>(d, "test_images", "data");
  c.data.test_labels = field<std::string>(d, "test_labels", "data");
  c.data.subsample = field<std::size_t>(d, "subsample", "data");
  c.data.label_filter = field<std::vector<int>>(d, "label_filter", "data");
  c.data.classes_min = field<int>(d, "classes_min", "data");
  c.data.classes_max = field<int>(d, "classes_max", "data");
  c.data.holdout_fraction = field<double>(d, "holdout_fraction", "data");

  const Json& t = j.at("train");
  detail::check_keys(t, "train", {"rounds", "local_steps", "batch", "lr", "l2", "t_base", "t_comp", "eval_stride"});
  c.train.rounds = field<int>(t, "rounds", "train");
  c.train.local_steps = field<int>(t, "local_steps", "train");
  c.train.batch = field<int>(t, "batch", "train");
  c.train.l2 = field<double>(t, "l2", "train");
  c.train.t_base = field<double>(t, "t_base", "train");
  c.train.t_comp = field<double>(t, "t_comp", "train");
  c.train.eval_stride = field<int>(t, "eval_stride", "train");
  const Json& lr = t.at("lr");
  const auto kind = field<std::string>(lr, "schedule", "train.lr");
  if (kind == "exponential") {
    detail::check_keys(lr, "train.lr", {"schedule", "eta0", "decay"});
    c.train.lr = ExponentialSchedule{field<double>(lr, "eta0", "train.lr"), field<double>(lr, "decay", "train.lr")};
  } else if (kind == "theoretical") {
    detail::check_keys(lr, "train.lr", {"schedule", "L", "mu"});
    c.train.lr = TheoreticalSchedule{field<double>(lr, "L", "train.lr"), field<double>(lr, "mu", "train.lr")};
  } else {
    throw InvalidInput(detail::concat("config: train.lr.schedule must be exponential or theoretical, got '", kind, "'"));
  }

  const Json& k = j.at("calibration");
  detail::check_keys(k, "calibration", {"pilot_rounds", "grad_quantile", "alpha", "alpha_levels", "alpha_seeds",
                                        "beta", "q_floor", "local_optima"});
  c.calibration.pilot_rounds = field<int>(k, "pilot_rounds", "calibration");
  c.calibration.grad_quantile = detail::optional_number(k.at("grad_quantile"));
  c.calibration.alpha = detail::optional_number(k.at("alpha"));
  c.calibration.alpha_levels = field<std::vector<double>>(k, "alpha_levels", "calibration");
  c.calibration.alpha_seeds = field<int>(k, "alpha_seeds", "calibration");
  c.calibration.beta = field<double>(k, "beta", "calibration");
  c.calibration.q_floor = field<double>(k, "q_floor", "calibration");
  c.calibration.local_optima = field<bool>(k, "local_optima", "calibration");

  const Json& e = j.at("economics");
  detail::check_keys(e, "economics", {"budget", "mean_cost", "mean_value", "q_max"});
  c.economics = {field<double>(e, "budget", "economics"), field<double>(e, "mean_cost", "economics"),
                 field<double>(e, "mean_value", "economics"), field<double>(e, "q_max", "economics")};

  const Json& g = j.at("targets");
  detail::check_keys(g, "targets", {"loss", "accuracy"});
  c.target_loss = detail::optional_number(g.at("loss"));
  c.target_accuracy = detail::optional_number(g.at("accuracy"));
  validate(c);
  return c;
}

/// Preset named by the document's "setup" key (or `fallback_preset`) with the
/// document merged over it.
inline ExperimentConfig resolve_config(const Json& overrides, const std::string& fallback_preset = "desk") {
  std::string name = fallback_preset;
  if (overrides.contains("setup") && overrides.at("setup").is_string()) name = overrides.at("setup").get<std::string>();
  ExperimentConfig base = preset(name == "custom" ? fallback_preset : name);
  Json merged = to_json(base);
  merged.merge_patch(overrides);
  return config_from_json(merged);
}

// Pipeline stages ------------------------------------------------------------

inline FederatedDataset build_dataset(const ExperimentConfig& c) {
  validate(c);
  if (c.data.source == "synthetic") {
    auto s = c.data.synthetic;
    s.seed = c.seed;
    return gen_synthetic(s);
  }
  Shard pool = load_idx(c.data.images, c.data.labels);
  Shard test;
  if (!c.data.test_images.empty()) test = load_idx(c.data.test_images, c.data.test_labels);
  if (!c.data.label_filter.empty()) {
    pool = filter_labels(pool, c.data.label_filter);
    if (!test.empty()) test = filter_labels(test, c.data.label_filter);
  }
  if (test.empty()) {
    const auto held = static_cast<std::size_t>(std::llround(c.data.holdout_fraction * pool.size()));
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng = make_rng(c.seed, {6});
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::size_t> test_idx(idx.begin(), idx.begin() + static_cast<long>(held));
    std::vector<std::size_t> train_idx(idx.begin() + static_cast<long>(held), idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    test = gather(pool, test_idx);
    pool = gather(pool, train_idx);
  }
  if (c.data.subsample > 0) pool = subsample(pool, c.data.subsample, c.seed);
  PartitionConfig pc{c.data.synthetic.clients, c.data.classes_min, c.data.classes_max,
                     c.data.synthetic.power_exponent, c.seed};
  auto ds = partition_label_limited(pool, pc);
  const int classes = c.data.label_filter.empty()
                          ? std::max(ds.classes, test.empty() ? 0 : *std::max_element(test.labels.begin(), test.labels.end()) + 1)
                          : static_cast<int>(c.data.label_filter.size());
  ds.classes = classes;
  ds.test = std::move(test);
  validate(ds);
  return ds;
}

/// c_n = mean_cost * e_n and v_n = mean_value * f_n with e, f ~ Exp(1), drawn
/// from streams that depend only on the seed.
inline std::pair<std::vector<double>, std::vector<double>> sample_economics(const ExperimentConfig& c,
                                                                            std::size_t clients) {
  Rng cost_rng = make_rng(c.seed, {7, 0});
  Rng value_rng = make_rng(c.seed, {7, 1});
  std::exponential_distribution<double> e(1.0);
  std::vector<double> cost(clients), value(clients);
  for (auto& x : cost) x = c.economics.mean_cost * e(cost_rng);
  for (auto& x : value) x = c.economics.mean_value * e(value_rng);
  return {cost, value};
}

struct CalibrationRecord {
  std::vector<double> grad_bounds;
  std::vector<std::string> warnings;
  std::vector<PilotRun> alpha_pilots;
  double alpha = 0.0;
  bool alpha_fitted = false;

  Json to_json() const {
    Json pilots = Json::array();
    for (const auto& p : alpha_pilots)
      pilots.push_back({{"seed", p.seed}, {"q", detail::numbers(p.q.q)}, {"final_loss", detail::number(p.final_loss)}});
    return {{"grad_bounds", detail::numbers(grad_bounds)}, {"warnings", warnings},
            {"alpha", detail::number(alpha)}, {"alpha_fitted", alpha_fitted}, {"alpha_pilots", pilots}};
  }
};

/// G_n from a full-participation pilot, alpha from pilot runs at uniform
/// participation levels (or the configured value), c_n and v_n sampled, and
/// local-optimum losses for the utility offset.
inline PopulationFile calibrate_population(const FederatedDataset& ds, const ExperimentConfig& c,
                                           CalibrationRecord* record = nullptr) {
  validate(c);
  validate(ds);
  const std::size_t N = ds.clients();
  TrainConfig t = c.train;
  t.q = ParticipationVector{std::vector<double>(N, 1.0)};
  GradBoundOptions gopts;
  if (c.calibration.grad_quantile) {
    gopts.use_quantile = true;
    gopts.quantile = *c.calibration.grad_quantile;
  }
  const auto g = estimate_grad_bounds(ds, t, c.calibration.pilot_rounds, c.seed, gopts);

  const auto [cost, value] = sample_economics(c, N);
  PopulationFile f;
  f.clients = make_population(ds.datasizes(), g.grad_bounds, cost, value,
                              std::vector<double>(N, c.economics.q_max));
  f.constants.beta = c.calibration.beta;
  f.constants.rounds = c.train.rounds;
  f.constants.local_steps = c.train.local_steps;
  f.constants.q_floor = c.calibration.q_floor;

  CalibrationRecord rec;
  rec.grad_bounds = g.grad_bounds;
  rec.warnings = g.warnings;
  if (c.calibration.alpha) {
    f.constants.alpha = *c.calibration.alpha;
  } else {
    const auto pop = f.clients;
    for (int s = 0; s < c.calibration.alpha_seeds; ++s)
      for (double level : c.calibration.alpha_levels) {
        TrainConfig p = c.train;
        p.q = ParticipationVector{std::vector<double>(N, level)};
        p.seed = c.seed + 100000 + static_cast<std::uint64_t>(s);
        p.eval_stride = p.rounds;
        const auto m = train(ds, p, pop);
        rec.alpha_pilots.push_back({p.q, p.seed, m.back().loss});
      }
    const double a = estimate_alpha(rec.alpha_pilots, pop, c.train.rounds);
    if (!(a > 0.0))
      throw SolverFailure("alpha fit returned 0 (pilot losses do not decrease with participation); "
                          "set calibration.alpha explicitly");
    f.constants.alpha = a;
    rec.alpha_fitted = true;
  }
  rec.alpha = f.constants.alpha;

  if (c.calibration.local_optima) {
    const auto lo = local_optimum_losses(ds, c.train);
    for (std::size_t n = 0; n < N; ++n) f.clients[n].local_optimum_loss = lo.local[n];
    f.global_optimum_loss = lo.global_proxy;
  }
  validate(f.clients, f.constants);
  if (record) *record = std::move(rec);
  return f;
}

/// Equilibrium (optimal) or budget-exhausting baseline prices for one scheme.
inline EquilibriumManifest solve_scheme(const PopulationFile& f, double budget, const std::string& scheme) {
  EquilibriumManifest m;
  m.budget = budget;
  m.constants = f.constants;
  m.population = f.clients;
  if (scheme == "optimal") {
    const auto r = server_solve(f.clients, f.constants, budget);
    m.outcome = to_outcome(r, "optimal");
    m.equilibrium = r;
  } else if (scheme == "uniform") {
    const auto u = baseline_uniform(f.clients, f.constants, budget);
    m.outcome = respond_to_prices("uniform", PricingVector{std::vector<double>(f.clients.size(), u.price)},
                                  f.clients, f.constants);
  } else if (scheme == "weighted") {
    const auto w = baseline_weighted(f.clients, f.constants, budget);
    m.outcome = respond_to_prices("weighted", w.prices, f.clients, f.constants);
  } else {
    throw InvalidInput(detail::concat("unknown scheme '", scheme, "' (expected optimal, uniform or weighted)"));
  }
  return m;
}

inline std::vector<RoundMetrics> train_scheme(const FederatedDataset& ds, const EquilibriumManifest& m,
                                              const TrainConfig& base, std::uint64_t seed) {
  TrainConfig t = base;
  t.q = m.outcome.q;
  t.seed = seed;
  return train(ds, t, m.population);
}

inline std::vector<std::uint64_t> run_seeds(const ExperimentConfig& c) {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < c.repeats; ++i) s.push_back(c.seed + static_cast<std::uint64_t>(i));
  return s;
}

inline std::string metrics_name(const std::string& scheme, std::uint64_t seed) {
  return detail::concat(scheme, "_seed", seed, ".csv");
}

// Report ---------------------------------------------------------------------

struct SchemeSummary {
  std::string scheme;
  std::size_t runs = 0;
  double final_loss_mean = 0.0;
  double final_loss_sd = 0.0;
  double final_accuracy_mean = 0.0;
  std::vector<std::optional<int>> rounds_to_target;  // per seed
  std::vector<std::optional<double>> time_to_target;
  std::vector<std::optional<double>> time_to_accuracy;
  double utility_realized = 0.0;  // sum_n P q - c q^2 + v (F_local - final loss)
  double utility_model = 0.0;     // same with the bound in place of the realized loss gap
  std::size_t negative_payments = 0;
  double spend = 0.0;
  double bound_value = 0.0;
  std::vector<double> mean_curve;  // seed-averaged loss per evaluated round
};

struct Report {
  std::string baseline;
  double target_loss = 0.0;
  double target_accuracy = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<int> rounds;
  std::vector<SchemeSummary> schemes;
  double t_base = 0.0, t_comp = 0.0;
  bool utility_offsets_calibrated = false;
};

namespace detail {

inline double mean_of(const std::vector<double>& xs) {
  CompensatedSum s;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s.value() / static_cast<double>(xs.size());
}

inline double sd_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  CompensatedSum s;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s.value() / static_cast<double>(xs.size() - 1));
}

inline std::vector<MetricRow> load_metrics(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw InvalidInput(concat("missing metrics file '", p.string(), "'"));
  return read_metrics_csv(is, p.string());
}

/// Client utilities summed over the population for a given realized or
/// modelled loss gap per client.
inline double total_utility(const EquilibriumManifest& m, const std::vector<double>& gain) {
  CompensatedSum s;
  for (std::size_t n = 0; n < m.population.size(); ++n) {
    const auto& p = m.population[n];
    const double q = m.outcome.q[n];
    s += m.outcome.prices[n] * q - p.cost_coeff * q * q + p.intrinsic_pref * gain[n];
  }
  return s.value();
}

}  // namespace detail

/// Summary computed only from the files in a run directory.
inline Report build_report(const std::filesystem::path& dir) {
  const auto cfg = config_from_json(read_json_file((dir / "config.json").string()));
  const auto pop = load_population((dir / "population.txt").string());
  Report rep;
  rep.seeds = run_seeds(cfg);
  rep.t_base = cfg.train.t_base;
  rep.t_comp = cfg.train.t_comp;
  rep.baseline = std::find(cfg.schemes.begin(), cfg.schemes.end(), "uniform") != cfg.schemes.end()
                     ? "uniform"
                     : cfg.schemes.front();
  rep.utility_offsets_calibrated = pop.global_optimum_loss.has_value();

  std::map<std::string, std::vector<std::vector<MetricRow>>> runs;
  std::map<std::string, EquilibriumManifest> manifests;
  for (const auto& s : cfg.schemes) {
    manifests[s] = manifest_from_json(read_json_file((dir / "equilibrium" / (s + ".json")).string()));
    for (auto seed : rep.seeds) {
      auto rows = detail::load_metrics(dir / "metrics" / metrics_name(s, seed));
      if (rows.empty()) throw FormatError(detail::concat("empty metrics for ", s, " seed ", seed));
      if (rep.rounds.empty())
        for (const auto& r : rows) rep.rounds.push_back(r.round);
      if (rows.size() != rep.rounds.size())
        throw FormatError(detail::concat("metrics for ", s, " seed ", seed, " have ", rows.size(),
                                         " rows, expected ", rep.rounds.size()));
      runs[s].push_back(std::move(rows));
    }
  }

  std::vector<double> final_means, final_acc_means;
  for (const auto& s : cfg.schemes) {
    std::vector<double> fl, fa;
    for (const auto& rows : runs[s]) {
      fl.push_back(rows.back().loss);
      fa.push_back(rows.back().accuracy);
    }
    final_means.push_back(detail::mean_of(fl));
    final_acc_means.push_back(detail::mean_of(fa));
  }
  rep.target_loss = cfg.target_loss ? *cfg.target_loss : *std::max_element(final_means.begin(), final_means.end());
  rep.target_accuracy =
      cfg.target_accuracy ? *cfg.target_accuracy : *std::min_element(final_acc_means.begin(), final_acc_means.end());

  for (std::size_t i = 0; i < cfg.schemes.size(); ++i) {
    const auto& s = cfg.schemes[i];
    const auto& m = manifests[s];
    SchemeSummary sum;
    sum.scheme = s;
    sum.runs = runs[s].size();
    std::vector<double> fl;
    for (const auto& rows : runs[s]) {
      fl.push_back(rows.back().loss);
      std::optional<int> rt;
      std::optional<double> tt, ta;
      for (const auto& r : rows) {
        if (!rt && r.loss <= rep.target_loss) {
          rt = r.round;
          tt = r.sim_time;
        }
        if (!ta && r.accuracy >= rep.target_accuracy) ta = r.sim_time;
      }
      sum.rounds_to_target.push_back(rt);
      sum.time_to_target.push_back(tt);
      sum.time_to_accuracy.push_back(ta);
    }
    sum.final_loss_mean = final_means[i];
    sum.final_loss_sd = detail::sd_of(fl);
    sum.final_accuracy_mean = final_acc_means[i];
    for (std::size_t r = 0; r < rep.rounds.size(); ++r) {
      std::vector<double> at;
      for (const auto& rows : runs[s]) at.push_back(rows[r].loss);
      sum.mean_curve.push_back(detail::mean_of(at));
    }
    const std::size_t N = m.population.size();
    std::vector<double> realized(N, 0.0), modelled(N, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      const double local = m.population[n].local_optimum_loss.value_or(0.0);
      realized[n] = local - sum.final_loss_mean;
      const double fstar = pop.global_optimum_loss.value_or(0.0);
      modelled[n] = local - (fstar + m.outcome.bound_value);
    }
    sum.utility_realized = detail::total_utility(m, realized);
    sum.utility_model = std::isfinite(m.outcome.bound_value)
                            ? detail::total_utility(m, modelled)
                            : -std::numeric_limits<double>::infinity();
    sum.negative_payments = m.outcome.negative_payment_count();
    sum.spend = m.outcome.spend;
    sum.bound_value = m.outcome.bound_value;
    rep.schemes.push_back(std::move(sum));
  }
  return rep;
}

namespace detail {

inline std::string fmt(double x) { return format_double(x); }
inline std::string fmt(const std::optional<double>& x) { return x ? format_double(*x) : "NA"; }
inline std::string fmt(const std::optional<int>& x) { return x ? std::to_string(*x) : "NA"; }

/// Mean over seeds that reached the target.
template <typename T>
std::optional<double> reached_mean(const std::vector<std::optional<T>>& xs) {
  std::vector<double> v;
  for (const auto& x : xs)
    if (x) v.push_back(static_cast<double>(*x));
  if (v.empty()) return std::nullopt;
  return mean_of(v);
}

template <typename T>
std::size_t reached_count(const std::vector<std::optional<T>>& xs) {
  return static_cast<std::size_t>(std::count_if(xs.begin(), xs.end(), [](const auto& x) { return x.has_value(); }));
}

/// a reaches the target no later than b; unreached counts as later than any round.
inline bool no_later(const std::optional<int>& a, const std::optional<int>& b) {
  if (!a) return !b;
  return !b || *a <= *b;
}

}  // namespace detail

inline const SchemeSummary& find_scheme(const Report& r, const std::string& name) {
  for (const auto& s : r.schemes)
    if (s.scheme == name) return s;
  throw InvalidInput(detail::concat("report has no scheme '", name, "'"));
}

/// Seeds in which `a` reaches the loss target no later than `b`.
inline std::size_t seeds_no_later(const Report& r, const std::string& a, const std::string& b) {
  const auto& sa = find_scheme(r, a);
  const auto& sb = find_scheme(r, b);
  std::size_t k = 0;
  for (std::size_t i = 0; i < sa.rounds_to_target.size(); ++i)
    k += detail::no_later(sa.rounds_to_target[i], sb.rounds_to_target[i]) ? 1 : 0;
  return k;
}

inline void write_summary_csv(std::ostream& os, const Report& r) {
  using detail::fmt;
  const auto& base = find_scheme(r, r.baseline);
  os << "scheme,runs,final_loss_mean,final_loss_sd,final_accuracy_mean,target_loss,reached_loss_target,"
        "rounds_to_target_mean,time_to_target_mean,target_accuracy,reached_accuracy_target,"
        "time_to_accuracy_mean,utility_realized,utility_gain_vs_baseline,utility_model,negative_payments,"
        "spend,bound_value\n";
  for (const auto& s : r.schemes) {
    os << s.scheme << ',' << s.runs << ',' << fmt(s.final_loss_mean) << ',' << fmt(s.final_loss_sd) << ','
       << fmt(s.final_accuracy_mean) << ',' << fmt(r.target_loss) << ',' << detail::reached_count(s.rounds_to_target)
       << ',' << fmt(detail::reached_mean(s.rounds_to_target)) << ',' << fmt(detail::reached_mean(s.time_to_target))
       << ',' << fmt(r.target_accuracy) << ',' << detail::reached_count(s.time_to_accuracy) << ','
       << fmt(detail::reached_mean(s.time_to_accuracy)) << ',' << fmt(s.utility_realized) << ','
       << fmt(s.utility_realized - base.utility_realized) << ',' << fmt(s.utility_model) << ','
       << s.negative_payments << ',' << fmt(s.spend) << ',' << fmt(s.bound_value) << '\n';
  }
}

inline void write_summary_md(std::ostream& os, const Report& r) {
  using detail::fmt;
  const auto& base = find_scheme(r, r.baseline);
  os << "# Experiment summary\n\n";
  os << "Seeds: " << r.seeds.size() << " (" << r.seeds.front() << " .. " << r.seeds.back() << "). ";
  os << "Simulated time per round: " << fmt(r.t_base) << " + " << fmt(r.t_comp)
     << " x (largest participant shard x E / batch).\n\n";
  os << "Target loss " << fmt(r.target_loss) << ", target accuracy " << fmt(r.target_accuracy)
     << ". Times are means over the seeds that reached the target.\n\n";
  os << "| scheme | final loss (mean +- sd) | final accuracy | reached loss target | rounds to target | "
        "time to target | time to accuracy |\n|---|---|---|---|---|---|---|\n";
  for (const auto& s : r.schemes)
    os << "| " << s.scheme << " | " << fmt(s.final_loss_mean) << " +- " << fmt(s.final_loss_sd) << " | "
       << fmt(s.final_accuracy_mean) << " | " << detail::reached_count(s.rounds_to_target) << "/" << s.runs << " | "
       << fmt(detail::reached_mean(s.rounds_to_target)) << " | " << fmt(detail::reached_mean(s.time_to_target))
       << " | " << fmt(detail::reached_mean(s.time_to_accuracy)) << " |\n";
  os << "\n## Clients\n\n";
  os << "Utility uses the seed-averaged final loss against each client's local-optimum loss"
     << (r.utility_offsets_calibrated ? " (proxy from pooled training)" : " (offsets not calibrated, taken as 0)")
     << ". Gains are relative to " << r.baseline << ".\n\n";
  os << "| scheme | total utility | gain | model utility | negative payments | spend | bound |\n"
        "|---|---|---|---|---|---|---|\n";
  for (const auto& s : r.schemes)
    os << "| " << s.scheme << " | " << fmt(s.utility_realized) << " | " << fmt(s.utility_realized - base.utility_realized)
       << " | " << fmt(s.utility_model) << " | " << s.negative_payments << " | " << fmt(s.spend) << " | "
       << fmt(s.bound_value) << " |\n";
  os << "\n## Paired seeds\n\n";
  for (const auto& s : r.schemes)
    if (s.scheme != r.baseline)
      os << "- " << s.scheme << " reaches the loss target no later than " << r.baseline << " in "
         << seeds_no_later(r, s.scheme, r.baseline) << "/" << s.runs << " seeds\n";
  os << "\n## Seed-averaged loss\n\nround";
  for (const auto& s : r.schemes) os << ',' << s.scheme;
  os << '\n';
  for (std::size_t i = 0; i < r.rounds.size(); ++i) {
    os << r.rounds[i];
    for (const auto& s : r.schemes) os << ',' << fmt(s.mean_curve[i]);
    os << '\n';
  }
}

/// Rebuilds summary.csv and summary.md in `dir` from the saved artifacts.
inline Report write_report(const std::filesystem::path& dir) {
  auto rep = build_report(dir);
  std::ofstream csv(dir / "summary.csv"), md(dir / "summary.md");
  if (!csv || !md) throw Error(detail::concat("cannot write summary files in '", dir.string(), "'"));
  write_summary_csv(csv, rep);
  write_summary_md(md, rep);
  return rep;
}

// Full pipeline --------------------------------------------------------------

struct ExperimentLog {
  std::vector<std::string> lines;
  void operator()(const std::string& s) { lines.push_back(s); }
};

/// Runs every stage and writes the run directory:
///   config.json, dataset.fpds, calibration.json, population.txt,
///   equilibrium/<scheme>.json, metrics/<scheme>_seed<k>.csv, summary.csv, summary.md
template <typename Log>
Report run_experiment(const ExperimentConfig& c, const std::filesystem::path& dir, Log&& log) {
  namespace fs = std::filesystem;
  validate(c);
  fs::create_directories(dir / "equilibrium");
  fs::create_directories(dir / "metrics");
  write_json_file((dir / "config.json").string(), to_json(c));

  const auto ds = build_dataset(c);
  save_dataset((dir / "dataset.fpds").string(), ds);
  log(detail::concat("dataset: ", ds.clients(), " clients, ", ds.total(), " samples, ", ds.test.size(), " test"));

  CalibrationRecord rec;
  const auto pop = calibrate_population(ds, c, &rec);
  for (const auto& w : rec.warnings) log("warning: " + w);
  write_json_file((dir / "calibration.json").string(), rec.to_json());
  save_population((dir / "population.txt").string(), pop);
  log(detail::concat("calibrated: alpha = ", pop.constants.alpha, rec.alpha_fitted ? " (fitted)" : " (configured)"));

  for (const auto& s : c.schemes) {
    const auto m = solve_scheme(pop, c.economics.budget, s);
    write_json_file((dir / "equilibrium" / (s + ".json")).string(), to_json(m));
    log(detail::concat(s, ": spend ", m.outcome.spend, ", bound ", m.outcome.bound_value, ", negative payments ",
                       m.outcome.negative_payment_count()));
    for (auto seed : run_seeds(c)) {
      const auto metrics = train_scheme(ds, m, c.train, seed);
      std::ofstream os(dir / "metrics" / metrics_name(s, seed));
      if (!os) throw Error(detail::concat("cannot write metrics for ", s, " seed ", seed));
      write_metrics_csv(os, detail::concat(s, "-seed", seed), seed, metrics);
    }
  }
  return write_report(dir);
}

inline Report run_experiment(const ExperimentConfig& c, const std::filesystem::path& dir) {
  return run_experiment(c, dir, [](const std::string&) {});
}

}  // namespace fedprice
