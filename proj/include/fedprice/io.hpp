#pragma once

// Population key/value files and JSON run manifests.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedprice/core.hpp"
#include "fedprice/fltrain.hpp"
#include "fedprice/game.hpp"

namespace fedprice {

using Json = nlohmann::json;

// Population file ------------------------------------------------------------
//
//   # comment
//   alpha = 12.5
//   beta = 0
//   rounds = 200
//   local_steps = 10
//   q_floor = 0.01
//   F_star = 0.41                      (optional)
//   client 0 d=120 G=2.5 c=50 v=4000 q_max=1 F_local=0.93
//
// Client records must appear in index order starting at 0. Weights are
// recomputed from d on read.

struct PopulationFile {
  GameConstants constants;
  Population clients;
  std::optional<double> global_optimum_loss;  // pooled-training proxy for F*

  bool operator==(const PopulationFile&) const = default;
};

inline void write_population(std::ostream& os, const PopulationFile& f) {
  using detail::format_double;
  os << "# fedprice population\n";
  os << "alpha = " << format_double(f.constants.alpha) << '\n';
  os << "beta = " << format_double(f.constants.beta) << '\n';
  os << "rounds = " << format_double(f.constants.rounds) << '\n';
  os << "local_steps = " << format_double(f.constants.local_steps) << '\n';
  os << "q_floor = " << format_double(f.constants.q_floor) << '\n';
  if (f.global_optimum_loss) os << "F_star = " << format_double(*f.global_optimum_loss) << '\n';
  for (const auto& p : f.clients) {
    os << "client " << p.index << " d=" << format_double(p.datasize)
       << " G=" << format_double(p.grad_bound) << " c=" << format_double(p.cost_coeff)
       << " v=" << format_double(p.intrinsic_pref) << " q_max=" << format_double(p.q_max);
    if (p.local_optimum_loss) os << " F_local=" << format_double(*p.local_optimum_loss);
    os << '\n';
  }
}

inline PopulationFile read_population(std::istream& is, const std::string& source) {
  PopulationFile f;
  std::vector<double> d, G, c, v, qmax;
  std::vector<std::optional<double>> flocal;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = detail::concat(source, ":", lineno);
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string head;
    if (!(ss >> head)) continue;
    if (head == "client") {
      std::string idx;
      if (!(ss >> idx)) throw FormatError(where + ": client record without an index");
      const auto n = detail::parse_int<std::size_t>(idx, where);
      if (n != d.size())
        throw FormatError(detail::concat(where, ": expected client ", d.size(), ", found client ", n));
      std::optional<double> fd, fG, fc, fv, fq, fl;
      std::string tok;
      while (ss >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos)
          throw FormatError(detail::concat(where, ": expected key=value, got '", tok, "'"));
        const std::string key = tok.substr(0, eq);
        const double value = detail::parse_double(tok.substr(eq + 1), where);
        std::optional<double>* slot = key == "d"         ? &fd
                                      : key == "G"       ? &fG
                                      : key == "c"       ? &fc
                                      : key == "v"       ? &fv
                                      : key == "q_max"   ? &fq
                                      : key == "F_local" ? &fl
                                                         : nullptr;
        if (!slot) throw FormatError(detail::concat(where, ": unknown client field '", key, "'"));
        if (slot->has_value())
          throw FormatError(detail::concat(where, ": duplicate client field '", key, "'"));
        *slot = value;
      }
      for (auto [name, slot] : {std::pair{"d", &fd}, std::pair{"G", &fG}, std::pair{"c", &fc},
                                std::pair{"v", &fv}, std::pair{"q_max", &fq}})
        if (!slot->has_value())
          throw FormatError(detail::concat(where, ": client ", n, " lacks field '", name, "'"));
      d.push_back(*fd);
      G.push_back(*fG);
      c.push_back(*fc);
      v.push_back(*fv);
      qmax.push_back(*fq);
      flocal.push_back(fl);
      continue;
    }
    std::string eq, value, extra;
    if (!(ss >> eq >> value) || eq != "=" || (ss >> extra))
      throw FormatError(detail::concat(where, ": expected 'key = value', got '", line, "'"));
    const double x = detail::parse_double(value, where);
    if (head == "alpha")
      f.constants.alpha = x;
    else if (head == "beta")
      f.constants.beta = x;
    else if (head == "rounds")
      f.constants.rounds = x;
    else if (head == "local_steps")
      f.constants.local_steps = x;
    else if (head == "q_floor")
      f.constants.q_floor = x;
    else if (head == "F_star")
      f.global_optimum_loss = x;
    else
      throw FormatError(detail::concat(where, ": unknown key '", head, "'"));
  }
  if (d.empty()) throw FormatError(source + ": no client records");
  try {
    f.clients = make_population(d, G, c, v, qmax);
    validate(f.clients, f.constants);
  } catch (const InvalidInput& e) {
    throw FormatError(detail::concat(source, ": ", e.what()));
  }
  for (std::size_t n = 0; n < flocal.size(); ++n) f.clients[n].local_optimum_loss = flocal[n];
  return f;
}

inline void save_population(const std::string& path, const PopulationFile& f) {
  std::ofstream os(path);
  if (!os) throw Error(detail::concat("cannot write '", path, "'"));
  write_population(os, f);
}

inline PopulationFile load_population(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput(detail::concat("cannot open '", path, "'"));
  return read_population(is, path);
}

// JSON -----------------------------------------------------------------------

namespace detail {

/// Non-finite values become the strings "inf", "-inf", "nan".
inline Json number(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

inline double number(const Json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    throw FormatError(concat("expected a number, got '", s, "'"));
  }
  return j.get<double>();
}

inline Json numbers(const std::vector<double>& xs) {
  Json a = Json::array();
  for (double x : xs) a.push_back(number(x));
  return a;
}

inline std::vector<double> numbers(const Json& j) {
  std::vector<double> out;
  for (const auto& x : j) out.push_back(number(x));
  return out;
}

inline Json optional_number(const std::optional<double>& x) {
  return x ? number(*x) : Json(nullptr);
}

inline std::optional<double> optional_number(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return number(j);
}

}  // namespace detail

inline Json to_json(const ClientProfile& p) {
  return {{"index", p.index},
          {"d", detail::number(p.datasize)},
          {"a", detail::number(p.weight)},
          {"G", detail::number(p.grad_bound)},
          {"c", detail::number(p.cost_coeff)},
          {"v", detail::number(p.intrinsic_pref)},
          {"q_max", detail::number(p.q_max)},
          {"F_local", detail::optional_number(p.local_optimum_loss)}};
}

inline ClientProfile client_from_json(const Json& j) {
  ClientProfile p;
  p.index = j.at("index").get<std::size_t>();
  p.datasize = detail::number(j.at("d"));
  p.weight = detail::number(j.at("a"));
  p.grad_bound = detail::number(j.at("G"));
  p.cost_coeff = detail::number(j.at("c"));
  p.intrinsic_pref = detail::number(j.at("v"));
  p.q_max = detail::number(j.at("q_max"));
  p.local_optimum_loss = detail::optional_number(j.at("F_local"));
  return p;
}

inline Json to_json(const BoundConstituents& b) {
  return {{"L", detail::number(b.smoothness)},
          {"mu", detail::number(b.strong_convexity)},
          {"sigma", detail::numbers(b.sigma)},
          {"F_star", detail::number(b.global_min)},
          {"F_local", detail::numbers(b.local_mins)},
          {"init_dist_sq", detail::number(b.init_dist_sq)}};
}

inline BoundConstituents constituents_from_json(const Json& j) {
  BoundConstituents b;
  b.smoothness = detail::number(j.at("L"));
  b.strong_convexity = detail::number(j.at("mu"));
  b.sigma = detail::numbers(j.at("sigma"));
  b.global_min = detail::number(j.at("F_star"));
  b.local_mins = detail::numbers(j.at("F_local"));
  b.init_dist_sq = detail::number(j.at("init_dist_sq"));
  return b;
}

inline Json to_json(const GameConstants& k) {
  return {{"alpha", detail::number(k.alpha)},
          {"beta", detail::number(k.beta)},
          {"R", detail::number(k.rounds)},
          {"E", detail::number(k.local_steps)},
          {"q_floor", detail::number(k.q_floor)},
          {"constituents", k.constituents ? to_json(*k.constituents) : Json(nullptr)}};
}

inline GameConstants constants_from_json(const Json& j) {
  GameConstants k;
  k.alpha = detail::number(j.at("alpha"));
  k.beta = detail::number(j.at("beta"));
  k.rounds = detail::number(j.at("R"));
  k.local_steps = detail::number(j.at("E"));
  k.q_floor = detail::number(j.at("q_floor"));
  if (!j.at("constituents").is_null()) k.constituents = constituents_from_json(j.at("constituents"));
  return k;
}

inline Json to_json(const ParticipationVector& q) { return detail::numbers(q.q); }
inline Json to_json(const PricingVector& p) { return detail::numbers(p.price); }

inline Json to_json(const SolveDiagnostics& d) {
  return {{"solver", d.solver},
          {"iterations", d.iterations},
          {"budget_slack", d.budget_slack},
          {"budget_residual", detail::number(d.budget_residual)}};
}

inline SolveDiagnostics diagnostics_from_json(const Json& j) {
  SolveDiagnostics d;
  d.solver = j.at("solver").get<std::string>();
  d.iterations = j.at("iterations").get<int>();
  d.budget_slack = j.at("budget_slack").get<bool>();
  d.budget_residual = detail::number(j.at("budget_residual"));
  return d;
}

inline Json to_json(const EquilibriumResult& r) {
  Json interior = Json::array();
  for (bool b : r.interior) interior.push_back(b);
  return {{"q", to_json(r.q_star)},
          {"P", to_json(r.p_star)},
          {"lambda", detail::number(r.lambda_star)},
          {"v_threshold", detail::number(r.v_threshold)},
          {"spend", detail::number(r.spend)},
          {"bound_value", detail::number(r.bound_value)},
          {"payment", detail::numbers(r.payment)},
          {"interior", interior},
          {"diagnostics", to_json(r.diagnostics)}};
}

inline EquilibriumResult equilibrium_from_json(const Json& j) {
  EquilibriumResult r;
  r.q_star.q = detail::numbers(j.at("q"));
  r.p_star.price = detail::numbers(j.at("P"));
  r.lambda_star = detail::number(j.at("lambda"));
  r.v_threshold = detail::number(j.at("v_threshold"));
  r.spend = detail::number(j.at("spend"));
  r.bound_value = detail::number(j.at("bound_value"));
  r.payment = detail::numbers(j.at("payment"));
  for (const auto& b : j.at("interior")) r.interior.push_back(b.get<bool>());
  r.diagnostics = diagnostics_from_json(j.at("diagnostics"));
  return r;
}

inline Json to_json(const SchemeOutcome& o) {
  return {{"scheme", o.scheme},
          {"q", to_json(o.q)},
          {"P", to_json(o.prices)},
          {"payment", detail::numbers(o.payment)},
          {"spend", detail::number(o.spend)},
          {"bound_value", detail::number(o.bound_value)},
          {"lambda", detail::optional_number(o.lambda_star)},
          {"v_threshold", detail::optional_number(o.v_threshold)},
          {"negative_payments", o.negative_payment_count()}};
}

inline SchemeOutcome outcome_from_json(const Json& j) {
  SchemeOutcome o;
  o.scheme = j.at("scheme").get<std::string>();
  o.q.q = detail::numbers(j.at("q"));
  o.prices.price = detail::numbers(j.at("P"));
  o.payment = detail::numbers(j.at("payment"));
  o.spend = detail::number(j.at("spend"));
  o.bound_value = detail::number(j.at("bound_value"));
  o.lambda_star = detail::optional_number(j.at("lambda"));
  o.v_threshold = detail::optional_number(j.at("v_threshold"));
  return o;
}

// Equilibrium manifest -------------------------------------------------------

inline constexpr const char* kManifestFormat = "fedprice-equilibrium";
inline constexpr int kManifestVersion = 1;

struct EquilibriumManifest {
  double budget = 0.0;
  GameConstants constants;
  Population population;
  SchemeOutcome outcome;
  std::optional<EquilibriumResult> equilibrium;  // present for the optimal scheme

  bool operator==(const EquilibriumManifest&) const = default;
};

inline Json to_json(const EquilibriumManifest& m) {
  Json pop = Json::array();
  for (const auto& p : m.population) pop.push_back(to_json(p));
  return {{"format", kManifestFormat},
          {"version", kManifestVersion},
          {"budget", detail::number(m.budget)},
          {"constants", to_json(m.constants)},
          {"population", pop},
          {"outcome", to_json(m.outcome)},
          {"equilibrium", m.equilibrium ? to_json(*m.equilibrium) : Json(nullptr)}};
}

inline EquilibriumManifest manifest_from_json(const Json& j) {
  try {
    if (j.at("format").get<std::string>() != kManifestFormat)
      throw FormatError("not an equilibrium manifest");
    if (j.at("version").get<int>() != kManifestVersion)
      throw FormatError(detail::concat("unsupported manifest version ", j.at("version").dump()));
    EquilibriumManifest m;
    m.budget = detail::number(j.at("budget"));
    m.constants = constants_from_json(j.at("constants"));
    for (const auto& p : j.at("population")) m.population.push_back(client_from_json(p));
    m.outcome = outcome_from_json(j.at("outcome"));
    if (!j.at("equilibrium").is_null()) m.equilibrium = equilibrium_from_json(j.at("equilibrium"));
    return m;
  } catch (const Json::exception& e) {
    throw FormatError(detail::concat("malformed manifest: ", e.what()));
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput(detail::concat("cannot open '", path, "'"));
  try {
    return Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw FormatError(detail::concat(path, ": ", e.what()));
  }
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream os(path);
  if (!os) throw Error(detail::concat("cannot write '", path, "'"));
  os << j.dump(2) << '\n';
}

}  // namespace fedprice
