// Command-line front end: gen-data, calibrate, solve, train, experiment, report.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "fedprice/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedprice;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kInvalid = 2, kFormat = 3, kInfeasible = 4, kSolver = 5 };

struct CommonOptions {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<int> repeats;
  std::optional<double> budget;
  std::string scheme;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON experiment config merged over the preset")
      ->envname("FEDPRICE_CONFIG")
      ->check(CLI::ExistingFile);
  cmd->add_option("--preset", o.preset, "Base preset")
      ->envname("FEDPRICE_PRESET")
      ->check(CLI::IsMember({"setup1", "setup2", "setup3", "desk"}));
  cmd->add_option("--seed", o.seed, "Master seed")->envname("FEDPRICE_SEED");
  cmd->add_option("--repeats", o.repeats, "Training seeds per scheme")
      ->envname("FEDPRICE_REPEATS")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--budget", o.budget, "Server budget B")->envname("FEDPRICE_BUDGET");
  cmd->add_option("--scheme", o.scheme, "Pricing scheme")
      ->envname("FEDPRICE_SCHEME")
      ->check(CLI::IsMember({"optimal", "uniform", "weighted"}));
}

ExperimentConfig resolve(const CommonOptions& o) {
  Json overrides = o.config.empty() ? Json::object() : read_json_file(o.config);
  if (!overrides.is_object()) throw InvalidInput(detail::concat("config '", o.config, "' must hold a JSON object"));
  if (!o.preset.empty()) overrides["setup"] = o.preset;
  if (o.seed) overrides["seed"] = *o.seed;
  if (o.repeats) overrides["repeats"] = *o.repeats;
  if (o.budget) overrides["economics"]["budget"] = *o.budget;
  if (!o.scheme.empty()) overrides["schemes"] = Json::array({o.scheme});
  return resolve_config(overrides);
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incentive-aware federated learning: pricing game solver and FedAvg simulator"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string out, dataset_path, population_path, manifest_path, run_dir;

  auto* gen = app.add_subcommand("gen-data", "Generate or partition the federated dataset");
  add_common(gen, common);
  gen->add_option("--out", out, "Dataset container path")->envname("FEDPRICE_OUT")->required();

  auto* cal = app.add_subcommand("calibrate", "Estimate G, alpha and local optima; write the population file");
  add_common(cal, common);
  cal->add_option("--dataset", dataset_path, "Dataset container")->required()->check(CLI::ExistingFile);
  cal->add_option("--out", out, "Population file path")->envname("FEDPRICE_OUT")->required();

  auto* solve = app.add_subcommand("solve", "Price one scheme under the budget; write the run manifest");
  add_common(solve, common);
  solve->add_option("--population", population_path, "Population file")->required()->check(CLI::ExistingFile);
  solve->add_option("--out", out, "Manifest path")->envname("FEDPRICE_OUT")->required();

  auto* tr = app.add_subcommand("train", "Simulate FedAvg under a manifest's participation levels");
  add_common(tr, common);
  tr->add_option("--dataset", dataset_path, "Dataset container")->required()->check(CLI::ExistingFile);
  tr->add_option("--manifest", manifest_path, "Equilibrium manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out, "Directory for metric CSVs")->envname("FEDPRICE_OUT")->required();

  auto* exp = app.add_subcommand("experiment", "Run the full pipeline into a run directory");
  add_common(exp, common);
  exp->add_option("--out", out, "Run directory")->envname("FEDPRICE_OUT")->required();

  auto* rep = app.add_subcommand("report", "Recompute summary.csv and summary.md from a run directory");
  rep->add_option("run_dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve(common);
      const auto ds = build_dataset(cfg);
      save_dataset(out, ds);
      log_line(detail::concat("wrote ", out, ": ", ds.clients(), " clients, ", ds.total(), " samples"));
    } else if (cal->parsed()) {
      const auto cfg = resolve(common);
      const auto ds = load_dataset(dataset_path);
      CalibrationRecord record;
      const auto pop = calibrate_population(ds, cfg, &record);
      for (const auto& w : record.warnings) log_line("warning: " + w);
      save_population(out, pop);
      log_line(detail::concat("wrote ", out, ": alpha = ", pop.constants.alpha));
    } else if (solve->parsed()) {
      const auto cfg = resolve(common);
      const auto pop = load_population(population_path);
      const auto m = solve_scheme(pop, cfg.economics.budget, cfg.schemes.front());
      write_json_file(out, to_json(m));
      log_line(detail::concat("wrote ", out, ": ", m.outcome.scheme, " spend ", m.outcome.spend, ", bound ",
                              m.outcome.bound_value));
    } else if (tr->parsed()) {
      const auto cfg = resolve(common);
      const auto ds = load_dataset(dataset_path);
      const auto m = manifest_from_json(read_json_file(manifest_path));
      fs::create_directories(out);
      for (auto seed : run_seeds(cfg)) {
        const auto metrics = train_scheme(ds, m, cfg.train, seed);
        const auto path = fs::path(out) / metrics_name(m.outcome.scheme, seed);
        std::ofstream os(path);
        if (!os) throw Error(detail::concat("cannot write '", path.string(), "'"));
        write_metrics_csv(os, detail::concat(m.outcome.scheme, "-seed", seed), seed, metrics);
        log_line(detail::concat("wrote ", path.string(), ": final loss ", metrics.back().loss));
      }
    } else if (exp->parsed()) {
      const auto cfg = resolve(common);
      run_experiment(cfg, out, log_line);
      std::ifstream md(fs::path(out) / "summary.md");
      std::cout << md.rdbuf();
    } else if (rep->parsed()) {
      write_report(run_dir);
      std::ifstream md(fs::path(run_dir) / "summary.md");
      std::cout << md.rdbuf();
    }
  } catch (const InfeasibleBudget& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInfeasible;
  } catch (const SolverFailure& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kSolver;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFormat;
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}
