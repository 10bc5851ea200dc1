// Prices a small synthetic federation three ways and trains under each scheme.

#include <iostream>

#include "fedprice/experiment.hpp"

using namespace fedprice;

int main() {
  ExperimentConfig cfg = preset("desk");
  cfg.data.synthetic.total_samples = 1500;
  cfg.train.rounds = 60;
  cfg.calibration.pilot_rounds = 5;

  const auto ds = build_dataset(cfg);
  const auto pop = calibrate_population(ds, cfg);
  std::cout << "alpha " << pop.constants.alpha << ", budget " << cfg.economics.budget << "\n";

  for (const auto& scheme : cfg.schemes) {
    const auto m = solve_scheme(pop, cfg.economics.budget, scheme);
    const auto metrics = train_scheme(ds, m, cfg.train, cfg.seed);
    std::cout << scheme << ": spend " << m.outcome.spend << ", bound " << m.outcome.bound_value
              << ", negative payments " << m.outcome.negative_payment_count() << ", final loss "
              << metrics.back().loss << ", accuracy " << metrics.back().accuracy << "\n";
  }
}
