#include <gtest/gtest.h>

#include <limits>
#include <sstream>

#include "fedprice/io.hpp"
#include "test_support.hpp"

using namespace fedprice;

namespace {

PopulationFile random_file(Rng& rng, std::size_t n) {
  PopulationFile f;
  f.clients = fedprice::testing::random_population(rng, n);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  f.constants.alpha = 1.0 + 100 * u(rng);
  f.constants.beta = u(rng);
  f.constants.rounds = 200;
  f.constants.local_steps = 10;
  f.constants.q_floor = 0.01;
  for (auto& p : f.clients)
    if (u(rng) < 0.5) p.local_optimum_loss = u(rng) / 3.0;
  if (u(rng) < 0.5) f.global_optimum_loss = u(rng) / 7.0;
  return f;
}

}  // namespace

TEST(PopulationFile, RoundTripsFieldEqual) {
  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    const auto f = random_file(rng, 1 + t % 9);
    std::stringstream ss;
    write_population(ss, f);
    EXPECT_EQ(read_population(ss, "mem"), f) << ss.str();
  }
}

TEST(PopulationFile, ReadsHandWrittenFile) {
  std::stringstream ss(
      "# two clients\n"
      "alpha = 7\n"
      "rounds = 100   # R\n"
      "\n"
      "client 0 d=3 G=1 c=2 v=0 q_max=1\n"
      "client 1 d=1 G=2 c=1 v=5 q_max=0.5 F_local=0.25\n");
  const auto f = read_population(ss, "hand");
  ASSERT_EQ(f.clients.size(), 2u);
  EXPECT_EQ(f.constants.alpha, 7.0);
  EXPECT_EQ(f.constants.rounds, 100.0);
  EXPECT_EQ(f.clients[0].weight, 0.75);
  EXPECT_EQ(f.clients[1].q_max, 0.5);
  EXPECT_EQ(f.clients[1].local_optimum_loss, 0.25);
  EXPECT_FALSE(f.clients[0].local_optimum_loss.has_value());
}

TEST(PopulationFile, ErrorsCarryLineNumbers) {
  const auto fails_at = [](const std::string& text, const std::string& needle) {
    std::stringstream ss(text);
    try {
      read_population(ss, "pop");
      ADD_FAILURE() << "accepted: " << text;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  fails_at("gamma = 1\nclient 0 d=1 G=1 c=1 v=0 q_max=1\n", "pop:1");
  fails_at("client 0 d=1 G=1 c=1 q_max=1\n", "lacks field 'v'");
  fails_at("client 1 d=1 G=1 c=1 v=0 q_max=1\n", "expected client 0");
  fails_at("client 0 d=1 G=1 c=1 v=0 q_max=1 w=3\n", "unknown client field");
  fails_at("client 0 d=x G=1 c=1 v=0 q_max=1\n", "not a number");
  fails_at("client 0 d=1 G=-1 c=1 v=0 q_max=1\n", "G must be > 0");
  fails_at("# nothing\n", "no client records");
}

TEST(Manifest, OptimalSolveRoundTrips) {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const auto pop = fedprice::testing::random_population(rng, 2 + t % 6);
    auto k = fedprice::testing::unit_constants(1.0 + t);
    if (t % 3 == 0) {
      BoundConstituents b;
      b.smoothness = 2.5;
      b.strong_convexity = 0.1;
      b.sigma.assign(pop.size(), 0.3);
      b.local_mins.assign(pop.size(), 0.2);
      k.constituents = b;
    }
    const double budget = total_spend(ParticipationVector{std::vector<double>(pop.size(), 0.4)}, pop, k);
    const auto r = server_solve(pop, k, budget);
    EquilibriumManifest m{budget, k, pop, to_outcome(r), r};
    const auto text = to_json(m).dump(2);
    EXPECT_EQ(manifest_from_json(Json::parse(text)), m);
  }
}

TEST(Manifest, BaselineWithUnboundedObjectiveRoundTrips) {
  Rng rng(6);
  const auto pop = fedprice::testing::random_population(rng, 4, false);
  const auto k = fedprice::testing::unit_constants(2.0);
  SchemeOutcome o = respond_to_prices("uniform", PricingVector{{0.0, 0.5, 1.0, 0.0}}, pop, k);
  ASSERT_EQ(o.bound_value, std::numeric_limits<double>::infinity());
  EquilibriumManifest m{3.0, k, pop, o, std::nullopt};
  const auto back = manifest_from_json(Json::parse(to_json(m).dump()));
  EXPECT_EQ(back, m);
}

TEST(Manifest, RejectsForeignDocuments) {
  EXPECT_THROW(manifest_from_json(Json::parse(R"({"format":"other","version":1})")), FormatError);
  EXPECT_THROW(manifest_from_json(Json::parse(R"({"format":"fedprice-equilibrium"})")), FormatError);
}
