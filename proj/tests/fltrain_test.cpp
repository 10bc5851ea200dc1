#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "fedprice/data.hpp"
#include "fedprice/fltrain.hpp"

using namespace fedprice;

namespace {

Shard separable_shard() {
  Shard s;
  s.features.resize(40, 2);
  s.labels.resize(40);
  Rng rng(11);
  std::normal_distribution<double> noise(0.0, 0.2);
  for (int i = 0; i < 40; ++i) {
    const int y = i % 2;
    s.features(i, 0) = (y ? 1.5 : -1.5) + noise(rng);
    s.features(i, 1) = noise(rng);
    s.labels[static_cast<std::size_t>(i)] = y;
  }
  return s;
}

FederatedDataset small_dataset(std::uint64_t seed = 3) {
  SyntheticConfig cfg;
  cfg.clients = 4;
  cfg.dim = 8;
  cfg.classes = 3;
  cfg.total_samples = 200;
  cfg.seed = seed;
  return gen_synthetic(cfg);
}

Population population_of(const FederatedDataset& ds) {
  const auto d = ds.datasizes();
  const std::vector<double> ones(d.size(), 1.0);
  return make_population(d, ones, ones, std::vector<double>(d.size(), 0.0), ones);
}

}  // namespace

TEST(LocalSgd, ZeroStepSizeLeavesModelUnchanged) {
  const auto shard = separable_shard();
  ModelState w = ModelState::zeros(2, 2);
  w.w(0, 0) = 0.3;
  Rng rng(1);
  EXPECT_EQ(local_sgd(w, shard, 5, 8, 0.0, 0.0, rng), w.w);
}

TEST(LocalSgd, ZeroStepsLeavesModelUnchanged) {
  const auto shard = separable_shard();
  ModelState w = ModelState::zeros(2, 2);
  w.w(1, 2) = -0.7;
  Rng rng(1);
  EXPECT_EQ(local_sgd(w, shard, 0, 8, 0.1, 1e-4, rng), w.w);
}

TEST(LocalSgd, ReducesLossOnSeparableShard) {
  const auto shard = separable_shard();
  const ModelState w = ModelState::zeros(2, 2);
  Rng rng(5);
  const auto after = local_sgd(w, shard, 20, 8, 0.5, 1e-4, rng);
  EXPECT_LT(shard_loss(after, shard, 1e-4), shard_loss(w.w, shard, 1e-4));
}

TEST(LocalSgd, EmptyShardRejected) {
  Shard empty;
  empty.features.resize(0, 2);
  Rng rng(1);
  EXPECT_THROW(local_sgd(ModelState::zeros(2, 2), empty, 1, 1, 0.1, 0.0, rng), InvalidInput);
}

TEST(LocalSgd, ObserverSeesEveryStep) {
  const auto shard = separable_shard();
  Rng rng(2);
  int calls = 0;
  local_sgd(ModelState::zeros(2, 2), shard, 7, 4, 0.1, 0.0, rng, [&](double g) {
    EXPECT_GT(g, 0.0);
    ++calls;
  });
  EXPECT_EQ(calls, 7);
}

TEST(LocalSgd, FullBatchMatchesGradientStep) {
  const auto shard = separable_shard();
  ModelState w = ModelState::zeros(2, 2);
  w.w(0, 1) = 0.2;
  Rng rng(1);
  const auto got = local_sgd(w, shard, 1, 1000, 0.3, 1e-3, rng);
  const Eigen::MatrixXd want = w.w - 0.3 * shard_gradient(w.w, shard, 1e-3);
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Gradient, MatchesFiniteDifferences) {
  const auto ds = small_dataset();
  Eigen::MatrixXd w = Eigen::MatrixXd::Random(ds.classes, ds.dim + 1) * 0.3;
  const auto g = shard_gradient(w, ds.shards[0], 1e-2);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      Eigen::MatrixXd wp = w, wm = w;
      wp(i, j) += h;
      wm(i, j) -= h;
      const double fd =
          (shard_loss(wp, ds.shards[0], 1e-2) - shard_loss(wm, ds.shards[0], 1e-2)) / (2 * h);
      EXPECT_NEAR(g(i, j), fd, 1e-7);
    }
}

TEST(SampleParticipants, AllOnesGivesEveryone) {
  Rng rng(9);
  const ParticipationVector q{{1.0, 1.0, 1.0, 1.0}};
  for (int t = 0; t < 1000; ++t)
    EXPECT_EQ(sample_participants(q, rng), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(SampleParticipants, AllZerosGivesNobody) {
  Rng rng(9);
  const ParticipationVector q{{0.0, 0.0, 0.0}};
  for (int t = 0; t < 1000; ++t) EXPECT_TRUE(sample_participants(q, rng).empty());
}

TEST(SampleParticipants, InclusionFrequencyWithinThreeSigma) {
  Rng rng(21);
  const ParticipationVector q{{0.05, 0.3, 0.5, 0.77, 0.99}};
  const int draws = 100000;
  std::vector<int> hits(q.size(), 0);
  for (int t = 0; t < draws; ++t)
    for (auto n : sample_participants(q, rng)) ++hits[n];
  for (std::size_t n = 0; n < q.size(); ++n) {
    const double sigma = std::sqrt(q[n] * (1 - q[n]) / draws);
    EXPECT_NEAR(hits[n] / static_cast<double>(draws), q[n], 3 * sigma) << "client " << n;
  }
}

TEST(SampleParticipants, RejectsOutOfRange) {
  Rng rng(1);
  EXPECT_THROW(sample_participants(ParticipationVector{{0.5, 1.2}}, rng), InvalidInput);
}

TEST(Aggregate, FullParticipationIsWeightedAverage) {
  const auto pop = make_population({1, 2, 5}, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1});
  const ModelState prev{Eigen::MatrixXd::Constant(2, 3, 0.5), 4};
  std::map<std::size_t, Eigen::MatrixXd> up;
  Eigen::MatrixXd avg = Eigen::MatrixXd::Zero(2, 3);
  for (std::size_t n = 0; n < 3; ++n) {
    up[n] = Eigen::MatrixXd::Constant(2, 3, static_cast<double>(n + 1));
    avg += pop[n].weight * up[n];
  }
  const auto next = aggregate(prev, up, ParticipationVector{{1, 1, 1}}, pop);
  EXPECT_EQ(next.round, 5);
  EXPECT_LT((next.w - avg).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Aggregate, EmptySetKeepsModel) {
  const auto pop = make_population({1, 1}, {1, 1}, {1, 1}, {0, 0}, {1, 1});
  const ModelState prev{Eigen::MatrixXd::Constant(2, 3, 0.25), 0};
  const auto next = aggregate(prev, {}, ParticipationVector{{0.5, 0.5}}, pop);
  EXPECT_EQ(next.w, prev.w);
}

TEST(Aggregate, UpdateFromZeroProbabilityClientRejected) {
  const auto pop = make_population({1, 1}, {1, 1}, {1, 1}, {0, 0}, {1, 1});
  const ModelState prev{Eigen::MatrixXd::Zero(2, 3), 0};
  std::map<std::size_t, Eigen::MatrixXd> up{{1, Eigen::MatrixXd::Ones(2, 3)}};
  EXPECT_THROW(aggregate(prev, up, ParticipationVector{{0.5, 0.0}}, pop), DomainError);
}

TEST(Aggregate, MonteCarloMeanIsFullParticipationAverage) {
  const std::size_t N = 4;
  const auto pop = make_population({3, 1, 2, 4}, {1, 1, 1, 1}, {1, 1, 1, 1}, {0, 0, 0, 0},
                                   {1, 1, 1, 1});
  const ParticipationVector q{{0.25, 0.5, 0.7, 1.0}};
  Rng rng(17);
  std::normal_distribution<double> z;
  const ModelState prev{Eigen::MatrixXd::Zero(2, 6), 0};
  std::map<std::size_t, Eigen::MatrixXd> all;
  Eigen::MatrixXd wbar = Eigen::MatrixXd::Zero(2, 6);
  for (std::size_t n = 0; n < N; ++n) {
    all[n] = Eigen::MatrixXd::NullaryExpr(2, 6, [&] { return z(rng); });
    wbar += pop[n].weight * all[n];
  }
  const int draws = 20000;
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(2, 6), sq = sum;
  for (int t = 0; t < draws; ++t) {
    std::map<std::size_t, Eigen::MatrixXd> up;
    for (auto n : sample_participants(q, rng)) up[n] = all[n];
    const auto w = aggregate(prev, up, q, pop).w;
    sum += w;
    sq += w.cwiseProduct(w);
  }
  const Eigen::MatrixXd mean = sum / draws;
  const Eigen::MatrixXd se =
      ((sq / draws - mean.cwiseProduct(mean)) / draws).cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index i = 0; i < mean.size(); ++i)
    EXPECT_LE(std::abs(mean(i) - wbar(i)), 3 * se(i) + 1e-12) << "component " << i;
}

TEST(Aggregate, VarianceShrinksWithParticipationAndRespectsBound) {
  const std::size_t N = 6;
  const auto pop = make_population({5, 1, 2, 3, 8, 1}, std::vector<double>(N, 1.0),
                                   std::vector<double>(N, 1.0), std::vector<double>(N, 0.0),
                                   std::vector<double>(N, 1.0));
  Rng rng(23);
  std::normal_distribution<double> z;
  const ModelState prev{Eigen::MatrixXd::Zero(3, 5), 0};
  std::map<std::size_t, Eigen::MatrixXd> all;
  Eigen::MatrixXd wbar = Eigen::MatrixXd::Zero(3, 5);
  for (std::size_t n = 0; n < N; ++n) {
    all[n] = Eigen::MatrixXd::NullaryExpr(3, 5, [&] { return z(rng); });
    wbar += pop[n].weight * all[n];
  }
  const auto empirical = [&](double level) {
    const ParticipationVector q{std::vector<double>(N, level)};
    double acc = 0.0;
    const int draws = 20000;
    for (int t = 0; t < draws; ++t) {
      std::map<std::size_t, Eigen::MatrixXd> up;
      for (auto n : sample_participants(q, rng)) up[n] = all[n];
      acc += (aggregate(prev, up, q, pop).w - wbar).squaredNorm();
    }
    return acc / draws;
  };
  const auto bound = [&](double level) {
    double b = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      b += 4.0 * (1 - level) * pop[n].weight * pop[n].weight * all[n].squaredNorm() / level;
    return b;
  };
  const double v_hi = empirical(0.9), v_lo = empirical(0.3);
  EXPECT_LT(v_hi, v_lo);
  EXPECT_LE(v_hi, bound(0.9));
  EXPECT_LE(v_lo, bound(0.3));
}

TEST(Evaluation, ZeroModelOnBalancedDataGivesLogC) {
  FederatedDataset ds;
  ds.classes = 4;
  ds.dim = 3;
  for (int n = 0; n < 2; ++n) {
    Shard s;
    s.features = FeatureMatrix::Random(8, 3);
    for (int i = 0; i < 8; ++i) s.labels.push_back(i % 4);
    ds.shards.push_back(s);
  }
  ds.declared_total = 16;
  EXPECT_NEAR(global_loss(Eigen::MatrixXd::Zero(4, 4), ds, 1e-4), std::log(4.0), 1e-14);
}

TEST(Evaluation, GlobalLossEqualsPooledMean) {
  const auto ds = small_dataset(8);
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    Eigen::MatrixXd w = Eigen::MatrixXd::NullaryExpr(ds.classes, ds.dim + 1, [&] {
      return std::normal_distribution<double>(0, 0.5)(rng);
    });
    const double pooled_loss = shard_loss(w, pooled(ds), 1e-3);
    EXPECT_NEAR(global_loss(w, ds, 1e-3), pooled_loss, 1e-12 * std::max(1.0, pooled_loss));
  }
}

TEST(Evaluation, AccuracyInUnitInterval) {
  const auto ds = small_dataset(9);
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    Eigen::MatrixXd w = Eigen::MatrixXd::NullaryExpr(ds.classes, ds.dim + 1, [&] {
      return std::normal_distribution<double>(0, 2)(rng);
    });
    const double a = test_accuracy(w, ds.test);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Evaluation, EmptyInputsRejected) {
  FederatedDataset ds;
  EXPECT_THROW(global_loss(Eigen::MatrixXd::Zero(2, 2), ds, 0.0), InvalidInput);
  Shard empty;
  EXPECT_THROW(test_accuracy(Eigen::MatrixXd::Zero(2, 2), empty), InvalidInput);
}

TEST(Train, FullParticipationFullBatchIsCentralizedGradientDescent) {
  const auto ds = small_dataset(12);
  const auto pop = population_of(ds);
  TrainConfig cfg;
  cfg.local_steps = 1;
  cfg.batch = 100000;
  cfg.rounds = 30;
  cfg.l2 = 1e-3;
  cfg.lr = ExponentialSchedule{0.5, 0.99};
  cfg.q = ParticipationVector{std::vector<double>(ds.clients(), 1.0)};
  const auto metrics = train(ds, cfg, pop);
  ASSERT_EQ(metrics.size(), 31u);

  const Shard all = pooled(ds);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(ds.classes, ds.dim + 1);
  for (int r = 0; r <= cfg.rounds; ++r) {
    EXPECT_NEAR(metrics[static_cast<std::size_t>(r)].loss, shard_loss(w, all, cfg.l2), 1e-10)
        << "round " << r;
    EXPECT_EQ(metrics[static_cast<std::size_t>(r)].participants.size(),
              r == 0 ? 0u : ds.clients());
    w -= learning_rate(cfg.lr, r, 1) * shard_gradient(w, all, cfg.l2);
  }
}

TEST(Train, SameSeedSameSeries) {
  const auto ds = small_dataset(2);
  const auto pop = population_of(ds);
  TrainConfig cfg;
  cfg.rounds = 25;
  cfg.batch = 5;
  cfg.q = ParticipationVector{{0.3, 0.6, 0.9, 0.5}};
  cfg.seed = 77;
  EXPECT_EQ(train(ds, cfg, pop), train(ds, cfg, pop));
  auto other = cfg;
  other.seed = 78;
  EXPECT_NE(train(ds, cfg, pop), train(ds, other, pop));
}

TEST(Train, EvalStrideKeepsFirstAndLastRound) {
  const auto ds = small_dataset(2);
  const auto pop = population_of(ds);
  TrainConfig cfg;
  cfg.rounds = 23;
  cfg.eval_stride = 5;
  cfg.q = ParticipationVector{std::vector<double>(4, 0.5)};
  const auto m = train(ds, cfg, pop);
  std::vector<int> rounds;
  for (const auto& x : m) rounds.push_back(x.round);
  EXPECT_EQ(rounds, (std::vector<int>{0, 5, 10, 15, 20, 23}));
  for (std::size_t i = 1; i < m.size(); ++i) EXPECT_GT(m[i].sim_time, m[i - 1].sim_time);
}

TEST(Train, StronglyConvexLossNonIncreasingAfterWarmup) {
  const auto ds = small_dataset(31);
  const auto pop = population_of(ds);
  TrainConfig cfg;
  cfg.local_steps = 5;
  cfg.batch = 100000;
  cfg.rounds = 80;
  cfg.l2 = 1e-2;
  cfg.lr = theoretical_schedule(ds, cfg.l2);
  cfg.q = ParticipationVector{std::vector<double>(ds.clients(), 1.0)};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cfg.seed = seed;
    const auto m = train(ds, cfg, pop);
    for (std::size_t r = 11; r < m.size(); ++r)
      EXPECT_LE(m[r].loss, m[r - 1].loss) << "seed " << seed << " round " << r;
  }
}

TEST(Train, RejectsInvalidConfig) {
  const auto ds = small_dataset(2);
  const auto pop = population_of(ds);
  TrainConfig cfg;
  cfg.q = ParticipationVector{std::vector<double>(4, 0.5)};
  auto bad = cfg;
  bad.local_steps = 0;
  EXPECT_THROW(train(ds, bad, pop), InvalidInput);
  bad = cfg;
  bad.q[2] = 1.5;
  EXPECT_THROW(train(ds, bad, pop), InvalidInput);
  bad = cfg;
  bad.q.q.pop_back();
  EXPECT_THROW(train(ds, bad, pop), InvalidInput);
}

TEST(MetricsCsv, RoundTrips) {
  const auto ds = small_dataset(2);
  TrainConfig cfg;
  cfg.rounds = 5;
  cfg.q = ParticipationVector{std::vector<double>(4, 0.7)};
  const auto m = train(ds, cfg, population_of(ds));
  std::stringstream ss;
  write_metrics_csv(ss, "optimal-s3", 3, m);
  const auto rows = read_metrics_csv(ss, "mem");
  ASSERT_EQ(rows.size(), m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(rows[i].run_id, "optimal-s3");
    EXPECT_EQ(rows[i].seed, 3u);
    EXPECT_EQ(rows[i].round, m[i].round);
    EXPECT_EQ(rows[i].participants, m[i].participants.size());
    EXPECT_EQ(rows[i].loss, m[i].loss);
    EXPECT_EQ(rows[i].accuracy, m[i].accuracy);
    EXPECT_EQ(rows[i].sim_time, m[i].sim_time);
  }
}

TEST(MetricsCsv, RejectsWrongHeader) {
  std::stringstream ss("run,seed\n");
  EXPECT_THROW(read_metrics_csv(ss, "mem"), FormatError);
}
