#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fedprice/data.hpp"

using namespace fedprice;
namespace fs = std::filesystem;

namespace {

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void push_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::vector<unsigned char> idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                                      const std::vector<unsigned char>& pixels) {
  std::vector<unsigned char> b;
  push_be32(b, 0x803);
  push_be32(b, count);
  push_be32(b, rows);
  push_be32(b, cols);
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> b;
  push_be32(b, 0x801);
  push_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

class IdxFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("fedprice_idx_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const char* name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

/// Labeled pool with `per_class` samples of each class; features encode the
/// source row so shards can be traced back.
Shard labeled_pool(int classes, std::size_t per_class, std::uint64_t seed) {
  Shard s;
  const std::size_t n = static_cast<std::size_t>(classes) * per_class;
  s.features.resize(static_cast<Eigen::Index>(n), 2);
  Rng rng(seed);
  std::vector<int> labels;
  for (int c = 0; c < classes; ++c) labels.insert(labels.end(), per_class, c);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < n; ++i) {
    s.features(static_cast<Eigen::Index>(i), 0) = static_cast<double>(i);
    s.features(static_cast<Eigen::Index>(i), 1) = static_cast<double>(labels[i]);
  }
  s.labels = labels;
  return s;
}

std::set<int> label_set(const Shard& s) { return {s.labels.begin(), s.labels.end()}; }

}  // namespace

TEST(PowerLawSizes, SumExactlyWithPositiveShards) {
  Rng rng(1);
  const auto sizes = power_law_sizes(40, 22377, 1.5, rng);
  std::size_t total = 0;
  for (auto s : sizes) {
    EXPECT_GE(s, 1u);
    total += s;
  }
  EXPECT_EQ(total, 22377u);
}

TEST(PowerLawSizes, UnbalancedForSteepExponent) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto sizes = power_law_sizes(40, 22377, 1.5, rng);
    std::sort(sizes.rbegin(), sizes.rend());
    EXPECT_TRUE(std::is_sorted(sizes.rbegin(), sizes.rend()));
    EXPECT_GT(static_cast<double>(sizes.front()) / static_cast<double>(sizes.back()), 5.0);
  }
}

TEST(PowerLawSizes, ZeroExponentIsBalanced) {
  Rng rng(4);
  const auto sizes = power_law_sizes(8, 803, 0.0, rng);
  EXPECT_EQ(*std::max_element(sizes.begin(), sizes.end()) -
                *std::min_element(sizes.begin(), sizes.end()),
            1u);
}

TEST(PowerLawSizes, RejectsTooFewSamples) {
  Rng rng(1);
  EXPECT_THROW(power_law_sizes(10, 9, 1.5, rng), InvalidInput);
}

TEST(Synthetic, FullScaleTotalIsExact) {
  SyntheticConfig cfg;
  cfg.clients = 40;
  cfg.total_samples = 22377;
  cfg.seed = 5;
  const auto ds = gen_synthetic(cfg);
  EXPECT_EQ(ds.total(), 22377u);
  EXPECT_EQ(ds.declared_total, 22377u);
  EXPECT_EQ(ds.dim, 60);
  EXPECT_EQ(ds.classes, 10);
  EXPECT_NO_THROW(validate(ds));
  EXPECT_NEAR(static_cast<double>(ds.test.size()), 0.1 * 22377, 40.0);
  auto d = ds.datasizes();
  std::sort(d.begin(), d.end());
  EXPECT_GT(d.back() / d.front(), 5.0);
}

TEST(Synthetic, ZeroSpreadSharesGeneratingParameters) {
  SyntheticConfig cfg;
  cfg.clients = 6;
  cfg.dim = 10;
  cfg.classes = 4;
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  cfg.total_samples = 6000;
  cfg.power_exponent = 0.0;
  cfg.seed = 3;
  const auto ds = gen_synthetic(cfg);
  // Identical parameters give identical per-client distributions: feature
  // means and label frequencies agree to sampling error.
  const Eigen::RowVectorXd m0 = ds.shards[0].features.colwise().mean();
  for (std::size_t n = 1; n < ds.clients(); ++n) {
    const Eigen::RowVectorXd mn = ds.shards[n].features.colwise().mean();
    EXPECT_LT((mn - m0).cwiseAbs().maxCoeff(), 0.2) << "client " << n;
  }
  // With spread the clients are visibly different.
  cfg.alpha = cfg.beta = 1.0;
  const auto spread = gen_synthetic(cfg);
  double widest = 0.0;
  const Eigen::RowVectorXd s0 = spread.shards[0].features.colwise().mean();
  for (std::size_t n = 1; n < spread.clients(); ++n)
    widest = std::max(widest,
                      (spread.shards[n].features.colwise().mean() - s0).cwiseAbs().maxCoeff());
  EXPECT_GT(widest, 0.5);
}

TEST(Synthetic, SameSeedSameDataset) {
  SyntheticConfig cfg;
  cfg.clients = 5;
  cfg.total_samples = 500;
  cfg.seed = 42;
  EXPECT_EQ(gen_synthetic(cfg), gen_synthetic(cfg));
  auto other = cfg;
  other.seed = 43;
  EXPECT_FALSE(gen_synthetic(cfg) == gen_synthetic(other));
}

TEST(Synthetic, RejectsInvalidSizes) {
  SyntheticConfig cfg;
  cfg.clients = 10;
  cfg.total_samples = 5;
  EXPECT_THROW(gen_synthetic(cfg), InvalidInput);
  cfg.clients = 0;
  EXPECT_THROW(gen_synthetic(cfg), InvalidInput);
}

TEST_F(IdxFiles, HandBuiltPairParsesExactly) {
  std::vector<unsigned char> px(18);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<unsigned char>(i * 15);
  write_bytes(path("img"), idx_images(2, 3, 3, px));
  write_bytes(path("lab"), idx_labels({7, 2}));
  const auto s = load_idx(path("img"), path("lab"));
  ASSERT_EQ(s.size(), 2u);
  ASSERT_EQ(s.features.cols(), 9);
  EXPECT_EQ(s.labels, (std::vector<int>{7, 2}));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 9; ++j) EXPECT_EQ(s.features(i, j), (i * 9 + j) * 15 / 255.0);
}

TEST_F(IdxFiles, CountMismatchDetected) {
  write_bytes(path("img"), idx_images(2, 3, 3, std::vector<unsigned char>(18, 1)));
  write_bytes(path("lab"), idx_labels({1, 2, 3}));
  EXPECT_THROW(load_idx(path("img"), path("lab")), IdxCountMismatch);
}

TEST_F(IdxFiles, BadMagicDetected) {
  auto img = idx_images(1, 2, 2, {1, 2, 3, 4});
  img[3] = 0x02;
  write_bytes(path("img"), img);
  write_bytes(path("lab"), idx_labels({1}));
  EXPECT_THROW(load_idx(path("img"), path("lab")), IdxMagicError);
  write_bytes(path("img"), idx_images(1, 2, 2, {1, 2, 3, 4}));
  EXPECT_THROW(load_idx(path("lab"), path("img")), IdxMagicError);
}

TEST_F(IdxFiles, TruncationDetected) {
  write_bytes(path("img"), idx_images(2, 3, 3, std::vector<unsigned char>(17, 1)));
  write_bytes(path("lab"), idx_labels({1, 2}));
  EXPECT_THROW(load_idx(path("img"), path("lab")), IdxTruncatedError);
  write_bytes(path("img"), idx_images(2, 3, 3, std::vector<unsigned char>(18, 1)));
  auto lab = idx_labels({1, 2});
  lab.pop_back();
  write_bytes(path("lab"), lab);
  EXPECT_THROW(load_idx(path("img"), path("lab")), IdxTruncatedError);
  write_bytes(path("lab"), {0, 0, 8});
  EXPECT_THROW(load_idx(path("img"), path("lab")), IdxTruncatedError);
}

TEST_F(IdxFiles, ErrorKindsAreDistinct) {
  EXPECT_FALSE((std::is_base_of_v<IdxMagicError, IdxCountMismatch>));
  EXPECT_FALSE((std::is_base_of_v<IdxTruncatedError, IdxCountMismatch>));
  EXPECT_FALSE((std::is_base_of_v<IdxMagicError, IdxTruncatedError>));
}

TEST(Idx, MnistTrainHeader) {
  const char* dir = std::getenv("FEDPRICE_MNIST_DIR");
  const fs::path p = fs::path(dir ? dir : "data/mnist") / "train-images-idx3-ubyte";
  if (!fs::exists(p)) GTEST_SKIP() << "MNIST not present at " << p << "; set FEDPRICE_MNIST_DIR";
  const auto h = read_idx_header(p.string());
  EXPECT_EQ(h.magic, 0x803u);
  ASSERT_EQ(h.dims.size(), 3u);
  EXPECT_EQ(h.dims[0], 60000u);
  EXPECT_EQ(h.dims[1] * h.dims[2], 784u);
}

TEST(FilterLabels, KeepsAndRelabels) {
  const auto pool = labeled_pool(5, 4, 1);
  const auto f = filter_labels(pool, {3, 1});
  EXPECT_EQ(f.size(), 8u);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const int original = static_cast<int>(f.features(static_cast<Eigen::Index>(i), 1));
    EXPECT_EQ(f.labels[i], original == 3 ? 0 : 1);
  }
}

TEST(Subsample, FullAndEmpty) {
  const auto pool = labeled_pool(3, 10, 2);
  EXPECT_EQ(subsample(pool, pool.size(), 9), pool);
  EXPECT_EQ(subsample(pool, 0, 9).size(), 0u);
  EXPECT_THROW(subsample(pool, pool.size() + 1, 9), InvalidInput);
}

TEST(Subsample, DeterministicPerSeed) {
  const auto pool = labeled_pool(4, 50, 2);
  EXPECT_EQ(subsample(pool, 77, 5), subsample(pool, 77, 5));
  EXPECT_FALSE(subsample(pool, 77, 5) == subsample(pool, 77, 6));
}

TEST(Subsample, HalfKeepsClassFrequencies) {
  // Unequal class sizes; hypergeometric standard deviation per class.
  Shard pool;
  std::vector<int> labels;
  const std::vector<std::size_t> counts{400, 250, 150, 100, 60, 40};
  for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], static_cast<int>(c));
  pool.labels = labels;
  pool.features = FeatureMatrix::Zero(static_cast<Eigen::Index>(labels.size()), 1);
  const std::size_t N = labels.size(), n = N / 2;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = subsample(pool, n, seed);
    for (std::size_t c = 0; c < counts.size(); ++c) {
      const double K = static_cast<double>(counts[c]);
      const double mean = n * K / N;
      const double sd = std::sqrt(n * (K / N) * (1 - K / N) * (N - n) / (N - 1.0));
      const auto got = std::count(s.labels.begin(), s.labels.end(), static_cast<int>(c));
      EXPECT_LE(std::abs(static_cast<double>(got) - mean), 3 * sd) << "class " << c;
    }
  }
}

TEST(Partition, AllClassesEveryClientIsBalancedIid) {
  const auto pool = labeled_pool(10, 40, 3);
  const auto ds = partition_label_limited(pool, {8, 10, 10, 0.0, 1});
  for (const auto& s : ds.shards) {
    EXPECT_EQ(s.size(), 50u);
    for (int c = 0; c < 10; ++c) EXPECT_EQ(std::count(s.labels.begin(), s.labels.end(), c), 5);
  }
}

TEST(Partition, OneClassPerClient) {
  const auto pool = labeled_pool(10, 30, 4);
  const auto ds = partition_label_limited(pool, {10, 1, 1, 1.5, 2});
  std::set<int> seen;
  for (const auto& s : ds.shards) {
    const auto ls = label_set(s);
    ASSERT_EQ(ls.size(), 1u);
    seen.insert(*ls.begin());
    EXPECT_EQ(s.size(), 30u);
  }
  EXPECT_EQ(seen.size(), 10u);
}

TEST(Partition, LabelLimitedSetupShape) {
  const auto pool = labeled_pool(10, 1447, 5);
  const auto sub = subsample(pool, 14463, 6);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ds = partition_label_limited(sub, {40, 1, 6, 1.5, seed});
    ASSERT_EQ(ds.clients(), 40u);
    EXPECT_EQ(ds.total(), 14463u);
    std::size_t lo = ds.total(), hi = 0;
    for (const auto& s : ds.shards) {
      const auto k = label_set(s).size();
      EXPECT_GE(k, 1u);
      EXPECT_LE(k, 6u);
      lo = std::min(lo, s.size());
      hi = std::max(hi, s.size());
    }
    EXPECT_GT(static_cast<double>(hi) / static_cast<double>(lo), 5.0);
  }
}

TEST(Partition, ExactDisjointCover) {
  const auto pool = labeled_pool(7, 33, 8);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ds = partition_label_limited(pool, {12, 1, 4, 1.5, seed});
    std::vector<int> hits(pool.size(), 0);
    for (const auto& s : ds.shards)
      for (Eigen::Index i = 0; i < s.features.rows(); ++i) {
        const auto src = static_cast<std::size_t>(s.features(i, 0));
        ++hits[src];
        EXPECT_EQ(s.labels[static_cast<std::size_t>(i)], pool.labels[src]);
      }
    EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  }
}

TEST(Partition, DeterministicPerSeed) {
  const auto pool = labeled_pool(6, 20, 9);
  EXPECT_EQ(partition_label_limited(pool, {9, 1, 3, 1.5, 4}),
            partition_label_limited(pool, {9, 1, 3, 1.5, 4}));
}

TEST(Partition, InfeasibleAssignmentNamesClass) {
  auto pool = labeled_pool(3, 10, 1);
  // Class 2 keeps a single sample while every client holds all three classes.
  std::vector<std::size_t> keep;
  bool kept = false;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool.labels[i] != 2 || !kept) {
      kept = kept || pool.labels[i] == 2;
      keep.push_back(i);
    }
  const auto thin = gather(pool, keep);
  try {
    partition_label_limited(thin, {4, 3, 3, 0.0, 1});
    FAIL() << "expected an infeasible-partition error";
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find("class 2"), std::string::npos) << e.what();
  }
}

TEST(Container, RoundTripsExactly) {
  SyntheticConfig cfg;
  cfg.clients = 5;
  cfg.dim = 7;
  cfg.classes = 3;
  cfg.total_samples = 123;
  cfg.seed = 7;
  const auto ds = gen_synthetic(cfg);
  std::stringstream ss;
  write_dataset(ss, ds);
  EXPECT_EQ(read_dataset(ss), ds);
}

TEST(Container, LayoutHeader) {
  SyntheticConfig cfg;
  cfg.clients = 2;
  cfg.dim = 3;
  cfg.classes = 2;
  cfg.total_samples = 10;
  const auto ds = gen_synthetic(cfg);
  std::stringstream ss;
  write_dataset(ss, ds);
  const std::string b = ss.str();
  EXPECT_EQ(b.substr(0, 4), "FPDS");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 2);
  EXPECT_EQ(static_cast<unsigned char>(b[12]), 3);
  EXPECT_EQ(static_cast<unsigned char>(b[16]), 2);
  const std::size_t rows = ds.total() + ds.test.size();
  EXPECT_EQ(b.size(), 4 + 4 * 4 + 8 * 2 + 8 * 2 + rows * (3 * 8 + 4));
}

TEST(Container, RejectsCorruptInput) {
  std::stringstream bad("NOPE");
  EXPECT_THROW(read_dataset(bad), FormatError);
  SyntheticConfig cfg;
  cfg.clients = 2;
  cfg.total_samples = 20;
  std::stringstream ss;
  write_dataset(ss, gen_synthetic(cfg));
  std::string b = ss.str();
  b.resize(b.size() - 3);
  std::stringstream cut(b);
  EXPECT_THROW(read_dataset(cut), FormatError);
}
