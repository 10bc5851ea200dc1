#pragma once

// Dataset generation, IDX ingestion, label-limited partitioning, and the
// binary dataset container.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <istream>
#include <iterator>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "fedprice/core.hpp"
#include "fedprice/dataset.hpp"

namespace fedprice {

class IdxMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IdxTruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IdxCountMismatch : public FormatError {
 public:
  using FormatError::FormatError;
};

// Shard sizes ----------------------------------------------------------------

/// Power-law weights over a random client order: the client at rank k gets
/// (k + 1)^-exponent. Weights are returned in client index order.
inline std::vector<double> power_law_weights(std::size_t clients, double exponent, Rng& rng) {
  std::vector<std::size_t> order(clients);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<double> w(clients);
  for (std::size_t k = 0; k < clients; ++k)
    w[order[k]] = std::pow(static_cast<double>(k + 1), -exponent);
  return w;
}

/// Splits `total` into integer parts proportional to `weights`, every part at
/// least `floor_each`, remainders assigned largest-first (ties to the lower
/// index).
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& weights,
                                                  std::size_t total, std::size_t floor_each) {
  const std::size_t n = weights.size();
  if (n == 0) throw InvalidInput("cannot split among zero parts");
  if (total < floor_each * n)
    throw InvalidInput(detail::concat("total ", total, " cannot give ", floor_each, " to each of ",
                                      n, " parts"));
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  const std::size_t rest = total - floor_each * n;
  std::vector<std::size_t> out(n, floor_each);
  std::vector<double> frac(n);
  std::size_t given = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = static_cast<double>(rest) * weights[i] / wsum;
    const auto whole = static_cast<std::size_t>(std::floor(exact));
    out[i] += whole;
    given += whole;
    frac[i] = exact - static_cast<double>(whole);
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; given < rest; ++k, ++given) ++out[idx[k % n]];
  return out;
}

/// Power-law shard sizes summing exactly to `total`, each at least 1.
inline std::vector<std::size_t> power_law_sizes(std::size_t clients, std::size_t total,
                                                double exponent, Rng& rng) {
  if (clients == 0) throw InvalidInput("need at least one client");
  if (total < clients)
    throw InvalidInput(detail::concat("total samples ", total, " below client count ", clients));
  if (!(exponent >= 0.0)) throw InvalidInput(detail::concat("power exponent must be >= 0, got ", exponent));
  return largest_remainder(power_law_weights(clients, exponent, rng), total, 1);
}

// Synthetic ------------------------------------------------------------------

struct SyntheticConfig {
  std::size_t clients = 10;
  int dim = 60;
  int classes = 10;
  double alpha = 1.0;  // spread of per-client model parameters
  double beta = 1.0;   // spread of per-client feature means
  std::size_t total_samples = 2000;
  double power_exponent = 1.5;
  double test_fraction = 0.1;  // extra samples per client pooled into the test set
  double label_noise = 0.0;    // probability of replacing a label by a uniform class
  std::uint64_t seed = 0;
};

inline void validate(const SyntheticConfig& c) {
  if (c.clients < 1) throw InvalidInput("synthetic data needs at least one client");
  if (c.total_samples < c.clients)
    throw InvalidInput(detail::concat("total_samples ", c.total_samples, " below client count ",
                                      c.clients));
  if (c.dim < 1 || c.classes < 2)
    throw InvalidInput(detail::concat("need dim >= 1 and classes >= 2, got dim ", c.dim,
                                      ", classes ", c.classes));
  if (!(c.alpha >= 0.0) || !(c.beta >= 0.0))
    throw InvalidInput("synthetic alpha and beta must be >= 0");
  if (!(c.test_fraction >= 0.0 && c.test_fraction < 1.0))
    throw InvalidInput(detail::concat("test fraction must lie in [0, 1), got ", c.test_fraction));
  if (!(c.label_noise >= 0.0 && c.label_noise <= 1.0))
    throw InvalidInput(detail::concat("label noise must lie in [0, 1], got ", c.label_noise));
}

/// Synthetic(alpha, beta): client n draws u_n ~ N(0, alpha^2) and model entries
/// W_n, b_n ~ N(u_n, 1); v_n ~ N(0, beta^2) and feature mean m_n ~ N(v_n, 1);
/// x ~ N(m_n, diag(j^-1.2)); y = argmax(W_n x + b_n). A zero spread makes the
/// corresponding parameters a single draw shared by every client.
inline FederatedDataset gen_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  const std::size_t N = cfg.clients;
  const int D = cfg.dim, C = cfg.classes;
  constexpr std::uint64_t kShared = std::numeric_limits<std::uint64_t>::max();

  Rng size_rng = make_rng(cfg.seed, {0});
  const auto sizes = power_law_sizes(N, cfg.total_samples, cfg.power_exponent, size_rng);

  std::vector<double> sd(static_cast<std::size_t>(D));
  for (int j = 0; j < D; ++j) sd[static_cast<std::size_t>(j)] = std::pow(j + 1.0, -0.6);

  FederatedDataset ds;
  ds.classes = C;
  ds.dim = D;
  ds.declared_total = cfg.total_samples;
  ds.shards.resize(N);
  std::vector<Shard> tests(N);
  std::normal_distribution<double> std_normal(0.0, 1.0);

  for (std::size_t n = 0; n < N; ++n) {
    Rng model_rng = make_rng(cfg.seed, {1, cfg.alpha == 0.0 ? kShared : n});
    const double u = cfg.alpha * std_normal(model_rng);
    Eigen::MatrixXd W(C, D);
    Eigen::VectorXd b(C);
    for (int c = 0; c < C; ++c)
      for (int j = 0; j < D; ++j) W(c, j) = u + std_normal(model_rng);
    for (int c = 0; c < C; ++c) b(c) = u + std_normal(model_rng);

    Rng mean_rng = make_rng(cfg.seed, {2, cfg.beta == 0.0 ? kShared : n});
    const double v = cfg.beta * std_normal(mean_rng);
    Eigen::RowVectorXd mean(D);
    for (int j = 0; j < D; ++j) mean(j) = v + std_normal(mean_rng);

    Rng sample_rng = make_rng(cfg.seed, {3, n});
    const auto n_test =
        static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(sizes[n])));
    const std::size_t count = sizes[n] + n_test;
    Shard all;
    all.features.resize(static_cast<Eigen::Index>(count), D);
    all.labels.resize(count);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> any_class(0, C - 1);
    for (std::size_t i = 0; i < count; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      for (int j = 0; j < D; ++j)
        all.features(row, j) = mean(j) + sd[static_cast<std::size_t>(j)] * std_normal(sample_rng);
      Eigen::VectorXd logits = W * all.features.row(row).transpose() + b;
      Eigen::Index y = 0;
      logits.maxCoeff(&y);
      all.labels[i] = static_cast<int>(y);
      if (cfg.label_noise > 0.0 && unit(sample_rng) < cfg.label_noise)
        all.labels[i] = any_class(sample_rng);
    }
    ds.shards[n].features = all.features.topRows(static_cast<Eigen::Index>(sizes[n]));
    ds.shards[n].labels.assign(all.labels.begin(), all.labels.begin() + static_cast<long>(sizes[n]));
    tests[n].features = all.features.bottomRows(static_cast<Eigen::Index>(n_test));
    tests[n].labels.assign(all.labels.begin() + static_cast<long>(sizes[n]), all.labels.end());
  }

  std::size_t test_total = 0;
  for (const auto& t : tests) test_total += t.size();
  ds.test.features.resize(static_cast<Eigen::Index>(test_total), D);
  Eigen::Index row = 0;
  for (const auto& t : tests) {
    ds.test.features.middleRows(row, t.features.rows()) = t.features;
    row += t.features.rows();
    ds.test.labels.insert(ds.test.labels.end(), t.labels.begin(), t.labels.end());
  }
  return ds;
}

// IDX ------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput(concat("cannot open '", path, "'"));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at,
                               const std::string& path) {
  if (b.size() < at + 4)
    throw IdxTruncatedError(concat(path, ": truncated header (", b.size(), " bytes)"));
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

}  // namespace detail

struct IdxHeader {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
};

/// Reads only the magic number and dimension sizes.
inline IdxHeader read_idx_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput(detail::concat("cannot open '", path, "'"));
  std::vector<unsigned char> head(16);
  in.read(reinterpret_cast<char*>(head.data()), 16);
  head.resize(static_cast<std::size_t>(in.gcount()));
  IdxHeader h;
  h.magic = detail::read_be32(head, 0, path);
  const std::size_t ndims = h.magic & 0xFF;
  if ((h.magic & 0xFFFFFF00u) != 0x800u || ndims == 0 || ndims > 3)
    throw IdxMagicError(detail::concat(path, ": bad IDX magic 0x", std::hex, h.magic));
  for (std::size_t k = 0; k < ndims; ++k) h.dims.push_back(detail::read_be32(head, 4 + 4 * k, path));
  return h;
}

/// Parses an IDX image file (magic 0x803) and label file (magic 0x801) into
/// samples with pixels scaled to [0, 1].
inline Shard load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  const auto img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != 0x803u)
    throw IdxMagicError(detail::concat(images_path, ": expected image magic 0x803, got 0x",
                                       std::hex, img_magic));
  const auto lab_magic = detail::read_be32(lab, 0, labels_path);
  if (lab_magic != 0x801u)
    throw IdxMagicError(detail::concat(labels_path, ": expected label magic 0x801, got 0x",
                                       std::hex, lab_magic));
  const std::size_t count = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t label_count = detail::read_be32(lab, 4, labels_path);
  if (count != label_count)
    throw IdxCountMismatch(detail::concat(images_path, " holds ", count, " images but ",
                                          labels_path, " holds ", label_count, " labels"));
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + count * pixels)
    throw IdxTruncatedError(detail::concat(images_path, ": expected ", 16 + count * pixels,
                                           " bytes, found ", img.size()));
  if (lab.size() < 8 + count)
    throw IdxTruncatedError(detail::concat(labels_path, ": expected ", 8 + count,
                                           " bytes, found ", lab.size()));
  Shard out;
  out.features.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(pixels));
  out.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* p = img.data() + 16 + i * pixels;
    for (std::size_t j = 0; j < pixels; ++j)
      out.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = p[j] / 255.0;
    out.labels[i] = lab[8 + i];
  }
  return out;
}

/// Keeps samples whose label is in `keep` and relabels them to their position
/// in `keep`.
inline Shard filter_labels(const Shard& samples, const std::vector<int>& keep) {
  std::vector<std::size_t> idx;
  std::vector<int> relabel;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto it = std::find(keep.begin(), keep.end(), samples.labels[i]);
    if (it != keep.end()) {
      idx.push_back(i);
      relabel.push_back(static_cast<int>(it - keep.begin()));
    }
  }
  Shard out = gather(samples, idx);
  out.labels = std::move(relabel);
  return out;
}

/// n samples drawn uniformly without replacement, kept in source order.
inline Shard subsample(const Shard& samples, std::size_t n, std::uint64_t seed) {
  if (n > samples.size())
    throw InvalidInput(detail::concat("cannot subsample ", n, " of ", samples.size(), " samples"));
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = make_rng(seed, {4});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return gather(samples, idx);
}

// Label-limited partition ----------------------------------------------------

struct PartitionConfig {
  std::size_t clients = 40;
  int classes_min = 1;
  int classes_max = 6;
  double power_exponent = 1.5;
  std::uint64_t seed = 0;
};

/// Each client holds a uniformly random number of distinct classes in
/// [classes_min, classes_max]. Classes are dealt from a deck of concatenated
/// random permutations, so every class is held by someone once enough slots
/// exist. Each class's samples are split among its holders in proportion to
/// the holders' power-law weights, at least one sample each. Every input
/// sample lands in exactly one shard.
inline FederatedDataset partition_label_limited(const Shard& samples, const PartitionConfig& cfg) {
  if (samples.empty()) throw InvalidInput("cannot partition an empty sample set");
  if (cfg.clients < 1) throw InvalidInput("partition needs at least one client");
  const int C = std::max(2, *std::max_element(samples.labels.begin(), samples.labels.end()) + 1);
  validate(samples, C, static_cast<int>(samples.features.cols()), "samples");
  if (cfg.classes_min < 1 || cfg.classes_max < cfg.classes_min || cfg.classes_max > C)
    throw InvalidInput(detail::concat("classes per client must satisfy 1 <= min <= max <= ", C,
                                      ", got [", cfg.classes_min, ", ", cfg.classes_max, "]"));
  const std::size_t N = cfg.clients;
  Rng rng = make_rng(cfg.seed, {5});

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(C));
  for (std::size_t i = 0; i < samples.size(); ++i)
    by_class[static_cast<std::size_t>(samples.labels[i])].push_back(i);
  for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);

  std::vector<int> perm(static_cast<std::size_t>(C));
  std::iota(perm.begin(), perm.end(), 0);
  std::deque<int> deck;
  const auto refill = [&] {
    std::shuffle(perm.begin(), perm.end(), rng);
    deck.insert(deck.end(), perm.begin(), perm.end());
  };
  std::uniform_int_distribution<int> count_dist(cfg.classes_min, cfg.classes_max);
  std::vector<std::set<int>> held(N);
  for (std::size_t n = 0; n < N; ++n) {
    const int want = count_dist(rng);
    std::vector<int> deferred;
    while (static_cast<int>(held[n].size()) < want) {
      if (deck.empty()) refill();
      const int c = deck.front();
      deck.pop_front();
      if (!held[n].insert(c).second) deferred.push_back(c);
    }
    deck.insert(deck.begin(), deferred.begin(), deferred.end());
  }

  const auto weights = power_law_weights(N, cfg.power_exponent, rng);
  std::vector<std::vector<std::size_t>> members(N);
  for (int c = 0; c < C; ++c) {
    const auto& pool = by_class[static_cast<std::size_t>(c)];
    if (pool.empty()) continue;
    std::vector<std::size_t> holders;
    std::vector<double> hw;
    for (std::size_t n = 0; n < N; ++n)
      if (held[n].count(c)) {
        holders.push_back(n);
        hw.push_back(weights[n]);
      }
    if (holders.empty())
      throw InvalidInput(detail::concat("infeasible partition: class ", c, " (", pool.size(),
                                        " samples) is assigned to no client"));
    if (pool.size() < holders.size())
      throw InvalidInput(detail::concat("infeasible partition: class ", c, " has ", pool.size(),
                                        " samples for ", holders.size(), " holding clients"));
    const auto split = largest_remainder(hw, pool.size(), 1);
    std::size_t at = 0;
    for (std::size_t k = 0; k < holders.size(); ++k) {
      auto& m = members[holders[k]];
      m.insert(m.end(), pool.begin() + static_cast<long>(at),
               pool.begin() + static_cast<long>(at + split[k]));
      at += split[k];
    }
  }

  FederatedDataset ds;
  ds.classes = C;
  ds.dim = static_cast<int>(samples.features.cols());
  ds.declared_total = samples.size();
  ds.shards.resize(N);
  for (std::size_t n = 0; n < N; ++n) {
    if (members[n].empty())
      throw InvalidInput(detail::concat("infeasible partition: client ", n,
                                        " holds only classes absent from the samples"));
    std::sort(members[n].begin(), members[n].end());
    ds.shards[n] = gather(samples, members[n]);
  }
  ds.test.features.resize(0, ds.dim);
  return ds;
}

// Binary container -----------------------------------------------------------
//
// Little-endian throughout:
//   char[4] "FPDS", u32 version = 1, u32 classes, u32 dim, u32 clients,
//   u64 declared_total, u64 test_count, u64 shard_count[clients],
//   then for each client shard followed by the test set:
//   f64 features[count * dim] (row-major), i32 labels[count].

inline constexpr std::array<char, 4> kDatasetMagic{'F', 'P', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b;
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), b.size());
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(U)> b;
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size()))
    throw FormatError(concat("dataset container truncated while reading ", what));
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(U{b[i]} << (8 * i));
  return v;
}

inline void put_shard(std::ostream& os, const Shard& s) {
  for (Eigen::Index i = 0; i < s.features.rows(); ++i)
    for (Eigen::Index j = 0; j < s.features.cols(); ++j)
      put_le(os, std::bit_cast<std::uint64_t>(s.features(i, j)));
  for (int y : s.labels) put_le(os, static_cast<std::uint32_t>(y));
}

inline Shard get_shard(std::istream& is, std::size_t count, int dim) {
  Shard s;
  s.features.resize(static_cast<Eigen::Index>(count), dim);
  for (Eigen::Index i = 0; i < s.features.rows(); ++i)
    for (Eigen::Index j = 0; j < dim; ++j)
      s.features(i, j) = std::bit_cast<double>(get_le<std::uint64_t>(is, "features"));
  s.labels.resize(count);
  for (auto& y : s.labels) y = static_cast<int>(get_le<std::uint32_t>(is, "labels"));
  return s;
}

}  // namespace detail

inline void write_dataset(std::ostream& os, const FederatedDataset& ds) {
  validate(ds);
  os.write(kDatasetMagic.data(), kDatasetMagic.size());
  detail::put_le(os, kDatasetVersion);
  detail::put_le(os, static_cast<std::uint32_t>(ds.classes));
  detail::put_le(os, static_cast<std::uint32_t>(ds.dim));
  detail::put_le(os, static_cast<std::uint32_t>(ds.clients()));
  detail::put_le(os, static_cast<std::uint64_t>(ds.declared_total));
  detail::put_le(os, static_cast<std::uint64_t>(ds.test.size()));
  for (const auto& s : ds.shards) detail::put_le(os, static_cast<std::uint64_t>(s.size()));
  for (const auto& s : ds.shards) detail::put_shard(os, s);
  detail::put_shard(os, ds.test);
  if (!os) throw Error("failed writing dataset container");
}

inline FederatedDataset read_dataset(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kDatasetMagic)
    throw FormatError("not a dataset container (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kDatasetVersion)
    throw FormatError(detail::concat("unsupported dataset container version ", version));
  FederatedDataset ds;
  ds.classes = static_cast<int>(detail::get_le<std::uint32_t>(is, "classes"));
  ds.dim = static_cast<int>(detail::get_le<std::uint32_t>(is, "dim"));
  const auto clients = detail::get_le<std::uint32_t>(is, "client count");
  ds.declared_total = detail::get_le<std::uint64_t>(is, "declared total");
  const auto test_count = detail::get_le<std::uint64_t>(is, "test count");
  std::vector<std::uint64_t> counts(clients);
  for (auto& c : counts) c = detail::get_le<std::uint64_t>(is, "shard index");
  ds.shards.reserve(clients);
  for (auto c : counts) ds.shards.push_back(detail::get_shard(is, c, ds.dim));
  ds.test = detail::get_shard(is, test_count, ds.dim);
  try {
    validate(ds);
  } catch (const InvalidInput& e) {
    throw FormatError(detail::concat("dataset container is inconsistent: ", e.what()));
  }
  return ds;
}

inline void save_dataset(const std::string& path, const FederatedDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(detail::concat("cannot write '", path, "'"));
  write_dataset(os, ds);
}

inline FederatedDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput(detail::concat("cannot open '", path, "'"));
  return read_dataset(is);
}

}  // namespace fedprice
