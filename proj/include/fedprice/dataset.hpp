#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <numeric>
#include <vector>

#include "fedprice/core.hpp"

namespace fedprice {

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Labeled samples, one row per sample.
struct Shard {
  FeatureMatrix features;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  bool operator==(const Shard& o) const {
    return labels == o.labels && features.rows() == o.features.rows() &&
           features.cols() == o.features.cols() && features == o.features;
  }
};

struct FederatedDataset {
  std::vector<Shard> shards;  // one per client
  Shard test;
  int classes = 0;
  int dim = 0;
  std::size_t declared_total = 0;  // sum of client shard sizes

  std::size_t clients() const noexcept { return shards.size(); }

  std::size_t total() const noexcept {
    std::size_t t = 0;
    for (const auto& s : shards) t += s.size();
    return t;
  }

  std::vector<double> datasizes() const {
    std::vector<double> d(shards.size());
    for (std::size_t n = 0; n < shards.size(); ++n) d[n] = static_cast<double>(shards[n].size());
    return d;
  }

  bool operator==(const FederatedDataset&) const = default;
};

inline void validate(const Shard& s, int classes, int dim, const std::string& what) {
  if (s.features.rows() != static_cast<Eigen::Index>(s.labels.size()) ||
      (s.features.rows() > 0 && s.features.cols() != dim))
    throw InvalidInput(detail::concat(what, ": feature matrix is ", s.features.rows(), "x",
                                      s.features.cols(), " for ", s.labels.size(),
                                      " labels of dimension ", dim));
  for (std::size_t i = 0; i < s.labels.size(); ++i)
    if (s.labels[i] < 0 || s.labels[i] >= classes)
      throw InvalidInput(detail::concat(what, ": label ", s.labels[i], " at row ", i,
                                        " outside [0, ", classes, ")"));
}

inline void validate(const FederatedDataset& ds) {
  if (ds.shards.empty()) throw InvalidInput("dataset has no client shards");
  if (ds.classes < 2 || ds.dim < 1)
    throw InvalidInput(detail::concat("dataset needs >= 2 classes and dim >= 1, got ", ds.classes,
                                      " classes, dim ", ds.dim));
  for (std::size_t n = 0; n < ds.shards.size(); ++n) {
    if (ds.shards[n].empty()) throw InvalidInput(detail::concat("client ", n, ": shard is empty"));
    validate(ds.shards[n], ds.classes, ds.dim, detail::concat("client ", n));
  }
  validate(ds.test, ds.classes, ds.dim, "test set");
  if (ds.total() != ds.declared_total)
    throw InvalidInput(detail::concat("shard sizes sum to ", ds.total(), ", declared total is ",
                                      ds.declared_total));
}

/// All client shards stacked in client order.
inline Shard pooled(const FederatedDataset& ds) {
  Shard out;
  out.features.resize(static_cast<Eigen::Index>(ds.total()), ds.dim);
  out.labels.reserve(ds.total());
  Eigen::Index row = 0;
  for (const auto& s : ds.shards) {
    out.features.middleRows(row, s.features.rows()) = s.features;
    row += s.features.rows();
    out.labels.insert(out.labels.end(), s.labels.begin(), s.labels.end());
  }
  return out;
}

/// Rows of `src` selected by `idx`, in that order.
inline Shard gather(const Shard& src, const std::vector<std::size_t>& idx) {
  Shard out;
  out.features.resize(static_cast<Eigen::Index>(idx.size()), src.features.cols());
  out.labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) =
        src.features.row(static_cast<Eigen::Index>(idx[i]));
    out.labels[i] = src.labels[idx[i]];
  }
  return out;
}

}  // namespace fedprice
