// SPDX-License-Identifier: Apache-2.0
//
// Few-shot UAP tasks: a support set used to craft the perturbation and a
// disjoint query set from the same classes used to judge it.
#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "muap/datasets.hpp"
#include "muap/rng.hpp"
#include "muap/victim.hpp"

namespace muap {

/// One image source together with the victim attacked on it.
struct EpisodeSource {
  LabeledImages pool;
  std::shared_ptr<const VictimModel> victim;
};

struct EpisodeShape {
  std::size_t n_way = 2;
  std::size_t support_shots = 2;
  std::size_t query_shots = 2;
};

struct EpisodeStream {
  std::vector<EpisodeSource> sources;
  std::vector<double> mix;  // empty means uniform
  std::uint64_t global_seed = 0;
  EpisodeShape shape;
};

struct FewShotEpisode {
  LabeledImages support;
  LabeledImages query;
  std::shared_ptr<const VictimModel> victim;
  std::string source_id;
  std::size_t source_index = 0;
  std::uint64_t episode_seed = 0;

  ImageShape image_shape() const { return support.shape(); }
};

inline std::uint64_t episode_seed(std::uint64_t global_seed, std::uint64_t index) {
  return derive_seed(global_seed, index);
}

namespace detail {

inline std::size_t pick_source(const EpisodeStream& s, Rng& rng) {
  const std::size_t n = s.sources.size();
  if (s.mix.empty()) return static_cast<std::size_t>(rng.below(n));
  if (s.mix.size() != n) throw InvalidArgument("mix has " + std::to_string(s.mix.size()) + " weights for " + std::to_string(n) + " sources");
  double total = 0.0;
  for (double w : s.mix) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("mix weights must be finite and nonnegative");
    total += w;
  }
  if (total <= 0.0) throw InvalidArgument("mix weights sum to zero");
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += s.mix[i];
    if (u < acc) return i;
  }
  return n - 1;
}

}  // namespace detail

/// Classes of `pool` that cannot supply `need` images raise
/// InsufficientDataError naming the class.
inline void check_pool(const LabeledImages& pool, std::size_t n_way, std::size_t need) {
  std::vector<std::size_t> counts(pool.num_classes, 0);
  for (int y : pool.labels) ++counts.at(static_cast<std::size_t>(y));
  std::size_t present = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) continue;
    ++present;
    if (counts[c] < need) {
      throw InsufficientDataError("pool '" + pool.source_id + "' class " + std::to_string(c) + " has " +
                                  std::to_string(counts[c]) + " images, episodes need " + std::to_string(need));
    }
  }
  if (present < n_way) {
    throw InsufficientDataError("pool '" + pool.source_id + "' has " + std::to_string(present) + " classes, episodes need " +
                                std::to_string(n_way));
  }
}

/// Pure function of (stream.global_seed, index).
inline FewShotEpisode sample_episode(const EpisodeStream& stream, std::uint64_t index) {
  if (stream.sources.empty()) throw InvalidArgument("episode stream has no sources");
  const EpisodeShape& es = stream.shape;
  if (es.n_way < 1 || es.support_shots < 1) throw InvalidArgument("episodes need at least one class and one support shot");
  const std::uint64_t seed = episode_seed(stream.global_seed, index);
  Rng rng(seed);
  const std::size_t si = detail::pick_source(stream, rng);
  const EpisodeSource& src = stream.sources[si];
  const std::size_t need = es.support_shots + es.query_shots;
  check_pool(src.pool, es.n_way, need);

  std::vector<int> classes;
  for (std::size_t c = 0; c < src.pool.num_classes; ++c)
    if (!src.pool.indices_of(static_cast<int>(c)).empty()) classes.push_back(static_cast<int>(c));
  rng.shuffle(classes);
  classes.resize(es.n_way);

  std::vector<std::size_t> sup, qry;
  for (int c : classes) {
    std::vector<std::size_t> idx = src.pool.indices_of(c);
    rng.shuffle(idx);
    sup.insert(sup.end(), idx.begin(), idx.begin() + static_cast<long>(es.support_shots));
    qry.insert(qry.end(), idx.begin() + static_cast<long>(es.support_shots), idx.begin() + static_cast<long>(need));
  }
  FewShotEpisode ep;
  ep.support = src.pool.subset(sup);
  if (!qry.empty()) ep.query = src.pool.subset(qry);
  ep.victim = src.victim;
  ep.source_id = src.pool.source_id;
  ep.source_index = si;
  ep.episode_seed = seed;
  return ep;
}

/// Per-class split into (meta-train, meta-test) pools. Within each class a
/// seeded shuffle assigns round(train_fraction * count) images to
/// meta-train; both pools keep file order.
inline std::pair<LabeledImages, LabeledImages> split_meta_pools(const LabeledImages& data, std::uint64_t seed,
                                                                double train_fraction = 0.8) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidArgument("train_fraction must lie in (0, 1)");
  std::vector<std::size_t> train, test;
  for (std::size_t c = 0; c < data.num_classes; ++c) {
    std::vector<std::size_t> idx = data.indices_of(static_cast<int>(c));
    if (idx.empty()) continue;
    if (idx.size() < 8) {
      throw InsufficientDataError("class " + std::to_string(c) + " of '" + data.source_id + "' has " +
                                  std::to_string(idx.size()) + " images, a meta split needs at least 8");
    }
    Rng rng(derive_seed(seed, c));
    rng.shuffle(idx);
    const auto k = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(idx.size())));
    train.insert(train.end(), idx.begin(), idx.begin() + static_cast<long>(k));
    test.insert(test.end(), idx.begin() + static_cast<long>(k), idx.end());
  }
  if (train.empty()) throw InsufficientDataError("no images to split");
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {data.subset(train), data.subset(test)};
}

}  // namespace muap
