#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <utility>
#include <string>
#include <vector>

#include "fusion/error.hpp"
#include "fusion/image.hpp"
#include "fusion/kmeans.hpp"
#include "fusion/log.hpp"
#include "fusion/random.hpp"

namespace fusion {

/// One episode: support items all share `cluster_id`; the query mixes the
/// rest of the cluster with items from other clusters. `*_source` hold the
/// dataset row of each item (-1 for synthesised copies).
struct Task {
  std::vector<LabeledExample> support;
  std::vector<LabeledExample> query;
  std::vector<std::ptrdiff_t> support_source;
  std::vector<std::ptrdiff_t> query_source;
  int cluster_id = 0;

  void validate() const {
    if (support.empty()) throw TaskError("task has an empty support set");
    if (query.empty()) throw TaskError("task has an empty query set");
    for (const auto& e : support)
      if (e.y != cluster_id) throw TaskError("support label differs from the task cluster");
  }
};

/// Smallest cluster that can form a task (one support, one query element).
inline constexpr std::size_t kMinTaskCluster = 2;

inline std::size_t unbalanced_support_size(std::size_t cluster_size) { return (2 * cluster_size + 2) / 3; }

namespace detail {

inline void push_item(std::vector<LabeledExample>& items, std::vector<std::ptrdiff_t>& src, const Dataset& d,
                      std::size_t idx, int label) {
  items.push_back({d.image(idx), label});
  src.push_back(std::ptrdiff_t(idx));
}

// Up to `count` distinct entries of `a` whose label is not `cluster`.
inline void draw_other_clusters(Task& t, const ClusterAssignment& a, const Dataset& d, int cluster, std::size_t count,
                                Rng& rng) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.pseudo_labels[i] != cluster) pool.push_back(i);
  count = std::min(count, pool.size());
  for (std::size_t j = 0; j < count; ++j) {
    std::size_t r = j + uniform_index(rng, pool.size() - j);
    std::swap(pool[j], pool[r]);
    push_item(t.query, t.query_source, d, a.indices[pool[j]], a.pseudo_labels[pool[j]]);
  }
}

}  // namespace detail

/// Unbalanced task from one cluster: ceil(2K/3) members form the support, the
/// remaining members plus `q_random` items of other clusters form the query.
/// When `take` is set, only that many cluster members (a random subset) enter
/// the split.
inline Task make_unbalanced_task(const ClusterAssignment& a, const Dataset& d, int cluster_id, std::size_t q_random,
                                 std::uint64_t seed, std::optional<std::size_t> take = std::nullopt) {
  if (cluster_id < 0 || cluster_id >= a.k()) throw TaskError("cluster id out of range");
  Rng rng = make_rng(seed, {0x75u, std::uint64_t(cluster_id)});
  std::vector<std::size_t> members = a.members(cluster_id);
  if (members.size() < kMinTaskCluster)
    throw TaskError("cluster " + std::to_string(cluster_id) + " has " + std::to_string(members.size()) +
                    " element(s); at least 2 are needed");
  std::shuffle(members.begin(), members.end(), rng);
  if (take) members.resize(std::clamp(*take, kMinTaskCluster, members.size()));
  const std::size_t n_support = unbalanced_support_size(members.size());
  Task t;
  t.cluster_id = cluster_id;
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (i < n_support)
      detail::push_item(t.support, t.support_source, d, members[i], cluster_id);
    else
      detail::push_item(t.query, t.query_source, d, members[i], cluster_id);
  }
  detail::draw_other_clusters(t, a, d, cluster_id, q_random, rng);
  t.validate();
  return t;
}

struct BalancedTaskShape {
  std::size_t n_support = 10;
  std::size_t n_query_same = 5;
  std::size_t n_query_random = 10;
};

/// Fixed-size task over an assignment (true labels in oracle mode, or a
/// truncated clustering).
inline Task make_balanced_task(const Dataset& d, const ClusterAssignment& a, int class_id,
                               const BalancedTaskShape& shape, std::uint64_t seed) {
  if (class_id < 0 || class_id >= a.k()) throw TaskError("class id out of range");
  std::vector<std::size_t> members = a.members(class_id);
  if (shape.n_support < 1) throw TaskError("balanced task needs n_support >= 1");
  if (members.size() < shape.n_support + shape.n_query_same)
    throw TaskError("class " + std::to_string(class_id) + " has " + std::to_string(members.size()) +
                    " samples; balanced task needs " + std::to_string(shape.n_support + shape.n_query_same));
  Rng rng = make_rng(seed, {0x62u, std::uint64_t(class_id)});
  std::shuffle(members.begin(), members.end(), rng);
  Task t;
  t.cluster_id = class_id;
  for (std::size_t i = 0; i < shape.n_support; ++i) detail::push_item(t.support, t.support_source, d, members[i], class_id);
  for (std::size_t i = 0; i < shape.n_query_same; ++i)
    detail::push_item(t.query, t.query_source, d, members[shape.n_support + i], class_id);
  detail::draw_other_clusters(t, a, d, class_id, shape.n_query_random, rng);
  t.validate();
  return t;
}

inline Task make_balanced_task(const Dataset& d, int class_id, const BalancedTaskShape& shape, std::uint64_t seed) {
  return make_balanced_task(d, assignment_from_labels(d), class_id, shape, seed);
}

/// Drop clusters smaller than n and subsample the rest to exactly n members.
/// Surviving clusters are relabelled 0..k'-1 in their original order.
inline ClusterAssignment truncate_to_balanced(const ClusterAssignment& a, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ConfigError("balanced truncation needs n >= 2");
  Rng rng = make_rng(seed, {0x74u});
  ClusterAssignment out;
  std::vector<int> kept;
  for (int c = 0; c < a.k(); ++c) {
    std::vector<std::size_t> entries;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.pseudo_labels[i] == c) entries.push_back(i);
    if (entries.size() < n) continue;
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(n);
    std::sort(entries.begin(), entries.end());
    const int label = int(kept.size());
    kept.push_back(c);
    for (auto e : entries) {
      out.indices.push_back(a.indices[e]);
      out.pseudo_labels.push_back(label);
    }
  }
  if (kept.empty()) throw ConfigError("no cluster has at least " + std::to_string(n) + " elements");
  out.sizes.assign(kept.size(), n);
  if (a.centroids.rows() == a.k()) {
    out.centroids.resize(Eigen::Index(kept.size()), a.centroids.cols());
    for (std::size_t j = 0; j < kept.size(); ++j) out.centroids.row(Eigen::Index(j)) = a.centroids.row(kept[j]);
  }
  out.inertia = 0.0;  // not meaningful after subsampling
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

inline constexpr std::array<double, 4> kCropFractions = {0.75, 0.80, 0.85, 0.90};

/// One random combination of flips, affine warp, crop-and-resize and colour
/// jitter. At least one transform is always applied.
inline Image random_augment(const Image& src, Rng& rng) {
  std::array<bool, 5> use{};
  bool any = false;
  for (bool& u : use) any |= (u = uniform01(rng) < 0.5);
  if (!any) use[uniform_index(rng, use.size())] = true;

  Image im = src;
  if (use[0]) im = flip_horizontal(im);
  if (use[1]) im = flip_vertical(im);
  if (use[2]) {
    const double deg = std::numbers::pi / 180.0;
    im = affine_warp(im, uniform(rng, -15, 15) * deg, uniform(rng, 0.9, 1.1), uniform(rng, -10, 10) * deg,
                     uniform(rng, -0.1, 0.1) * im.height, uniform(rng, -0.1, 0.1) * im.width);
  }
  if (use[3]) {
    const double f = kCropFractions[uniform_index(rng, kCropFractions.size())];
    const double side = std::sqrt(f);
    im = crop_resize(im, f, uniform(rng, 0, (1 - side) * im.height), uniform(rng, 0, (1 - side) * im.width));
  }
  if (use[4])
    im = color_jitter(im, uniform(rng, 0.8, 1.2), uniform(rng, 0.8, 1.2), uniform(rng, 0.8, 1.2),
                      uniform(rng, -0.02, 0.02));
  for (double& v : im.pixels) v = std::clamp(v, 0.0, 1.0);
  return im;
}

namespace detail {

// Augmented cluster plus, per output item, the index of its source in
// `cluster` (-1 for synthesised copies).
inline std::pair<std::vector<LabeledExample>, std::vector<std::ptrdiff_t>> augment_tracked(
    const std::vector<LabeledExample>& cluster, std::size_t target, std::uint64_t seed) {
  if (target < 1) throw ConfigError("augmentation target must be >= 1");
  if (cluster.empty()) throw TaskError("cannot augment an empty cluster");
  Rng rng = make_rng(seed, {0x61u});
  std::vector<LabeledExample> out;
  std::vector<std::ptrdiff_t> src;
  if (cluster.size() >= target) {
    std::vector<std::size_t> order(cluster.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(target);
    std::sort(order.begin(), order.end());
    for (auto i : order) {
      out.push_back(cluster[i]);
      src.push_back(std::ptrdiff_t(i));
    }
    return {out, src};
  }
  out = cluster;
  for (std::size_t i = 0; i < cluster.size(); ++i) src.push_back(std::ptrdiff_t(i));
  while (out.size() < target) {
    const auto& from = cluster[uniform_index(rng, cluster.size())];
    out.push_back({random_augment(from.x, rng), from.y});
    src.push_back(-1);
  }
  return {out, src};
}

}  // namespace detail

/// Subsample clusters above `target`; pad smaller ones with augmented copies of
/// random members. Originals come first and labels never change.
inline std::vector<LabeledExample> augment_to_size(const std::vector<LabeledExample>& cluster, std::size_t target,
                                                   std::uint64_t seed) {
  return detail::augment_tracked(cluster, target, seed).first;
}

/// Balanced task from an augmented cluster: the cluster is brought to
/// `target` elements, then split as in `make_balanced_task`.
inline Task make_augmented_task(const ClusterAssignment& a, const Dataset& d, int cluster_id, std::size_t target,
                                const BalancedTaskShape& shape, std::uint64_t seed) {
  std::vector<std::size_t> members = a.members(cluster_id);
  if (members.empty()) throw TaskError("cluster " + std::to_string(cluster_id) + " is empty");
  if (target < shape.n_support + shape.n_query_same) throw ConfigError("augmentation target smaller than task shape");
  std::vector<LabeledExample> cluster;
  for (auto m : members) cluster.push_back({d.image(m), cluster_id});
  auto [filled, local] = detail::augment_tracked(cluster, target, seed);
  std::vector<std::ptrdiff_t> src(filled.size(), -1);
  for (std::size_t i = 0; i < filled.size(); ++i)
    if (local[i] >= 0) src[i] = std::ptrdiff_t(members[std::size_t(local[i])]);
  Rng rng = make_rng(seed, {0x63u, std::uint64_t(cluster_id)});
  std::vector<std::size_t> order(filled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  Task t;
  t.cluster_id = cluster_id;
  for (std::size_t i = 0; i < shape.n_support + shape.n_query_same; ++i) {
    auto& items = i < shape.n_support ? t.support : t.query;
    auto& srcs = i < shape.n_support ? t.support_source : t.query_source;
    items.push_back(filled[order[i]]);
    srcs.push_back(src[order[i]]);
  }
  detail::draw_other_clusters(t, a, d, cluster_id, shape.n_query_random, rng);
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Loss balancing

struct BalancingVector {
  std::vector<double> gamma;
  std::vector<double> gamma_norm;
  double epsilon = 1e-8;
  double c_max = 0;
  double c_min = 0;

  double weight(int cluster_id) const {
    if (cluster_id < 0 || std::size_t(cluster_id) >= gamma_norm.size()) throw ValidationError("cluster id out of range");
    return gamma_norm[std::size_t(cluster_id)];
  }
};

/// Gamma_c = (C_max - C_min) / (C_c - C_min + eps), min-max normalised. All
/// equal sizes give uniform weights of one.
inline BalancingVector compute_balancing_vector(const std::vector<std::size_t>& sizes, double epsilon = 1e-8) {
  if (sizes.empty()) throw ValidationError("balancing needs at least one cluster");
  if (!(epsilon > 0)) throw ValidationError("balancing epsilon must be positive");
  for (auto s : sizes)
    if (s == 0) throw ValidationError("cluster sizes must be positive");
  BalancingVector b;
  b.epsilon = epsilon;
  b.c_max = double(*std::max_element(sizes.begin(), sizes.end()));
  b.c_min = double(*std::min_element(sizes.begin(), sizes.end()));
  if (b.c_max == b.c_min) {
    b.gamma.assign(sizes.size(), 1.0);
    b.gamma_norm.assign(sizes.size(), 1.0);
    return b;
  }
  for (auto s : sizes) b.gamma.push_back((b.c_max - b.c_min) / (double(s) - b.c_min + epsilon));
  const double g_max = *std::max_element(b.gamma.begin(), b.gamma.end());
  const double g_min = *std::min_element(b.gamma.begin(), b.gamma.end());
  for (double g : b.gamma) b.gamma_norm.push_back((g - g_min) / (g_max - g_min));
  logger().warn("loss balancing gives weight 0 to the largest cluster(s) (size {})", b.c_max);
  return b;
}

inline void write_balancing_csv(const BalancingVector& b, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "cluster_id,gamma_norm\n";
  for (std::size_t c = 0; c < b.gamma_norm.size(); ++c) out << c << ',' << b.gamma_norm[c] << '\n';
}

/// Number of cluster elements to use, linear in the cluster size between
/// (min_size -> min_n) and (max_size -> max_n), rounded to nearest.
inline int proportional_sample_size(int cluster_size, int min_n, int max_n, int min_size, int max_size) {
  if (min_n > max_n) throw ConfigError("proportional sampling needs min_n <= max_n");
  if (cluster_size < min_size || cluster_size > max_size)
    throw ConfigError("cluster size " + std::to_string(cluster_size) + " outside [" + std::to_string(min_size) + ", " +
                      std::to_string(max_size) + "]");
  if (min_size == max_size) return min_n;
  const double t = double(cluster_size - min_size) / double(max_size - min_size);
  return int(std::lround(min_n + t * (max_n - min_n)));
}

}  // namespace fusion
