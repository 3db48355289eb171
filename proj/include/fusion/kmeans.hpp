#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fusion/data_io.hpp"
#include "fusion/error.hpp"
#include "fusion/random.hpp"

namespace fusion {

/// Mapping of dataset rows to pseudo-labels. `indices[i]` is the dataset row
/// of entry i and `pseudo_labels[i]` its cluster; a full clustering has
/// indices 0..N-1, truncated ones keep a subset.
struct ClusterAssignment {
  std::vector<std::size_t> indices;
  std::vector<int> pseudo_labels;
  Eigen::MatrixXd centroids;  // k x D; empty when derived from true labels
  std::vector<std::size_t> sizes;
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // one entry per Lloyd iteration
  int iterations = 0;

  int k() const { return int(sizes.size()); }
  std::size_t size() const { return indices.size(); }

  std::vector<std::size_t> members(int cluster) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < indices.size(); ++i)
      if (pseudo_labels[i] == cluster) out.push_back(indices[i]);
    return out;
  }

  void validate() const {
    if (indices.size() != pseudo_labels.size()) throw ValidationError("assignment index/label length mismatch");
    std::vector<std::size_t> counts(sizes.size(), 0);
    for (int y : pseudo_labels) {
      if (y < 0 || y >= k()) throw ValidationError("pseudo-label out of range");
      ++counts[std::size_t(y)];
    }
    if (counts != sizes) throw ValidationError("cluster sizes do not match labels");
    if (!std::isfinite(inertia) || inertia < 0) throw ValidationError("inertia must be finite and non-negative");
  }
};

inline std::vector<std::size_t> count_sizes(const std::vector<int>& labels, int k) {
  std::vector<std::size_t> s(std::size_t(k), 0);
  for (int y : labels) ++s[std::size_t(y)];
  return s;
}

/// Oracle view: the dataset's true labels as an assignment.
inline ClusterAssignment assignment_from_labels(const Dataset& d) {
  ClusterAssignment a;
  a.indices.resize(d.size());
  std::iota(a.indices.begin(), a.indices.end(), std::size_t{0});
  a.pseudo_labels = d.labels;
  a.sizes = count_sizes(a.pseudo_labels, d.num_classes);
  return a;
}

/// Nearest-centroid assignment (ties to the lowest cluster index).
inline std::vector<int> kmeans_assign(const Eigen::MatrixXd& x, const Eigen::MatrixXd& centroids,
                                      std::vector<double>* sq_dist = nullptr) {
  std::vector<int> labels(std::size_t(x.rows()));
  if (sq_dist) sq_dist->assign(std::size_t(x.rows()), 0.0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
      const double d = (x.row(i) - centroids.row(j)).squaredNorm();
      if (d < best) {
        best = d;
        arg = int(j);
      }
    }
    labels[std::size_t(i)] = arg;
    if (sq_dist) (*sq_dist)[std::size_t(i)] = best;
  }
  return labels;
}

namespace detail {

inline Eigen::MatrixXd kmeanspp_seed(const Eigen::MatrixXd& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd c(k, x.cols());
  std::vector<bool> chosen(std::size_t(n), false);
  std::vector<double> d2(std::size_t(n), std::numeric_limits<double>::infinity());
  std::size_t first = uniform_index(rng, std::size_t(n));
  c.row(0) = x.row(Eigen::Index(first));
  chosen[first] = true;
  for (int j = 1; j < k; ++j) {
    double total = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[std::size_t(i)] = std::min(d2[std::size_t(i)], (x.row(i) - c.row(j - 1)).squaredNorm());
      if (!chosen[std::size_t(i)]) total += d2[std::size_t(i)];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double r = uniform01(rng) * total;
      pick = std::size_t(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        if (chosen[std::size_t(i)]) continue;
        r -= d2[std::size_t(i)];
        if (r <= 0) {
          pick = std::size_t(i);
          break;
        }
      }
      if (pick == std::size_t(n))  // rounding fell off the end
        for (Eigen::Index i = n - 1; i >= 0; --i)
          if (!chosen[std::size_t(i)] && d2[std::size_t(i)] > 0) {
            pick = std::size_t(i);
            break;
          }
    } else {
      std::vector<std::size_t> free;
      for (Eigen::Index i = 0; i < n; ++i)
        if (!chosen[std::size_t(i)]) free.push_back(std::size_t(i));
      pick = free[uniform_index(rng, free.size())];
    }
    chosen[pick] = true;
    c.row(j) = x.row(Eigen::Index(pick));
  }
  return c;
}

// Empty clusters take the point farthest from its centroid, drawn from
// clusters that keep at least one member.
inline void repair_empty(const Eigen::MatrixXd& x, Eigen::MatrixXd& centroids, std::vector<int>& labels,
                         std::vector<double>& sq_dist) {
  const int k = int(centroids.rows());
  auto sizes = count_sizes(labels, k);
  for (int j = 0; j < k; ++j) {
    if (sizes[std::size_t(j)] > 0) continue;
    std::size_t far = labels.size();
    double best = -1;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (sizes[std::size_t(labels[i])] > 1 && sq_dist[i] > best) {
        best = sq_dist[i];
        far = i;
      }
    if (far == labels.size()) throw StateError("k-means cannot repair an empty cluster");
    --sizes[std::size_t(labels[far])];
    labels[far] = j;
    ++sizes[std::size_t(j)];
    centroids.row(j) = x.row(Eigen::Index(far));
    sq_dist[far] = 0.0;
  }
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Iterates until assignments stop
/// changing or `max_iters` is reached; `inertia_trace` is non-increasing.
inline ClusterAssignment kmeans_partition(const Eigen::MatrixXd& x, int k, std::uint64_t seed, int max_iters = 300) {
  const Eigen::Index n = x.rows();
  if (n < 1 || x.cols() < 1) throw EmptySetError("k-means on an empty embedding set");
  if (k < 1 || k > n) throw ConfigError("k-means needs 1 <= k <= N (k=" + std::to_string(k) + ", N=" + std::to_string(n) + ")");
  if (max_iters < 1) throw ConfigError("k-means max_iters must be >= 1");

  Rng rng = make_rng(seed, {0x6bu});
  Eigen::MatrixXd centroids = detail::kmeanspp_seed(x, k, rng);
  std::vector<double> sq;
  std::vector<int> labels = kmeans_assign(x, centroids, &sq);
  detail::repair_empty(x, centroids, labels, sq);

  ClusterAssignment out;
  out.inertia_trace.push_back(std::accumulate(sq.begin(), sq.end(), 0.0));
  int it = 1;
  for (; it < max_iters; ++it) {
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(k, x.cols());
    auto sizes = count_sizes(labels, k);
    for (Eigen::Index i = 0; i < n; ++i) next.row(labels[std::size_t(i)]) += x.row(i);
    for (int j = 0; j < k; ++j) next.row(j) /= double(sizes[std::size_t(j)]);
    centroids = next;
    std::vector<int> relabel = kmeans_assign(x, centroids, &sq);
    detail::repair_empty(x, centroids, relabel, sq);
    out.inertia_trace.push_back(std::accumulate(sq.begin(), sq.end(), 0.0));
    const bool stable = relabel == labels;
    labels = std::move(relabel);
    if (stable) break;
  }
  out.iterations = int(out.inertia_trace.size());
  out.indices.resize(std::size_t(n));
  std::iota(out.indices.begin(), out.indices.end(), std::size_t{0});
  out.pseudo_labels = std::move(labels);
  out.centroids = std::move(centroids);
  out.sizes = count_sizes(out.pseudo_labels, k);
  out.inertia = out.inertia_trace.back();
  return out;
}

inline ClusterAssignment kmeans_partition(const EmbeddingSet& e, int k, std::uint64_t seed, int max_iters = 300) {
  e.validate();
  return kmeans_partition(Eigen::MatrixXd(e.vectors.cast<double>()), k, seed, max_iters);
}

// ---------------------------------------------------------------------------
// CSV persistence: index,pseudo_label

inline void write_assignment_csv(const ClusterAssignment& a, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "index,pseudo_label\n";
  for (std::size_t i = 0; i < a.size(); ++i) out << a.indices[i] << ',' << a.pseudo_labels[i] << '\n';
}

inline ClusterAssignment read_assignment_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "index,pseudo_label") throw FormatError("unexpected assignment CSV header in " + path.string());
  ClusterAssignment a;
  int k = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::size_t idx;
    char comma;
    int y;
    if (!(row >> idx >> comma >> y) || comma != ',' || y < 0) throw FormatError("bad assignment CSV row: " + line);
    a.indices.push_back(idx);
    a.pseudo_labels.push_back(y);
    k = std::max(k, y + 1);
  }
  a.sizes = count_sizes(a.pseudo_labels, k);
  return a;
}

}  // namespace fusion
