#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fusion/error.hpp"
#include "fusion/fen.hpp"
#include "fusion/head.hpp"
#include "fusion/image.hpp"
#include "fusion/params.hpp"
#include "fusion/random.hpp"
#include "fusion/replay.hpp"

namespace fusion {

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
inline double accuracy(const Eigen::MatrixXd& logits, std::span<const int> labels) {
  if (logits.rows() == 0 || labels.empty()) throw MetricError("accuracy of an empty batch");
  if (std::size_t(logits.rows()) != labels.size()) throw MetricError("logits and labels differ in length");
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    for (Eigen::Index j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, arg)) arg = j;
    hits += arg == labels[std::size_t(i)];
  }
  return double(hits) / double(labels.size());
}

struct CurvePoint {
  int num_classes = 0;
  double accuracy = 0.0;
  std::size_t eval_items = 0;  // held-out items behind this point
};

struct AccuracyCurve {
  std::vector<CurvePoint> points;
  std::string variant;
  std::uint64_t seed = 0;

  double final_accuracy() const {
    if (points.empty()) throw MetricError("empty accuracy curve");
    return points.back().accuracy;
  }

  void validate() const {
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (i > 0 && points[i].num_classes <= points[i - 1].num_classes)
        throw ValidationError("accuracy curve class counts must increase");
      if (!std::isfinite(points[i].accuracy)) throw ValidationError("non-finite accuracy");
    }
  }
};

struct FineTuneConfig {
  int steps = 5;
  double lr = 0.01;
  std::size_t buffer_capacity = kDefaultReservoirCapacity;
};

struct MetaTestStats {
  std::size_t w_updates = 0;
  std::size_t rehearsal_items = 0;
};

/// Features of every dataset item, computed in chunks.
inline Eigen::MatrixXd dataset_features(const ParameterBundle& p, const Dataset& d, std::size_t chunk = 64) {
  Eigen::MatrixXd out(Eigen::Index(d.size()), p.arch.feature_dim);
  for (std::size_t start = 0; start < d.size(); start += chunk) {
    const std::size_t n = std::min(chunk, d.size() - start);
    std::vector<Image> imgs;
    imgs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) imgs.push_back(d.image(start + i));
    out.middleRows(Eigen::Index(start), Eigen::Index(n)) = fen_forward(p, pack_images(imgs));
  }
  return out;
}

namespace detail {

struct FeatureExample {
  Eigen::RowVectorXd r;
  int y = 0;
};

inline void sgd_on_rows(Head& psi, const Eigen::MatrixXd& rows, const std::vector<int>& labels, double lr) {
  auto g = head_loss_and_grad<Eigen::MatrixXd>(psi, rows, labels, Pooling::None);
  for (std::size_t l = 0; l < psi.cln_w.size(); ++l) {
    psi.cln_w[l] -= lr * g.d_psi.cln_w[l];
    psi.cln_b[l] -= lr * g.d_psi.cln_b[l];
  }
}

}  // namespace detail

/// Class-incremental meta-test. theta and rho stay frozen; the CLN output
/// layer is re-initialised (zero, one row per test class) and the CLN is
/// fine-tuned class by class on `shots` examples. After each class the
/// accuracy over held-out items of all classes seen so far is recorded.
/// Class i of `classes` maps to CLN output i.
inline AccuracyCurve meta_test(const ParameterBundle& params, const Dataset& test, std::span<const int> classes,
                               int shots, const FineTuneConfig& ft, bool rehearsal, std::uint64_t seed,
                               MetaTestStats* stats = nullptr) {
  if (classes.empty()) throw ConfigError("meta-test needs at least one class");
  if (shots < 1) throw ConfigError("meta-test needs shots >= 1");
  if (ft.steps < 0 || !(ft.lr >= 0)) throw ConfigError("invalid fine-tune configuration");
  if (test.channels != params.arch.in_channels || test.height != params.arch.image_size ||
      test.width != params.arch.image_size)
    throw ShapeError("meta-test images do not match the trained input shape");

  std::vector<std::vector<std::size_t>> train_idx, held_idx;
  Rng rng = make_rng(seed, {0x4d54u});
  for (int c : classes) {
    if (c < 0 || c >= test.num_classes) throw ConfigError("meta-test class " + std::to_string(c) + " out of range");
    auto members = test.members_of(c);
    if (members.size() < std::size_t(shots) + 1)
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                        " samples; meta-test needs shots + 1");
    std::shuffle(members.begin(), members.end(), rng);
    train_idx.emplace_back(members.begin(), members.begin() + shots);
    held_idx.emplace_back(members.begin() + shots, members.end());
  }

  const Eigen::MatrixXd features = dataset_features(params, test);
  Head psi = head_from(params);
  psi.cln_w.back() = Eigen::MatrixXd::Zero(Eigen::Index(classes.size()), psi.cln_w.back().cols());
  psi.cln_b.back() = Eigen::MatrixXd::Zero(1, Eigen::Index(classes.size()));

  ReservoirBuffer<detail::FeatureExample> buffer(std::max<std::size_t>(ft.buffer_capacity, 1), derive_seed(seed, {0x5242u}));
  MetaTestStats local;
  AccuracyCurve curve;
  curve.seed = seed;
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    const int label = int(ci);
    Eigen::MatrixXd own(Eigen::Index(shots), features.cols());
    for (int s = 0; s < shots; ++s) own.row(s) = features.row(Eigen::Index(train_idx[ci][std::size_t(s)]));
    for (int step = 0; step < ft.steps; ++step) {
      Eigen::MatrixXd rows = own;
      std::vector<int> labels(std::size_t(shots), label);
      if (rehearsal && !buffer.empty()) {
        auto replay = buffer.batch(std::size_t(shots), derive_seed(seed, {0x5250u, ci, std::uint64_t(step)}));
        rows.conservativeResize(rows.rows() + Eigen::Index(replay.size()), Eigen::NoChange);
        for (std::size_t j = 0; j < replay.size(); ++j) {
          rows.row(Eigen::Index(shots) + Eigen::Index(j)) = replay[j].r;
          labels.push_back(replay[j].y);
        }
        local.rehearsal_items += replay.size();
      }
      detail::sgd_on_rows(psi, rows, labels, ft.lr);
      ++local.w_updates;
    }
    if (rehearsal)
      for (int s = 0; s < shots; ++s) buffer.insert({own.row(s), label});

    std::vector<int> labels;
    std::vector<Eigen::Index> rows_idx;
    for (std::size_t cj = 0; cj <= ci; ++cj)
      for (auto i : held_idx[cj]) {
        rows_idx.push_back(Eigen::Index(i));
        labels.push_back(int(cj));
      }
    Eigen::MatrixXd eval(Eigen::Index(rows_idx.size()), features.cols());
    for (std::size_t j = 0; j < rows_idx.size(); ++j) eval.row(Eigen::Index(j)) = features.row(rows_idx[j]);
    curve.points.push_back({int(ci + 1), accuracy(cln_forward_rows(psi, eval), labels), labels.size()});
  }
  if (stats) *stats = local;
  return curve;
}

/// meta_test on a dataset from another distribution, adapted to the trained
/// input shape (channel mean / replication, bilinear resize).
inline AccuracyCurve ood_evaluate(const ParameterBundle& params, const Dataset& ood, std::span<const int> classes,
                                  int shots, const FineTuneConfig& ft, std::uint64_t seed, bool rehearsal = false) {
  Dataset adapted = adapt_dataset(ood, params.arch.in_channels, params.arch.image_size, params.arch.image_size);
  return meta_test(params, adapted, classes, shots, ft, rehearsal, seed);
}

/// Seeded presentation order of classes.
inline std::vector<int> shuffled_classes(std::vector<int> classes, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x4f52u});
  std::shuffle(classes.begin(), classes.end(), rng);
  return classes;
}

}  // namespace fusion
