#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "fusion/adam.hpp"
#include "fusion/error.hpp"
#include "fusion/fen.hpp"
#include "fusion/head.hpp"
#include "fusion/kmeans.hpp"
#include "fusion/log.hpp"
#include "fusion/params.hpp"
#include "fusion/random.hpp"
#include "fusion/replay.hpp"
#include "fusion/task_builder.hpp"

namespace fusion {

enum class Variant { Meml, MemlMean, Oml, OmlSingle };
enum class GradientOrder { Second, First };
/// What "re-initialise W_i" touches per task: the output row of the task's
/// class (default), the whole CLN, or nothing.
enum class WReset { Row, Full, None };

/// Where tasks come from: unbalanced clusters, truncated balanced clusters,
/// augmented balanced clusters, or true labels.
enum class TaskMode { Unbalanced, Balanced, Augmented, Oracle };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Meml: return "MEML";
    case Variant::MemlMean: return "MEML-mean";
    case Variant::Oml: return "OML";
    case Variant::OmlSingle: return "OML-single";
  }
  return "?";
}

inline Variant variant_from_string(std::string_view s) {
  for (Variant v : {Variant::Meml, Variant::MemlMean, Variant::Oml, Variant::OmlSingle})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected MEML, MEML-mean, OML or OML-single)");
}

inline std::string_view to_string(GradientOrder o) { return o == GradientOrder::Second ? "second" : "first"; }

inline GradientOrder gradient_order_from_string(std::string_view s) {
  if (s == "second") return GradientOrder::Second;
  if (s == "first") return GradientOrder::First;
  throw ConfigError("unknown gradient order '" + std::string(s) + "' (expected second or first)");
}

inline std::string_view to_string(WReset r) {
  switch (r) {
    case WReset::Row: return "row";
    case WReset::Full: return "full";
    case WReset::None: return "none";
  }
  return "?";
}

inline WReset w_reset_from_string(std::string_view s) {
  for (WReset r : {WReset::Row, WReset::Full, WReset::None})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown w_reset '" + std::string(s) + "' (expected row, full or none)");
}

inline std::string_view to_string(TaskMode m) {
  switch (m) {
    case TaskMode::Unbalanced: return "unbalanced";
    case TaskMode::Balanced: return "balanced";
    case TaskMode::Augmented: return "augmented";
    case TaskMode::Oracle: return "oracle";
  }
  return "?";
}

inline TaskMode task_mode_from_string(std::string_view s) {
  for (TaskMode m : {TaskMode::Unbalanced, TaskMode::Balanced, TaskMode::Augmented, TaskMode::Oracle})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown task mode '" + std::string(s) + "'");
}

struct TrainingConfig {
  double inner_lr = 0.01;
  double outer_lr = 1e-4;
  int steps = 40000;
  int meta_batch = 1;
  Variant variant = Variant::Meml;
  GradientOrder gradient_order = GradientOrder::Second;
  bool loss_balancing = false;
  std::size_t coreset_capacity = 0;  // 0: no meta-train rehearsal
  std::uint64_t seed = 0;

  TaskMode task_mode = TaskMode::Unbalanced;
  std::size_t q_random = 10;
  BalancedTaskShape balanced_shape{};
  std::size_t balanced_size = 20;  // cluster size after truncation/augmentation
  WReset w_reset = WReset::Row;
  /// Draw between [min, max] cluster members per task, proportional to the
  /// cluster size. Disabled when max == 0.
  int proportional_min = 0;
  int proportional_max = 0;

  void validate() const {
    if (!(inner_lr >= 0) || !(outer_lr >= 0) || !std::isfinite(inner_lr) || !std::isfinite(outer_lr))
      throw ConfigError("learning rates must be finite and non-negative");
    if (steps < 1) throw ConfigError("training needs steps >= 1");
    if (meta_batch != 1) throw ConfigError("only meta_batch = 1 is supported");
    if (task_mode != TaskMode::Unbalanced && balanced_size < balanced_shape.n_support + balanced_shape.n_query_same)
      throw ConfigError("balanced_size is smaller than the balanced task shape");
    if (proportional_max > 0 && (proportional_min < 2 || proportional_min > proportional_max))
      throw ConfigError("proportional sampling needs 2 <= min <= max");
  }
};

// ---------------------------------------------------------------------------
// Inner loop

/// One inner gradient step: rows of the support feature matrix it used, the
/// pooling applied to them, and psi before the step.
struct InnerStep {
  std::vector<int> rows;
  Pooling mode = Pooling::Attention;
  Head psi_before;
};

struct InnerResult {
  ParameterBundle params;  // theta untouched, psi after the inner loop
  Head psi;
  double inner_lr = 0.0;
  int cluster_id = 0;
  std::vector<InnerStep> steps;
  Eigen::MatrixXd support_features;
  /// FEN caches covering the support; `cache_rows[i]` lists the support rows
  /// held by `caches[i]`.
  std::vector<FenCache> caches;
  std::vector<std::vector<int>> cache_rows;

  int step_count() const { return int(steps.size()); }
};

namespace detail {

inline Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, const std::vector<int>& rows) {
  Eigen::MatrixXd out(Eigen::Index(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(Eigen::Index(i)) = m.row(rows[i]);
  return out;
}

inline void apply_step(InnerResult& r, std::vector<int> rows, Pooling mode) {
  if (rows.empty()) throw TaskError("inner step over an empty support set");
  Eigen::MatrixXd feats = take_rows(r.support_features, rows);
  const int label = r.cluster_id;
  std::vector<int> labels(mode == Pooling::None ? rows.size() : 1, label);
  auto g = head_loss_and_grad<Eigen::MatrixXd>(r.psi, feats, labels, mode);
  r.steps.push_back({std::move(rows), mode, r.psi});
  head_axpy(r.psi, -r.inner_lr, g.d_psi);
}

inline InnerResult begin_inner(const ParameterBundle& params, const Task& task, double inner_lr) {
  task.validate();
  InnerResult r;
  r.params = params;
  r.psi = head_from(params);
  r.inner_lr = inner_lr;
  r.cluster_id = task.cluster_id;
  return r;
}

// Whole support in one FEN batch.
inline void batched_features(InnerResult& r, const ParameterBundle& params, const Task& task) {
  r.caches.emplace_back();
  r.support_features = fen_forward(params, task.support, &r.caches.back());
  std::vector<int> all(task.support.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  r.cache_rows.push_back(std::move(all));
}

inline void finish_inner(InnerResult& r) { head_into(r.psi, r.params); }

}  // namespace detail

/// One gradient step of psi on the attention-pooled meta-example of the
/// support set (or its plain mean when `mode` is Pooling::Mean).
inline InnerResult inner_update_meml(const ParameterBundle& params, const Task& task, double inner_lr,
                                     Pooling mode = Pooling::Attention) {
  InnerResult r = detail::begin_inner(params, task, inner_lr);
  detail::batched_features(r, params, task);
  std::vector<int> all = r.cache_rows.front();
  detail::apply_step(r, std::move(all), mode);
  detail::finish_inner(r);
  return r;
}

/// One gradient step per support example, in support order. Each step runs
/// the FEN on its own example, as a trajectory learner does.
inline InnerResult inner_update_oml(const ParameterBundle& params, const Task& task, double inner_lr) {
  InnerResult r = detail::begin_inner(params, task, inner_lr);
  r.support_features.resize(Eigen::Index(task.support.size()), params.arch.feature_dim);
  for (std::size_t k = 0; k < task.support.size(); ++k) {
    r.caches.emplace_back();
    std::vector<LabeledExample> one{task.support[k]};
    r.support_features.row(Eigen::Index(k)) = fen_forward(params, one, &r.caches.back()).row(0);
    r.cache_rows.push_back({int(k)});
    detail::apply_step(r, {int(k)}, Pooling::None);
  }
  detail::finish_inner(r);
  return r;
}

/// One gradient step on a single support example chosen with `seed`.
inline InnerResult inner_update_single(const ParameterBundle& params, const Task& task, double inner_lr,
                                       std::uint64_t seed) {
  InnerResult r = detail::begin_inner(params, task, inner_lr);
  Rng rng = make_rng(seed, {0x53u});
  const int k = int(uniform_index(rng, task.support.size()));
  r.caches.emplace_back();
  std::vector<LabeledExample> one{task.support[std::size_t(k)]};
  r.support_features = Eigen::MatrixXd::Zero(Eigen::Index(task.support.size()), params.arch.feature_dim);
  r.support_features.row(k) = fen_forward(params, one, &r.caches.back()).row(0);
  r.cache_rows.push_back({k});
  detail::apply_step(r, {k}, Pooling::None);
  detail::finish_inner(r);
  return r;
}

inline InnerResult run_inner(const ParameterBundle& params, const Task& task, const TrainingConfig& cfg,
                             std::uint64_t step_seed) {
  switch (cfg.variant) {
    case Variant::Meml: return inner_update_meml(params, task, cfg.inner_lr, Pooling::Attention);
    case Variant::MemlMean: return inner_update_meml(params, task, cfg.inner_lr, Pooling::Mean);
    case Variant::Oml: return inner_update_oml(params, task, cfg.inner_lr);
    case Variant::OmlSingle: return inner_update_single(params, task, cfg.inner_lr, step_seed);
  }
  throw ConfigError("unknown variant");
}

// ---------------------------------------------------------------------------
// Outer loop

inline double apply_loss_balancing(double loss, const BalancingVector& b, int cluster_id) {
  return loss * b.weight(cluster_id);
}

struct MetaGradient {
  ParameterBundle grad;
  double outer_loss = 0.0;
};

/// Gradient of the (weighted) query cross-entropy of the post-inner model
/// w.r.t. the pre-inner parameters. Second order back-propagates through
/// every inner step; first order treats the inner result as a constant.
inline MetaGradient meta_gradient(const ParameterBundle& params, const InnerResult& inner,
                                  const std::vector<LabeledExample>& query, GradientOrder order, double weight = 1.0) {
  if (query.empty()) throw TaskError("outer update with an empty query set");
  FenCache qcache;
  Eigen::MatrixXd rq = fen_forward(params, query, &qcache);
  std::vector<int> labels;
  labels.reserve(query.size());
  for (const auto& e : query) labels.push_back(e.y);
  auto out = head_loss_and_grad<Eigen::MatrixXd>(inner.psi, rq, labels, Pooling::None, weight);

  Head v = out.d_psi;
  Eigen::MatrixXd adj = Eigen::MatrixXd::Zero(inner.support_features.rows(), inner.support_features.cols());
  if (order == GradientOrder::Second && inner.inner_lr != 0.0) {
    for (std::size_t j = inner.steps.size(); j-- > 0;) {
      const InnerStep& s = inner.steps[j];
      Eigen::MatrixXd feats = detail::take_rows(inner.support_features, s.rows);
      std::vector<int> step_labels(s.mode == Pooling::None ? s.rows.size() : 1, inner.cluster_id);
      HeadHvp h = head_hvp(s.psi_before, feats, step_labels, s.mode, v);
      for (std::size_t i = 0; i < s.rows.size(); ++i) adj.row(s.rows[i]) -= inner.inner_lr * h.features.row(Eigen::Index(i));
      head_axpy(v, -inner.inner_lr, h.psi);
    }
  }

  MetaGradient mg{params.zeros_like(), out.loss};
  head_into(v, mg.grad);
  fen_backward(params, qcache, out.d_features, mg.grad);
  if (order == GradientOrder::Second && inner.inner_lr != 0.0)
    for (std::size_t c = 0; c < inner.caches.size(); ++c)
      fen_backward(params, inner.caches[c], detail::take_rows(adj, inner.cache_rows[c]), mg.grad);
  return mg;
}

/// Outer-loop parameter set: phi plus FiLM when the architecture has it.
inline GroupMask outer_groups(const ArchConfig& a) {
  GroupMask m = GroupMask::phi();
  m.film = m.context = a.film;
  return m;
}

struct OuterResult {
  ParameterBundle params;
  double outer_loss = 0.0;
};

/// One Adam step on phi against the query loss of the inner result.
inline OuterResult outer_update(const ParameterBundle& params, const InnerResult& inner,
                                const std::vector<LabeledExample>& query, double outer_lr, GradientOrder order,
                                Adam& adam, double weight = 1.0) {
  MetaGradient mg = meta_gradient(params, inner, query, order, weight);
  OuterResult r{params, mg.outer_loss};
  adam.step(r.params, mg.grad, outer_lr, outer_groups(params.arch));
  return r;
}

inline OuterResult outer_update(const ParameterBundle& params, const InnerResult& inner, const Task& task,
                                double outer_lr, GradientOrder order, Adam& adam, double weight = 1.0) {
  return outer_update(params, inner, task.query, outer_lr, order, adam, weight);
}

// ---------------------------------------------------------------------------
// Meta-training

struct TrainLog {
  std::vector<int> cluster_id;
  std::vector<double> outer_loss;
  std::vector<double> wall_ms;  // inner + outer compute per step
  std::vector<int> inner_steps;

  std::size_t size() const { return outer_loss.size(); }

  double mean_wall_ms() const {
    if (wall_ms.empty()) return 0.0;
    double s = 0;
    for (double w : wall_ms) s += w;
    return s / double(wall_ms.size());
  }
};

/// step,cluster_id,outer_loss,wall_ms
inline void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path, bool with_timing = true) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "step,cluster_id,outer_loss,wall_ms\n";
  for (std::size_t i = 0; i < log.size(); ++i)
    out << i << ',' << log.cluster_id[i] << ',' << log.outer_loss[i] << ',' << (with_timing ? log.wall_ms[i] : 0.0)
        << '\n';
}

struct TrainResult {
  ParameterBundle params;
  TrainLog log;
};

namespace detail {

template <class E>
[[noreturn]] void rethrow_at_step(const E& e, int step) {
  throw E("meta-train step " + std::to_string(step) + ": " + e.what());
}

struct TaskSource {
  const Dataset* data = nullptr;
  ClusterAssignment assignment;
  std::vector<int> usable;
  std::size_t max_size = 0, min_size = 0;
};

inline TaskSource make_task_source(const Dataset& d, const ClusterAssignment& a, const TrainingConfig& cfg) {
  TaskSource s;
  s.data = &d;
  switch (cfg.task_mode) {
    case TaskMode::Unbalanced:
    case TaskMode::Augmented: s.assignment = a; break;
    case TaskMode::Balanced: s.assignment = truncate_to_balanced(a, cfg.balanced_size, derive_seed(cfg.seed, {0x7472u})); break;
    case TaskMode::Oracle: s.assignment = assignment_from_labels(d); break;
  }
  const std::size_t need = cfg.task_mode == TaskMode::Unbalanced ? kMinTaskCluster
                           : cfg.task_mode == TaskMode::Augmented ? 1
                                                                  : cfg.balanced_shape.n_support + cfg.balanced_shape.n_query_same;
  std::size_t skipped = 0;
  for (int c = 0; c < s.assignment.k(); ++c) {
    const std::size_t n = s.assignment.sizes[std::size_t(c)];
    if (n >= need)
      s.usable.push_back(c);
    else
      ++skipped;
  }
  if (skipped > 0) logger().warn("skipping {} cluster(s) with fewer than {} element(s)", skipped, need);
  if (s.usable.empty()) throw TaskError("no cluster is large enough to form a task");
  s.max_size = *std::max_element(s.assignment.sizes.begin(), s.assignment.sizes.end());
  s.min_size = s.assignment.sizes[std::size_t(s.usable.front())];
  for (int c : s.usable) s.min_size = std::min(s.min_size, s.assignment.sizes[std::size_t(c)]);
  return s;
}

inline Task sample_task(const TaskSource& s, const TrainingConfig& cfg, int cluster, std::uint64_t seed) {
  const Dataset& d = *s.data;
  switch (cfg.task_mode) {
    case TaskMode::Unbalanced: {
      std::optional<std::size_t> take;
      if (cfg.proportional_max > 0) {
        const int size = int(s.assignment.sizes[std::size_t(cluster)]);
        take = std::size_t(proportional_sample_size(size, cfg.proportional_min, cfg.proportional_max, int(s.min_size),
                                                    int(s.max_size)));
      }
      return make_unbalanced_task(s.assignment, d, cluster, cfg.q_random, seed, take);
    }
    case TaskMode::Balanced:
    case TaskMode::Oracle: return make_balanced_task(d, s.assignment, cluster, cfg.balanced_shape, seed);
    case TaskMode::Augmented:
      return make_augmented_task(s.assignment, d, cluster, cfg.balanced_size, cfg.balanced_shape, seed);
  }
  throw ConfigError("unknown task mode");
}

}  // namespace detail

/// Re-initialise the task's CLN weights and the matching optimiser state.
inline void reset_task_weights(ParameterBundle& p, Adam& adam, WReset mode, int cluster, std::uint64_t seed) {
  if (mode == WReset::None) return;
  if (mode == WReset::Full) {
    p.cln = init_cln(p.arch, p.arch.num_classes, seed);
    adam.reset(GroupMask::only(Group::Cln));
    return;
  }
  Linear& out = p.cln.back();
  if (cluster < 0 || cluster >= out.w.rows()) throw TaskError("task cluster outside the CLN output range");
  Rng rng = make_rng(seed, {0x524fu});
  const double sd = std::sqrt(1.0 / double(out.w.cols()));
  for (Eigen::Index j = 0; j < out.w.cols(); ++j) out.w(cluster, j) = gaussian(rng, 0.0, sd);
  out.b(cluster) = 0.0;
  const std::string prefix = "cln.linear" + std::to_string(p.cln.size() - 1);
  adam.reset_rows(prefix + ".weight", cluster);
  adam.reset_rows(prefix + ".bias", cluster);
}

/// Observer called after every step with (step, params).
using StepObserver = std::function<void(int, const ParameterBundle&)>;

/// Meta-training on tasks drawn uniformly over usable clusters. The CLN width
/// is set to the number of clusters (or classes in oracle mode).
inline TrainResult meta_train(const Dataset& data, const ClusterAssignment& assignment, ArchConfig arch,
                              const TrainingConfig& cfg, const StepObserver& observer = {}) {
  cfg.validate();
  data.validate();
  assignment.validate();
  detail::TaskSource source = detail::make_task_source(data, assignment, cfg);
  arch.num_classes = source.assignment.k();
  arch.in_channels = data.channels;
  if (data.height != data.width) throw ConfigError("meta-training expects square images");
  arch.image_size = data.height;

  TrainResult out{init_params(arch, cfg.seed), {}};
  Adam adam(out.params);
  std::optional<BalancingVector> balance;
  if (cfg.loss_balancing) balance = compute_balancing_vector(source.assignment.sizes);
  std::optional<ReservoirBuffer<LabeledExample>> coreset;
  if (cfg.coreset_capacity > 0) coreset.emplace(cfg.coreset_capacity, derive_seed(cfg.seed, {0x6373u}));

  Rng pick = make_rng(cfg.seed, {0x7069u});
  for (int step = 0; step < cfg.steps; ++step) {
    try {
      const int cluster = source.usable[uniform_index(pick, source.usable.size())];
      const std::uint64_t step_seed = derive_seed(cfg.seed, {0x5354u, std::uint64_t(step)});
      Task task = detail::sample_task(source, cfg, cluster, step_seed);
      reset_task_weights(out.params, adam, cfg.w_reset, cluster, derive_seed(step_seed, {0x57u}));
      std::vector<LabeledExample> query = task.query;
      if (coreset && !coreset->empty()) query = coreset->batch(task.query.size(), derive_seed(step_seed, {0x5251u}));
      const double weight = balance ? balance->weight(cluster) : 1.0;

      const auto t0 = std::chrono::steady_clock::now();
      InnerResult inner = run_inner(out.params, task, cfg, step_seed);
      OuterResult outer = outer_update(out.params, inner, query, cfg.outer_lr, cfg.gradient_order, adam, weight);
      const auto t1 = std::chrono::steady_clock::now();

      if (!std::isfinite(outer.outer_loss) || !outer.params.all_finite())
        throw StateError("non-finite loss or parameters");
      out.params = std::move(outer.params);
      out.log.cluster_id.push_back(cluster);
      out.log.outer_loss.push_back(outer.outer_loss);
      out.log.wall_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      out.log.inner_steps.push_back(inner.step_count());
      if (coreset) {
        for (const auto& e : task.support) coreset->insert(e);
        for (const auto& e : task.query) coreset->insert(e);
      }
      if (observer) observer(step, out.params);
    } catch (const TaskError& e) {
      detail::rethrow_at_step(e, step);
    } catch (const ConfigError& e) {
      detail::rethrow_at_step(e, step);
    } catch (const ShapeError& e) {
      detail::rethrow_at_step(e, step);
    } catch (const EmptySetError& e) {
      detail::rethrow_at_step(e, step);
    } catch (const ValidationError& e) {
      detail::rethrow_at_step(e, step);
    } catch (const StateError& e) {
      detail::rethrow_at_step(e, step);
    }
  }
  return out;
}

}  // namespace fusion
