#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>
#include <fmt/format.h>

#include "fusion/data_io.hpp"
#include "fusion/eval.hpp"
#include "fusion/head.hpp"
#include "fusion/meta_learner.hpp"
#include "fusion/params.hpp"
#include "fusion/random.hpp"
#include "fusion/replay.hpp"
#include "fusion/task_builder.hpp"

namespace fusion {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// Run `fn`, timing it and turning exceptions into a failed check.
inline CheckResult run_check(const std::string& name, const std::function<CheckResult()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  try {
    r = fn();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.name = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Tiny models for property checks

/// A model small enough for finite differences over every parameter.
inline ArchConfig tiny_arch() {
  ArchConfig a;
  a.image_size = 5;
  a.conv_width = 2;
  a.conv_kernels = {3};
  a.conv_strides = {2};
  a.conv_padding = {1};
  a.trunk_hidden = 0;
  a.feature_dim = 4;
  a.attention_hidden = 3;
  a.cln_hidden = {5};
  a.num_classes = 3;
  return a;
}

inline Image random_image(const ArchConfig& a, Rng& rng) {
  Image im(a.in_channels, a.image_size, a.image_size);
  for (double& v : im.pixels) v = uniform01(rng);
  return im;
}

/// Random task: `n_support` items of `cluster`, `n_query` items of random labels.
inline Task random_task(const ArchConfig& a, std::size_t n_support, std::size_t n_query, int cluster, Rng& rng) {
  Task t;
  t.cluster_id = cluster;
  for (std::size_t i = 0; i < n_support; ++i) {
    t.support.push_back({random_image(a, rng), cluster});
    t.support_source.push_back(-1);
  }
  for (std::size_t i = 0; i < n_query; ++i) {
    t.query.push_back({random_image(a, rng), int(uniform_index(rng, std::size_t(a.num_classes)))});
    t.query_source.push_back(-1);
  }
  return t;
}

/// Query loss after the inner loop, as a function of the pre-inner parameters.
inline double composed_objective(const ParameterBundle& p, const Task& task, const TrainingConfig& cfg) {
  InnerResult inner = run_inner(p, task, cfg, 0);
  return meta_gradient(p, inner, task.query, GradientOrder::First).outer_loss;
}

// ---------------------------------------------------------------------------
// Checks

/// alpha >= 0, sum(alpha) = 1 and every meta-example coordinate inside the
/// per-coordinate range of its batch, over random heads and feature batches.
inline CheckResult check_attention_invariants(int draws, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x4154u});
  double worst_sum = 0.0;
  for (int d = 0; d < draws; ++d) {
    const int f = 1 + int(uniform_index(rng, 16)), h = 1 + int(uniform_index(rng, 8)), n = 1 + int(uniform_index(rng, 32));
    const double scale = std::pow(10.0, uniform(rng, -2.0, 2.0));
    Head psi;
    auto fill = [&](Eigen::Index r, Eigen::Index c) {
      Eigen::MatrixXd m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gaussian(rng, 0.0, scale);
      return m;
    };
    psi.att_w = fill(h, f);
    psi.att_b = fill(1, h);
    psi.out_w = fill(1, h);
    psi.out_b = fill(1, 1);
    Eigen::MatrixXd r = fill(n, f);
    MetaExample me = attention_pool(psi, r);
    if ((me.alpha.array() < 0.0).any()) return {"", false, fmt::format("negative alpha at draw {}", d)};
    worst_sum = std::max(worst_sum, std::abs(me.alpha.sum() - 1.0));
    if (worst_sum > 1e-6) return {"", false, fmt::format("|sum alpha - 1| = {:.3g} at draw {}", worst_sum, d)};
    const Eigen::RowVectorXd lo = r.colwise().minCoeff(), hi = r.colwise().maxCoeff();
    for (Eigen::Index j = 0; j < f; ++j) {
      const double tol = 1e-12 * std::max(1.0, std::abs(me.me(j)));
      if (me.me(j) < lo(j) - tol || me.me(j) > hi(j) + tol)
        return {"", false, fmt::format("meta-example coordinate {} outside batch range at draw {}", j, d)};
    }
  }
  return {"", true, fmt::format("{} draws, max |sum alpha - 1| = {:.3g}", draws, worst_sum)};
}

struct GradientCheck {
  double rel_error = 0.0;  // ||g - g_fd|| / ||g_fd||
  std::size_t parameters = 0;
};

/// Second-order meta-gradient against central finite differences of the
/// composed inner/outer objective, over phi = {theta, W, rho}.
inline GradientCheck meta_gradient_fd(const ArchConfig& arch, const TrainingConfig& cfg, std::uint64_t seed,
                                      double h = 1e-5) {
  Rng rng = make_rng(seed, {0x4644u});
  ParameterBundle p = init_params(arch, derive_seed(seed, {1}));
  // Non-zero biases so every parameter influences the loss.
  for (auto& v : p.views())
    for (double& x : v.values) x += gaussian(rng, 0.0, 0.05);
  const int cluster = int(uniform_index(rng, std::size_t(arch.num_classes)));
  Task task = random_task(arch, 4, 6, cluster, rng);

  InnerResult inner = run_inner(p, task, cfg, 0);
  const GroupMask phi = GroupMask::phi();
  const Eigen::VectorXd g = meta_gradient(p, inner, task.query, GradientOrder::Second).grad.flatten(phi);
  const Eigen::VectorXd x0 = p.flatten(phi);
  Eigen::VectorXd fd(x0.size());
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    Eigen::VectorXd x = x0;
    x(i) = x0(i) + h;
    p.unflatten(x, phi);
    const double up = composed_objective(p, task, cfg);
    x(i) = x0(i) - h;
    p.unflatten(x, phi);
    const double down = composed_objective(p, task, cfg);
    fd(i) = (up - down) / (2 * h);
  }
  p.unflatten(x0, phi);
  return {(g - fd).norm() / std::max(fd.norm(), 1e-12), std::size_t(x0.size())};
}

inline CheckResult check_meta_gradient(int seeds, double tolerance, Variant variant = Variant::Meml) {
  TrainingConfig cfg;
  cfg.variant = variant;
  cfg.inner_lr = 0.5;  // large enough that the second-order terms matter
  double worst = 0.0;
  std::size_t n = 0;
  for (int s = 0; s < seeds; ++s) {
    auto r = meta_gradient_fd(tiny_arch(), cfg, std::uint64_t(s) + 1);
    worst = std::max(worst, r.rel_error);
    n = r.parameters;
  }
  return {"", worst <= tolerance, fmt::format("{} seeds, {} parameters, max relative error {:.3g}", seeds, n, worst)};
}

/// Inclusion frequency of each stream position against capacity/stream.
inline double reservoir_chi_square_p(std::size_t capacity, std::size_t stream, int trials, std::uint64_t seed) {
  std::vector<double> counts(stream, 0.0);
  for (int t = 0; t < trials; ++t) {
    ReservoirBuffer<std::size_t> b(capacity, derive_seed(seed, {std::uint64_t(t)}));
    for (std::size_t i = 0; i < stream; ++i) b.insert(i);
    for (auto o : b.origins()) counts[o] += 1.0;
  }
  const double expected = double(trials) * double(capacity) / double(stream);
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // Each trial fixes the total at `capacity`, so stream - 1 degrees of freedom.
  return boost::math::gamma_q(0.5 * double(stream - 1), 0.5 * chi2);
}

inline CheckResult check_balancing_formula() {
  auto b = compute_balancing_vector({10, 20, 30}, 1e-8);
  const double expect[] = {1.0, 1.0 / (2e9 - 1.0), 0.0};
  for (int i = 0; i < 3; ++i)
    if (std::abs(b.gamma_norm[std::size_t(i)] - expect[i]) > 1e-6)
      return {"", false, fmt::format("gamma_norm[{}] = {:.6g}, expected {:.6g}", i, b.gamma_norm[std::size_t(i)], expect[i])};
  auto eq = compute_balancing_vector({7, 7, 7, 7});
  for (double w : eq.gamma_norm)
    if (w != 1.0) return {"", false, "equal sizes did not give unit weights"};
  return {"", true, fmt::format("gamma_norm = {{{:.6g}, {:.6g}, {:.6g}}}; equal sizes -> ones", b.gamma_norm[0], b.gamma_norm[1], b.gamma_norm[2])};
}

/// theta and rho checksums before and after meta_test, with and without
/// rehearsal, on a desk-sized glyph split.
inline CheckResult check_frozen_meta_test(std::uint64_t seed, int classes = 5) {
  ArchConfig a;
  a.conv_width = 8;
  a.trunk_hidden = 32;
  a.feature_dim = 16;
  a.cln_hidden = {16};
  const ParameterBundle p = init_params(a, seed);
  const Dataset test = generate_synthetic_glyphs(classes, 8, 28, seed);
  const GroupMask frozen{true, false, true, true, true};
  const auto before = p.checksum(frozen);
  std::vector<int> order(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) order[std::size_t(c)] = c;
  for (bool rehearsal : {false, true}) {
    meta_test(p, test, order, 3, {}, rehearsal, seed);
    if (p.checksum(frozen) != before) return {"", false, "theta/rho checksum changed during meta_test"};
  }
  return {"", true, fmt::format("checksum {:016x} unchanged", before)};
}

/// Without fine-tuning an untrained model predicts class 0 for every item
/// (zero output layer, ties to the lowest index), i.e. exactly 1/C.
inline CheckResult check_untrained_chance(int seeds) {
  ArchConfig a;
  a.conv_width = 8;
  a.trunk_hidden = 32;
  a.feature_dim = 16;
  a.cln_hidden = {16};
  const Dataset test = generate_synthetic_glyphs(10, 10, 28, 11);
  FineTuneConfig ft;
  ft.steps = 0;
  for (int C : {2, 10}) {
    std::vector<int> cls(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) cls[std::size_t(c)] = c;
    for (int s = 0; s < seeds; ++s) {
      const double acc = meta_test(init_params(a, std::uint64_t(s)), test, shuffled_classes(cls, std::uint64_t(s)), 5, ft, false, std::uint64_t(s))
                             .final_accuracy();
      if (std::abs(acc - 1.0 / C) > 1e-12) return {"", false, fmt::format("C={} seed {}: accuracy {}", C, s, acc)};
    }
  }
  return {"", true, fmt::format("{} seeds, C in {{2, 10}}: accuracy = 1/C", seeds)};
}

inline CheckResult check_roundtrips(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  EmbeddingSet e;
  Rng rng = make_rng(5);
  e.vectors = MatrixRowF(3, 4);
  for (Eigen::Index i = 0; i < e.vectors.size(); ++i) e.vectors.data()[i] = float(gaussian(rng));
  store_embeddings(e, dir / "emb.bin");
  if (load_embeddings(dir / "emb.bin").vectors != e.vectors) return {"", false, "embedding round-trip differs"};
  const ParameterBundle p = init_params(tiny_arch(), 9);
  save_checkpoint(p, dir / "ckpt.fckpt");
  const ParameterBundle q = load_checkpoint(dir / "ckpt.fckpt");
  const Eigen::VectorXd a = p.flatten(), b = q.flatten();
  if ((a - b).cwiseAbs().maxCoeff() > 1e-6 * std::max(1.0, a.cwiseAbs().maxCoeff())) return {"", false, "checkpoint round-trip differs"};
  std::filesystem::remove_all(dir);
  return {"", true, "embeddings bit-exact, checkpoint within float32"};
}

inline CheckResult check_rehearsal_accounting(std::uint64_t seed) {
  ArchConfig a;
  a.conv_width = 8;
  a.trunk_hidden = 32;
  a.feature_dim = 16;
  a.cln_hidden = {16};
  const ParameterBundle p = init_params(a, seed);
  const Dataset test = generate_synthetic_glyphs(4, 8, 28, seed);
  const std::vector<int> order = {0, 1, 2, 3};
  MetaTestStats off, on;
  meta_test(p, test, order, 3, {}, false, seed, &off);
  meta_test(p, test, order, 3, {}, true, seed, &on);
  const bool ok = on.w_updates >= off.w_updates && on.rehearsal_items > 0;
  return {"", ok, fmt::format("W updates {} (rehearsal) vs {} (none), {} replayed items", on.w_updates, off.w_updates, on.rehearsal_items)};
}

inline CheckResult check_accuracy_ties() {
  const Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(4, 3);
  const std::vector<int> y0 = {0, 0, 0, 0};
  if (accuracy(zeros, y0) != 1.0) return {"", false, "tie did not resolve to class 0"};
  Eigen::MatrixXd l(4, 2);
  l << 1, 0, 0, 1, 1, 0, 0, 1;
  const std::vector<int> y = {0, 1, 0, 0};
  if (accuracy(l, y) != 0.75) return {"", false, "3 of 4 correct did not give 0.75"};
  return {"", true, "ties -> lowest index; 3/4 -> 0.75"};
}

/// The invariant suite behind `fusion selftest`; fast enough for every build.
inline std::vector<CheckResult> run_selftest(const std::filesystem::path& scratch) {
  std::vector<CheckResult> out;
  out.push_back(run_check("attention invariants", [] { return check_attention_invariants(200, 1); }));
  out.push_back(run_check("meta-gradient vs finite differences (MEML)", [] { return check_meta_gradient(2, 1e-4); }));
  out.push_back(run_check("meta-gradient vs finite differences (OML)", [] { return check_meta_gradient(1, 1e-4, Variant::Oml); }));
  out.push_back(run_check("balancing formula", [] { return check_balancing_formula(); }));
  out.push_back(run_check("reservoir uniformity", [] {
    const double p = reservoir_chi_square_p(8, 64, 2000, 3);
    return CheckResult{"", p > 0.01, fmt::format("chi-square p = {:.4f}", p)};
  }));
  out.push_back(run_check("accuracy tie rule", [] { return check_accuracy_ties(); }));
  out.push_back(run_check("frozen theta/rho in meta_test", [] { return check_frozen_meta_test(2); }));
  out.push_back(run_check("untrained chance level", [] { return check_untrained_chance(3); }));
  out.push_back(run_check("rehearsal step accounting", [] { return check_rehearsal_accounting(4); }));
  out.push_back(run_check("file round-trips", [&] { return check_roundtrips(scratch); }));
  out.push_back(run_check("synthetic glyph determinism", [] {
    return CheckResult{"", generate_synthetic_glyphs(3, 4, 16, 7).images == generate_synthetic_glyphs(3, 4, 16, 7).images, "same seed, same pixels"};
  }));
  return out;
}

}  // namespace fusion
