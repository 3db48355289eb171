#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "fusion/data_io.hpp"
#include "fusion/error.hpp"
#include "fusion/eval.hpp"
#include "fusion/kmeans.hpp"
#include "fusion/log.hpp"
#include "fusion/meta_learner.hpp"
#include "fusion/params.hpp"
#include "fusion/random.hpp"
#include "fusion/task_builder.hpp"

namespace fusion {

// ---------------------------------------------------------------------------
// Configuration

struct DatasetSpec {
  std::string source = "synthetic";  // synthetic | folder
  std::filesystem::path train_path, test_path;
  int num_classes = 40;
  int train_classes = 30;
  int samples_per_class = 20;
  int image_size = 28;
  std::uint64_t seed = 7;
};

struct EmbeddingSpec {
  std::string source = "baseline";  // baseline | file
  std::filesystem::path path;
  int dim = 64;
};

struct ClusteringSpec {
  int k = 30;
  int max_iters = 300;
};

struct MetaTestSpec {
  int num_classes = 10;
  int shots = 5;
  FineTuneConfig fine_tune;
  bool rehearsal = false;
};

struct OodSpec {
  std::string source = "none";  // none | inverted | folder
  std::filesystem::path path;
};

/// One named training run. Fields set under `runs:` override the shared
/// training section.
struct RunSpec {
  std::string name;
  TrainingConfig training;
  bool rehearsal = false;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::vector<std::uint64_t> seeds = {1};
  DatasetSpec dataset;
  EmbeddingSpec embedding;
  ClusteringSpec clustering;
  ArchConfig arch;
  std::vector<RunSpec> runs;
  MetaTestSpec meta_test;
  OodSpec ood;
  std::filesystem::path output_dir = "results";
  int jobs = 0;  // 0: one worker per hardware thread
  bool save_checkpoints = true;

  void validate() const;
};

namespace detail {

inline void check_keys(const YAML::Node& node, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!node) return;
  if (!node.IsMap()) throw ConfigError("'" + where + "' must be a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const YAML::Node& node, const char* key, T& out, const std::string& where) {
  if (!node || !node[key]) return;
  try {
    out = node[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline void read_path(const YAML::Node& node, const char* key, std::filesystem::path& out, const std::filesystem::path& base,
                      const std::string& where) {
  std::string s;
  read(node, key, s, where);
  if (s.empty()) return;
  std::filesystem::path p(s);
  out = p.is_absolute() ? p : base / p;
}

inline void read_training(const YAML::Node& n, TrainingConfig& t, const std::string& where) {
  check_keys(n,
             {"inner_lr", "outer_lr", "steps", "meta_batch", "variant", "gradient_order", "loss_balancing",
              "coreset_capacity", "task_mode", "q_random", "balanced_size", "n_support", "n_query_same",
              "n_query_random", "w_reset", "proportional_min", "proportional_max", "name", "rehearsal"},
             where);
  read(n, "inner_lr", t.inner_lr, where);
  read(n, "outer_lr", t.outer_lr, where);
  read(n, "steps", t.steps, where);
  read(n, "meta_batch", t.meta_batch, where);
  read(n, "loss_balancing", t.loss_balancing, where);
  read(n, "coreset_capacity", t.coreset_capacity, where);
  read(n, "q_random", t.q_random, where);
  read(n, "balanced_size", t.balanced_size, where);
  read(n, "n_support", t.balanced_shape.n_support, where);
  read(n, "n_query_same", t.balanced_shape.n_query_same, where);
  read(n, "n_query_random", t.balanced_shape.n_query_random, where);
  read(n, "proportional_min", t.proportional_min, where);
  read(n, "proportional_max", t.proportional_max, where);
  std::string s;
  if (n && n["variant"]) t.variant = variant_from_string(n["variant"].as<std::string>());
  if (n && n["gradient_order"]) t.gradient_order = gradient_order_from_string(n["gradient_order"].as<std::string>());
  if (n && n["task_mode"]) t.task_mode = task_mode_from_string(n["task_mode"].as<std::string>());
  if (n && n["w_reset"]) t.w_reset = w_reset_from_string(n["w_reset"].as<std::string>());
}

inline void read_arch(const YAML::Node& n, ArchConfig& a) {
  const std::string w = "architecture";
  check_keys(n,
             {"conv_width", "conv_kernels", "conv_strides", "conv_padding", "trunk_hidden", "feature_dim",
              "attention_hidden", "cln_hidden", "film", "film_layers", "context_dim"},
             w);
  read(n, "conv_width", a.conv_width, w);
  read(n, "conv_kernels", a.conv_kernels, w);
  read(n, "conv_strides", a.conv_strides, w);
  read(n, "conv_padding", a.conv_padding, w);
  read(n, "trunk_hidden", a.trunk_hidden, w);
  read(n, "feature_dim", a.feature_dim, w);
  read(n, "attention_hidden", a.attention_hidden, w);
  read(n, "cln_hidden", a.cln_hidden, w);
  read(n, "film", a.film, w);
  read(n, "film_layers", a.film_layers, w);
  read(n, "context_dim", a.context_dim, w);
}

}  // namespace detail

/// Build a config from a parsed YAML document. Relative paths resolve
/// against `base_dir`.
inline ExperimentConfig experiment_from_yaml(const YAML::Node& root, const std::filesystem::path& base_dir = ".") {
  using detail::check_keys;
  using detail::read;
  ExperimentConfig c;
  if (!root || root.IsNull()) return c;
  try {
    check_keys(root,
               {"name", "seeds", "dataset", "embedding", "clustering", "architecture", "training", "runs", "meta_test",
                "ood", "output"},
               "config");
    read(root, "name", c.name, "config");
    read(root, "seeds", c.seeds, "config");

    const auto ds = root["dataset"];
    check_keys(ds, {"source", "train_path", "test_path", "num_classes", "train_classes", "samples_per_class", "image_size", "seed"},
               "dataset");
    read(ds, "source", c.dataset.source, "dataset");
    detail::read_path(ds, "train_path", c.dataset.train_path, base_dir, "dataset");
    detail::read_path(ds, "test_path", c.dataset.test_path, base_dir, "dataset");
    read(ds, "num_classes", c.dataset.num_classes, "dataset");
    read(ds, "train_classes", c.dataset.train_classes, "dataset");
    read(ds, "samples_per_class", c.dataset.samples_per_class, "dataset");
    read(ds, "image_size", c.dataset.image_size, "dataset");
    read(ds, "seed", c.dataset.seed, "dataset");

    const auto em = root["embedding"];
    check_keys(em, {"source", "path", "dim"}, "embedding");
    read(em, "source", c.embedding.source, "embedding");
    detail::read_path(em, "path", c.embedding.path, base_dir, "embedding");
    read(em, "dim", c.embedding.dim, "embedding");

    const auto cl = root["clustering"];
    check_keys(cl, {"k", "max_iters"}, "clustering");
    read(cl, "k", c.clustering.k, "clustering");
    read(cl, "max_iters", c.clustering.max_iters, "clustering");

    detail::read_arch(root["architecture"], c.arch);

    TrainingConfig base;
    detail::read_training(root["training"], base, "training");
    const auto mt = root["meta_test"];
    check_keys(mt, {"num_classes", "shots", "steps", "lr", "buffer_capacity", "rehearsal"}, "meta_test");
    read(mt, "num_classes", c.meta_test.num_classes, "meta_test");
    read(mt, "shots", c.meta_test.shots, "meta_test");
    read(mt, "steps", c.meta_test.fine_tune.steps, "meta_test");
    read(mt, "lr", c.meta_test.fine_tune.lr, "meta_test");
    read(mt, "buffer_capacity", c.meta_test.fine_tune.buffer_capacity, "meta_test");
    read(mt, "rehearsal", c.meta_test.rehearsal, "meta_test");

    if (const auto runs = root["runs"]) {
      if (!runs.IsSequence()) throw ConfigError("'runs' must be a list");
      for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto r = runs[i];
        const std::string where = "runs[" + std::to_string(i) + "]";
        RunSpec spec{"", base, c.meta_test.rehearsal};
        detail::read_training(r, spec.training, where);
        read(r, "rehearsal", spec.rehearsal, where);
        read(r, "name", spec.name, where);
        if (spec.name.empty()) spec.name = std::string(to_string(spec.training.variant));
        c.runs.push_back(std::move(spec));
      }
    } else {
      c.runs.push_back({std::string(to_string(base.variant)), base, c.meta_test.rehearsal});
    }

    const auto ood = root["ood"];
    check_keys(ood, {"source", "path"}, "ood");
    read(ood, "source", c.ood.source, "ood");
    detail::read_path(ood, "path", c.ood.path, base_dir, "ood");

    const auto out = root["output"];
    check_keys(out, {"dir", "jobs", "checkpoints"}, "output");
    detail::read_path(out, "dir", c.output_dir, base_dir, "output");
    read(out, "jobs", c.jobs, "output");
    read(out, "checkpoints", c.save_checkpoints, "output");
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

/// Parse a YAML config file. FUSION_OUT, when set, replaces output.dir.
inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  ExperimentConfig c = experiment_from_yaml(root, path.parent_path());
  if (const char* env = std::getenv("FUSION_OUT"); env && *env) c.output_dir = env;
  return c;
}

inline void ExperimentConfig::validate() const {
  namespace fs = std::filesystem;
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("seeds must be distinct");
  if (dataset.source == "synthetic") {
    if (dataset.train_classes < 2 || dataset.train_classes >= dataset.num_classes)
      throw ConfigError("dataset.train_classes must be in [2, num_classes)");
    if (dataset.samples_per_class < 2) throw ConfigError("dataset.samples_per_class must be >= 2");
    if (dataset.image_size < 8) throw ConfigError("dataset.image_size must be >= 8");
    if (meta_test.num_classes > dataset.num_classes - dataset.train_classes)
      throw ConfigError("meta_test.num_classes exceeds the held-out classes");
  } else if (dataset.source == "folder") {
    if (!fs::is_directory(dataset.train_path)) throw ConfigError("dataset.train_path not found: " + dataset.train_path.string());
    if (!fs::is_directory(dataset.test_path)) throw ConfigError("dataset.test_path not found: " + dataset.test_path.string());
  } else {
    throw ConfigError("dataset.source must be 'synthetic' or 'folder'");
  }
  if (embedding.source == "file") {
    if (!fs::is_regular_file(embedding.path)) throw ConfigError("embedding.path not found: " + embedding.path.string());
  } else if (embedding.source == "baseline") {
    if (embedding.dim < 2) throw ConfigError("embedding.dim must be >= 2");
  } else {
    throw ConfigError("embedding.source must be 'baseline' or 'file'");
  }
  if (clustering.k < 1 || clustering.max_iters < 1) throw ConfigError("clustering.k and max_iters must be >= 1");
  if (runs.empty()) throw ConfigError("no training runs configured");
  std::set<std::string> names;
  for (const auto& r : runs) {
    r.training.validate();
    if (!names.insert(r.name).second) throw ConfigError("duplicate run name '" + r.name + "'");
    if (r.name.find_first_of(",/\\\"\n") != std::string::npos) throw ConfigError("run name '" + r.name + "' has reserved characters");
  }
  ArchConfig probe = arch;
  if (dataset.source == "synthetic") probe.image_size = dataset.image_size;
  probe.validate();
  if (meta_test.num_classes < 1 || meta_test.shots < 1) throw ConfigError("meta_test needs num_classes and shots >= 1");
  if (meta_test.fine_tune.steps < 0 || !(meta_test.fine_tune.lr >= 0) || meta_test.fine_tune.buffer_capacity < 1)
    throw ConfigError("invalid meta_test fine-tune settings");
  if (ood.source == "folder") {
    if (!fs::is_directory(ood.path)) throw ConfigError("ood.path not found: " + ood.path.string());
  } else if (ood.source != "none" && ood.source != "inverted") {
    throw ConfigError("ood.source must be 'none', 'inverted' or 'folder'");
  }
  if (jobs < 0) throw ConfigError("output.jobs must be >= 0");
}

inline nlohmann::json to_json(const TrainingConfig& t) {
  return {{"inner_lr", t.inner_lr},
          {"outer_lr", t.outer_lr},
          {"steps", t.steps},
          {"meta_batch", t.meta_batch},
          {"variant", to_string(t.variant)},
          {"gradient_order", to_string(t.gradient_order)},
          {"loss_balancing", t.loss_balancing},
          {"coreset_capacity", t.coreset_capacity},
          {"task_mode", to_string(t.task_mode)},
          {"q_random", t.q_random},
          {"balanced_size", t.balanced_size},
          {"n_support", t.balanced_shape.n_support},
          {"n_query_same", t.balanced_shape.n_query_same},
          {"n_query_random", t.balanced_shape.n_query_random},
          {"w_reset", to_string(t.w_reset)},
          {"proportional_min", t.proportional_min},
          {"proportional_max", t.proportional_max}};
}

/// Fully resolved configuration, every default made explicit.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : c.runs) {
    auto j = to_json(r.training);
    j["name"] = r.name;
    j["rehearsal"] = r.rehearsal;
    runs.push_back(std::move(j));
  }
  nlohmann::json arch;
  fusion::to_json(arch, c.arch);
  return {{"name", c.name},
          {"seeds", c.seeds},
          {"dataset",
           {{"source", c.dataset.source},
            {"train_path", c.dataset.train_path.string()},
            {"test_path", c.dataset.test_path.string()},
            {"num_classes", c.dataset.num_classes},
            {"train_classes", c.dataset.train_classes},
            {"samples_per_class", c.dataset.samples_per_class},
            {"image_size", c.dataset.image_size},
            {"seed", c.dataset.seed}}},
          {"embedding", {{"source", c.embedding.source}, {"path", c.embedding.path.string()}, {"dim", c.embedding.dim}}},
          {"clustering", {{"k", c.clustering.k}, {"max_iters", c.clustering.max_iters}}},
          {"architecture", arch},
          {"runs", runs},
          {"meta_test",
           {{"num_classes", c.meta_test.num_classes},
            {"shots", c.meta_test.shots},
            {"steps", c.meta_test.fine_tune.steps},
            {"lr", c.meta_test.fine_tune.lr},
            {"buffer_capacity", c.meta_test.fine_tune.buffer_capacity},
            {"rehearsal", c.meta_test.rehearsal}}},
          {"ood", {{"source", c.ood.source}, {"path", c.ood.path.string()}}},
          {"output", {{"dir", c.output_dir.string()}, {"jobs", c.jobs}, {"checkpoints", c.save_checkpoints}}}};
}

// ---------------------------------------------------------------------------
// Results

struct RunRecord {
  std::string variant;
  std::string sweep_value;  // empty outside sweeps
  int k = 0;
  std::uint64_t seed = 0;
  AccuracyCurve curve;
  std::optional<AccuracyCurve> ood;
  double step_ms_mean = 0.0;
  double train_seconds = 0.0;
  double test_seconds = 0.0;
  double final_loss = 0.0;  // mean outer loss over the last 100 steps
  MetaTestStats stats;
  std::string checkpoint;
  std::string train_log;
};

struct FailureRecord {
  std::string variant;
  std::string sweep_value;
  std::uint64_t seed = 0;
  std::string stage;
  std::string message;
};

struct ResultsRecord {
  nlohmann::json config;
  std::string sweep_param;  // empty outside sweeps
  std::vector<RunRecord> runs;
  std::vector<FailureRecord> failures;
  double wall_seconds = 0.0;

  std::size_t curve_count() const { return runs.size(); }
};

inline nlohmann::json curve_to_json(const AccuracyCurve& c) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : c.points) pts.push_back({{"num_classes", p.num_classes}, {"accuracy", p.accuracy}, {"eval_items", p.eval_items}});
  return {{"variant", c.variant}, {"seed", c.seed}, {"points", pts}};
}

inline AccuracyCurve curve_from_json(const nlohmann::json& j) {
  AccuracyCurve c;
  c.variant = j.at("variant").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& p : j.at("points"))
    c.points.push_back({p.at("num_classes").get<int>(), p.at("accuracy").get<double>(), p.at("eval_items").get<std::size_t>()});
  return c;
}

inline nlohmann::json to_json(const ResultsRecord& r) {
  nlohmann::json runs = nlohmann::json::array(), failures = nlohmann::json::array();
  for (const auto& run : r.runs) {
    nlohmann::json j = {{"variant", run.variant},
                        {"sweep_value", run.sweep_value},
                        {"k", run.k},
                        {"seed", run.seed},
                        {"curve", curve_to_json(run.curve)},
                        {"step_ms_mean", run.step_ms_mean},
                        {"train_seconds", run.train_seconds},
                        {"test_seconds", run.test_seconds},
                        {"final_loss", run.final_loss},
                        {"w_updates", run.stats.w_updates},
                        {"rehearsal_items", run.stats.rehearsal_items},
                        {"checkpoint", run.checkpoint},
                        {"train_log", run.train_log}};
    if (run.ood) j["ood_curve"] = curve_to_json(*run.ood);
    runs.push_back(std::move(j));
  }
  for (const auto& f : r.failures)
    failures.push_back({{"variant", f.variant}, {"sweep_value", f.sweep_value}, {"seed", f.seed}, {"stage", f.stage}, {"message", f.message}});
  return {{"config", r.config}, {"sweep_param", r.sweep_param}, {"runs", runs}, {"failures", failures}, {"wall_seconds", r.wall_seconds}};
}

inline ResultsRecord results_from_json(const nlohmann::json& j) {
  ResultsRecord r;
  try {
    r.config = j.at("config");
    r.sweep_param = j.value("sweep_param", "");
    r.wall_seconds = j.value("wall_seconds", 0.0);
    for (const auto& run : j.at("runs")) {
      RunRecord x;
      x.variant = run.at("variant").get<std::string>();
      x.sweep_value = run.value("sweep_value", "");
      x.k = run.at("k").get<int>();
      x.seed = run.at("seed").get<std::uint64_t>();
      x.curve = curve_from_json(run.at("curve"));
      if (run.contains("ood_curve")) x.ood = curve_from_json(run.at("ood_curve"));
      x.step_ms_mean = run.value("step_ms_mean", 0.0);
      x.train_seconds = run.value("train_seconds", 0.0);
      x.test_seconds = run.value("test_seconds", 0.0);
      x.final_loss = run.value("final_loss", 0.0);
      x.stats.w_updates = run.value("w_updates", std::size_t{0});
      x.stats.rehearsal_items = run.value("rehearsal_items", std::size_t{0});
      x.checkpoint = run.value("checkpoint", "");
      x.train_log = run.value("train_log", "");
      r.runs.push_back(std::move(x));
    }
    for (const auto& f : j.value("failures", nlohmann::json::array()))
      r.failures.push_back({f.at("variant").get<std::string>(), f.value("sweep_value", ""), f.at("seed").get<std::uint64_t>(),
                            f.at("stage").get<std::string>(), f.at("message").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed results record: ") + e.what());
  }
  return r;
}

inline constexpr const char* kRecordFile = "record.json";

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

inline ResultsRecord load_results(const std::filesystem::path& dir) {
  const auto path = dir / kRecordFile;
  std::ifstream in(path);
  if (!in) throw IoError("no " + std::string(kRecordFile) + " in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cannot parse " + path.string() + ": " + e.what());
  }
  return results_from_json(j);
}

// ---------------------------------------------------------------------------
// Report

/// Mean/min/max over seeds of one series at one class count.
struct SeriesPoint {
  int num_classes = 0;
  double mean = 0, min = 0, max = 0;
  std::size_t n = 0;
};

struct Series {
  std::string label;
  std::string variant;
  std::string sweep_value;
  int k = 0;
  std::vector<SeriesPoint> points;
  double step_ms_mean = 0;

  double final_mean() const { return points.empty() ? 0.0 : points.back().mean; }
};

inline std::string series_label(const ResultsRecord& r, const RunRecord& run) {
  if (r.sweep_param.empty() || r.sweep_param == "k") {
    if (r.sweep_param == "k") return run.variant + " k=" + std::to_string(run.k);
    return run.variant;
  }
  return run.variant + " " + r.sweep_param + "=" + run.sweep_value;
}

inline std::string results_variant(const ResultsRecord& r, const RunRecord& run) {
  return r.sweep_param.empty() || r.sweep_param == "k" ? run.variant : series_label(r, run);
}

/// Series in first-appearance order. Means accumulate in run order, the
/// same order results.csv is written in.
inline std::vector<Series> aggregate(const ResultsRecord& r, bool ood = false) {
  std::vector<Series> out;
  std::map<std::string, std::size_t> index;
  std::map<std::string, std::vector<double>> timing;
  std::map<std::pair<std::size_t, int>, std::vector<double>> values;
  for (const auto& run : r.runs) {
    if (ood && !run.ood) continue;
    const std::string label = series_label(r, run);
    auto [it, inserted] = index.try_emplace(label, out.size());
    if (inserted) out.push_back({label, run.variant, run.sweep_value, run.k, {}, 0});
    timing[label].push_back(run.step_ms_mean);
    const AccuracyCurve& c = ood ? *run.ood : run.curve;
    for (const auto& p : c.points) values[{it->second, p.num_classes}].push_back(p.accuracy);
  }
  for (const auto& [key, v] : values) {
    SeriesPoint p{key.second, 0, v.front(), v.front(), v.size()};
    for (double a : v) {
      p.mean += a;
      p.min = std::min(p.min, a);
      p.max = std::max(p.max, a);
    }
    p.mean /= double(v.size());
    out[key.first].points.push_back(p);
  }
  for (auto& s : out) {
    const auto& t = timing[s.label];
    for (double x : t) s.step_ms_mean += x;
    s.step_ms_mean /= double(t.size());
  }
  return out;
}

inline std::string fmt_real(double v) { return fmt::format("{:.17g}", v); }

inline std::string results_csv(const ResultsRecord& r, bool ood = false) {
  std::string s = "variant,k,seed,num_classes,accuracy\n";
  for (const auto& run : r.runs) {
    if (ood && !run.ood) continue;
    for (const auto& p : (ood ? *run.ood : run.curve).points)
      s += fmt::format("{},{},{},{},{}\n", results_variant(r, run), run.k, run.seed, p.num_classes, fmt_real(p.accuracy));
  }
  return s;
}

/// Line plot of mean accuracy against classes seen, one series per entry
/// with a shaded min-max band.
inline std::string accuracy_svg(const std::vector<Series>& series, const std::string& title) {
  constexpr double W = 720, H = 440, L = 64, R = 200, T = 40, B = 56;
  const double pw = W - L - R, ph = H - T - B;
  int xmin = 1 << 30, xmax = 0;
  for (const auto& s : series)
    for (const auto& p : s.points) {
      xmin = std::min(xmin, p.num_classes);
      xmax = std::max(xmax, p.num_classes);
    }
  if (xmax <= xmin) xmax = xmin + 1;
  auto X = [&](double n) { return L + pw * (n - xmin) / double(xmax - xmin); };
  auto Y = [&](double a) { return T + ph * (1.0 - a); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" font-family=\"sans-serif\" font-size=\"12\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{}\" y=\"24\" font-size=\"15\">{}</text>\n",
      W, H, W, H, L, title);
  for (int i = 0; i <= 5; ++i) {
    const double a = i / 5.0;
    s += fmt::format("<line x1=\"{}\" y1=\"{:.2f}\" x2=\"{}\" y2=\"{:.2f}\" stroke=\"#ddd\"/>\n", L, Y(a), L + pw, Y(a));
    s += fmt::format("<text x=\"{}\" y=\"{:.2f}\" text-anchor=\"end\">{:.1f}</text>\n", L - 6, Y(a) + 4, a);
  }
  const int xticks = std::min(10, xmax - xmin);
  for (int i = 0; i <= xticks; ++i) {
    const int n = xmin + int(std::lround(double(i) * (xmax - xmin) / xticks));
    s += fmt::format("<text x=\"{:.2f}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", X(n), T + ph + 18, n);
  }
  s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", L, T, pw, ph);
  s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">classes seen</text>\n", L + pw / 2, H - 14);
  s += fmt::format("<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">accuracy</text>\n", T + ph / 2, T + ph / 2);

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& sr = series[i];
    const char* col = colors[i % std::size(colors)];
    std::string band, line;
    for (const auto& p : sr.points) band += fmt::format("{:.2f},{:.2f} ", X(p.num_classes), Y(p.max));
    for (auto it = sr.points.rbegin(); it != sr.points.rend(); ++it) band += fmt::format("{:.2f},{:.2f} ", X(it->num_classes), Y(it->min));
    for (const auto& p : sr.points) line += fmt::format("{:.2f},{:.2f} ", X(p.num_classes), Y(p.mean));
    s += fmt::format("<g class=\"series\" data-label=\"{}\">\n", sr.label);
    s += fmt::format("<polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.18\" stroke=\"none\"/>\n", band, col);
    s += fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n", line, col);
    s += "</g>\n";
    const double ly = T + 10 + 18.0 * double(i);
    s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/>\n", L + pw + 12, ly, L + pw + 32, ly, col);
    s += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", L + pw + 38, ly + 4, sr.label);
  }
  s += "</svg>\n";
  return s;
}

inline std::string plot_data_csv(const std::vector<Series>& series) {
  std::string s = "series,num_classes,mean,min,max,n\n";
  for (const auto& sr : series)
    for (const auto& p : sr.points)
      s += fmt::format("{},{},{},{},{},{}\n", sr.label, p.num_classes, fmt_real(p.mean), fmt_real(p.min), fmt_real(p.max), p.n);
  return s;
}

/// Series with the highest mean final accuracy per variant, keyed by variant.
inline std::map<std::string, const Series*> best_per_variant(const std::vector<Series>& series) {
  std::map<std::string, const Series*> best;
  for (const auto& s : series) {
    auto& b = best[s.variant];
    if (!b || s.final_mean() > b->final_mean()) b = &s;
  }
  return best;
}

/// Writes results.csv, timing.csv, eval_sizes.csv, plot_data.csv,
/// accuracy.svg, failures.csv and summary.md (plus OoD variants when present).
inline void emit_report(const ResultsRecord& r, const std::filesystem::path& out_dir) {
  if (r.runs.empty() && r.failures.empty()) throw ValidationError("cannot report an empty results record");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  write_text(out_dir / "results.csv", results_csv(r));
  const auto series = aggregate(r);
  std::string timing = "variant,step_ms_mean\n";
  for (const auto& s : series) timing += fmt::format("{},{}\n", s.label, fmt_real(s.step_ms_mean));
  write_text(out_dir / "timing.csv", timing);

  std::string sizes = "variant,k,seed,num_classes,eval_items\n";
  for (const auto& run : r.runs)
    for (const auto& p : run.curve.points)
      sizes += fmt::format("{},{},{},{},{}\n", results_variant(r, run), run.k, run.seed, p.num_classes, p.eval_items);
  write_text(out_dir / "eval_sizes.csv", sizes);

  const std::string name = r.config.is_object() ? r.config.value("name", "experiment") : "experiment";
  write_text(out_dir / "plot_data.csv", plot_data_csv(series));
  write_text(out_dir / "accuracy.svg", accuracy_svg(series, name + ": accuracy vs classes seen"));

  const bool has_ood = std::any_of(r.runs.begin(), r.runs.end(), [](const RunRecord& x) { return x.ood.has_value(); });
  std::vector<Series> ood_series;
  if (has_ood) {
    write_text(out_dir / "ood_results.csv", results_csv(r, true));
    ood_series = aggregate(r, true);
    write_text(out_dir / "ood_plot_data.csv", plot_data_csv(ood_series));
    write_text(out_dir / "ood_accuracy.svg", accuracy_svg(ood_series, name + ": out-of-distribution accuracy"));
  }

  std::string failures = "variant,seed,stage,message\n";
  for (const auto& f : r.failures) {
    std::string msg = f.message;
    std::replace(msg.begin(), msg.end(), '"', '\'');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    failures += fmt::format("{},{},{},\"{}\"\n", f.variant + (f.sweep_value.empty() ? "" : " " + r.sweep_param + "=" + f.sweep_value),
                            f.seed, f.stage, msg);
  }
  write_text(out_dir / "failures.csv", failures);

  std::string md = fmt::format("# {}\n\n", name);
  md += "| series | seeds | final classes | mean | min | max | step ms |\n|---|---|---|---|---|---|---|\n";
  for (const auto& s : series) {
    if (s.points.empty()) continue;
    const auto& p = s.points.back();
    md += fmt::format("| {} | {} | {} | {:.4f} | {:.4f} | {:.4f} | {:.2f} |\n", s.label, p.n, p.num_classes, p.mean, p.min, p.max, s.step_ms_mean);
  }
  if (has_ood) {
    md += "\nOut-of-distribution:\n\n| series | mean | min | max |\n|---|---|---|---|\n";
    for (const auto& s : ood_series)
      if (!s.points.empty())
        md += fmt::format("| {} | {:.4f} | {:.4f} | {:.4f} |\n", s.label, s.points.back().mean, s.points.back().min, s.points.back().max);
  }
  if (!r.sweep_param.empty()) {
    md += fmt::format("\nBest {} per variant (highest mean final accuracy):\n\n", r.sweep_param);
    for (const auto& [variant, s] : best_per_variant(series))
      md += fmt::format("- {}: {}={} (mean {:.4f})\n", variant, r.sweep_param, r.sweep_param == "k" ? std::to_string(s->k) : s->sweep_value,
                        s->final_mean());
  }
  if (!r.failures.empty()) md += fmt::format("\n{} run(s) failed; see failures.csv.\n", r.failures.size());
  md += fmt::format("\nWall time {:.1f} s.\n", r.wall_seconds);
  write_text(out_dir / "summary.md", md);
}

// ---------------------------------------------------------------------------
// Running

/// Meta-train and meta-test splits of the configured dataset.
struct ExperimentData {
  Dataset train, test;
};

inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  ExperimentData d;
  if (c.dataset.source == "synthetic") {
    const Dataset all = generate_synthetic_glyphs(c.dataset.num_classes, c.dataset.samples_per_class, c.dataset.image_size, c.dataset.seed);
    std::vector<int> tr, te;
    for (int k = 0; k < c.dataset.num_classes; ++k) (k < c.dataset.train_classes ? tr : te).push_back(k);
    d.train = select_classes(all, tr, Split::MetaTrain);
    d.test = select_classes(all, te, Split::MetaTest);
  } else {
    d.train = load_image_folder(c.dataset.train_path, c.dataset.image_size, Split::MetaTrain);
    d.test = load_image_folder(c.dataset.test_path, c.dataset.image_size, Split::MetaTest);
    if (d.test.channels != d.train.channels || d.test.height != d.train.height)
      d.test = adapt_dataset(d.test, d.train.channels, d.train.height, d.train.width);
    if (c.meta_test.num_classes > d.test.num_classes) throw ConfigError("meta_test.num_classes exceeds the test classes");
  }
  d.train.validate();
  d.test.validate();
  return d;
}

inline std::optional<Dataset> load_ood_data(const ExperimentConfig& c, const Dataset& test) {
  if (c.ood.source == "inverted") return invert_contrast(test);
  if (c.ood.source == "folder") return load_image_folder(c.ood.path, 0, Split::MetaTest);
  return std::nullopt;
}

/// Pseudo-labels for one seed: embed the meta-train split, then k-means.
inline ClusterAssignment cluster_for_seed(const ExperimentConfig& c, const Dataset& train, std::uint64_t seed) {
  EmbeddingSet e = c.embedding.source == "file" ? load_embeddings(c.embedding.path)
                                                : embed_dataset_baseline(train, c.embedding.dim, derive_seed(seed, {0x454du}));
  if (e.vectors.rows() != Eigen::Index(train.size()))
    throw ConfigError(fmt::format("embedding file has {} rows for {} meta-train items", e.vectors.rows(), train.size()));
  if (c.clustering.k > int(train.size())) throw ConfigError("clustering.k exceeds the number of meta-train items");
  return kmeans_partition(e, c.clustering.k, derive_seed(seed, {0x4b4du}), c.clustering.max_iters);
}

inline std::string run_dir_name(const RunSpec& r, std::uint64_t seed) { return fmt::format("runs/{}/seed_{}", r.name, seed); }

namespace detail {

/// Run `jobs` indices on up to `workers` threads.
template <class F>
void parallel_for(std::size_t jobs, int workers, F&& fn) {
  if (workers <= 0) workers = int(std::max(1u, std::thread::hardware_concurrency()));
  workers = int(std::min<std::size_t>(std::size_t(workers), jobs));
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < jobs;) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Every (seed, run) pair as an independent job: embed, cluster,
/// meta-train, meta-test and optionally evaluate out of distribution. A
/// failing job is recorded and the others continue. Writes record.json and
/// the report into the output directory.
inline ResultsRecord run_experiment(const ExperimentConfig& c, bool write_report = true) {
  c.validate();
  namespace fs = std::filesystem;
  const auto t_start = std::chrono::steady_clock::now();
  const ExperimentData data = load_experiment_data(c);
  const std::optional<Dataset> ood = load_ood_data(c, data.test);
  std::error_code ec;
  fs::create_directories(c.output_dir, ec);
  if (ec) throw IoError("cannot create " + c.output_dir.string() + ": " + ec.message());

  ResultsRecord record;
  record.config = to_json(c);
  write_text(c.output_dir / "config.json", record.config.dump(2) + "\n");

  std::vector<int> test_classes;
  for (int k = 0; k < c.meta_test.num_classes; ++k) test_classes.push_back(k);

  struct Slot {
    std::optional<RunRecord> run;
    std::optional<FailureRecord> failure;
  };
  const std::size_t n_jobs = c.seeds.size() * c.runs.size();
  std::vector<Slot> slots(n_jobs);
  detail::parallel_for(n_jobs, c.jobs, [&](std::size_t job) {
    const std::uint64_t seed = c.seeds[job / c.runs.size()];
    const RunSpec& spec = c.runs[job % c.runs.size()];
    const fs::path dir = c.output_dir / run_dir_name(spec, seed);
    std::string stage = "cluster";
    try {
      fs::create_directories(dir);
      ClusterAssignment assignment = cluster_for_seed(c, data.train, seed);
      write_assignment_csv(assignment, dir / "assignment.csv");
      TrainingConfig tc = spec.training;
      tc.seed = seed;
      if (tc.loss_balancing)
        write_balancing_csv(compute_balancing_vector(detail::make_task_source(data.train, assignment, tc).assignment.sizes),
                            dir / "balancing.csv");

      stage = "meta_train";
      logger().info("[{} seed {}] meta-training {} steps", spec.name, seed, tc.steps);
      const auto t0 = std::chrono::steady_clock::now();
      TrainResult trained = meta_train(data.train, assignment, c.arch, tc);
      const auto t1 = std::chrono::steady_clock::now();
      RunRecord rec;
      rec.variant = spec.name;
      rec.k = trained.params.arch.num_classes;
      rec.seed = seed;
      rec.step_ms_mean = trained.log.mean_wall_ms();
      rec.train_seconds = std::chrono::duration<double>(t1 - t0).count();
      const std::size_t tail = std::min<std::size_t>(100, trained.log.size());
      for (std::size_t i = trained.log.size() - tail; i < trained.log.size(); ++i) rec.final_loss += trained.log.outer_loss[i];
      rec.final_loss /= double(std::max<std::size_t>(tail, 1));
      write_train_log_csv(trained.log, dir / "train_log.csv");
      rec.train_log = (dir / "train_log.csv").string();
      if (c.save_checkpoints) {
        save_checkpoint(trained.params, dir / "checkpoint.fckpt");
        rec.checkpoint = (dir / "checkpoint.fckpt").string();
      }

      stage = "meta_test";
      const auto order = shuffled_classes(test_classes, seed);
      rec.curve = meta_test(trained.params, data.test, order, c.meta_test.shots, c.meta_test.fine_tune, spec.rehearsal, seed, &rec.stats);
      rec.curve.variant = spec.name;
      if (ood) {
        stage = "ood";
        std::vector<int> ood_classes;
        for (int k = 0; k < std::min(c.meta_test.num_classes, ood->num_classes); ++k) ood_classes.push_back(k);
        rec.ood = ood_evaluate(trained.params, *ood, shuffled_classes(ood_classes, seed), c.meta_test.shots, c.meta_test.fine_tune, seed,
                               spec.rehearsal);
        rec.ood->variant = spec.name;
      }
      rec.test_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
      logger().info("[{} seed {}] final accuracy {:.4f} ({:.2f} ms/step)", spec.name, seed, rec.curve.final_accuracy(), rec.step_ms_mean);
      slots[job].run = std::move(rec);
    } catch (const std::exception& e) {
      logger().error("[{} seed {}] {} failed: {}", spec.name, seed, stage, e.what());
      slots[job].failure = FailureRecord{spec.name, "", seed, stage, e.what()};
    }
  });

  // Run order: runs as configured, seeds within each run.
  for (std::size_t r = 0; r < c.runs.size(); ++r)
    for (std::size_t s = 0; s < c.seeds.size(); ++s) {
      auto& slot = slots[s * c.runs.size() + r];
      if (slot.run) record.runs.push_back(std::move(*slot.run));
      if (slot.failure) record.failures.push_back(std::move(*slot.failure));
    }
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  write_text(c.output_dir / kRecordFile, to_json(record).dump(2) + "\n");
  if (write_report) emit_report(record, c.output_dir);
  return record;
}

/// Regenerate the report files of a results directory from its record.
inline ResultsRecord report_directory(const std::filesystem::path& dir) {
  ResultsRecord r = load_results(dir);
  emit_report(r, dir);
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps

namespace detail {

inline YAML::Node sweep_target(YAML::Node root, const std::string& param) {
  const std::string path = param == "k" ? "clustering.k" : param;
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  if (parts.empty() || std::any_of(parts.begin(), parts.end(), [](const std::string& p) { return p.empty(); }))
    throw ConfigError("invalid sweep parameter '" + param + "'");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) root.reset(root[parts[i]]);
  return root;
}

inline std::string leaf_name(const std::string& param) {
  const auto dot = param.rfind('.');
  return dot == std::string::npos ? param : param.substr(dot + 1);
}

}  // namespace detail

/// Run the config once per value of `param` (a dotted key such as
/// `training.outer_lr`; `k` is short for `clustering.k`) into
/// <out>/<param>_<value>/, then write a combined report into <out>.
inline ResultsRecord run_sweep(const std::filesystem::path& config_path, const std::string& param, const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  if (std::set<std::string>(values.begin(), values.end()).size() != values.size()) throw ConfigError("sweep values must be distinct");
  const ExperimentConfig base = load_experiment_config(config_path);
  YAML::Node root;
  try {
    root = YAML::LoadFile(config_path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot parse " + config_path.string() + ": " + e.what());
  }
  const std::string leaf = detail::leaf_name(param == "k" ? "clustering.k" : param);

  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) {
    YAML::Node copy = YAML::Clone(root);
    YAML::Node parent = detail::sweep_target(copy, param);
    parent[leaf] = YAML::Load(v);
    ExperimentConfig c = experiment_from_yaml(copy, config_path.parent_path());
    if (param.rfind("training.", 0) == 0 && copy["runs"]) {
      // Shared training values do not reach runs that set the key themselves.
      for (std::size_t i = 0; i < copy["runs"].size(); ++i)
        if (copy["runs"][i][leaf]) throw ConfigError("run '" + c.runs[i].name + "' overrides the swept key " + leaf);
    }
    c.output_dir = base.output_dir / (param + "_" + v);
    c.validate();
    configs.push_back(std::move(c));
  }

  const auto t0 = std::chrono::steady_clock::now();
  ResultsRecord combined;
  combined.sweep_param = param;
  combined.config = to_json(base);
  combined.config["sweep"] = {{"param", param}, {"values", values}};
  for (std::size_t i = 0; i < configs.size(); ++i) {
    logger().info("sweep {}={}", param, values[i]);
    ResultsRecord r = run_experiment(configs[i]);
    for (auto& run : r.runs) {
      run.sweep_value = values[i];
      combined.runs.push_back(std::move(run));
    }
    for (auto& f : r.failures) {
      f.sweep_value = values[i];
      combined.failures.push_back(std::move(f));
    }
  }
  combined.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::filesystem::create_directories(base.output_dir);
  write_text(base.output_dir / kRecordFile, to_json(combined).dump(2) + "\n");
  emit_report(combined, base.output_dir);
  return combined;
}

}  // namespace fusion
