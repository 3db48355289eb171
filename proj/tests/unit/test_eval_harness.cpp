#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <sys/wait.h>

#include "fusion/eval.hpp"
#include "fusion/experiment.hpp"
#include "fusion/selftest.hpp"

namespace fs = std::filesystem;
using namespace fusion;

namespace {

ArchConfig eval_arch() {
  ArchConfig a;
  a.conv_width = 8;
  a.trunk_hidden = 32;
  a.feature_dim = 16;
  a.cln_hidden = {16};
  return a;
}

std::vector<int> iota_classes(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / "fusion_unit_eval" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

constexpr const char* kTinyConfig = R"(name: tiny
seeds: [1, 2]
dataset:
  num_classes: 8
  train_classes: 5
  samples_per_class: 8
  image_size: 12
embedding:
  dim: 8
clustering:
  k: 5
architecture:
  conv_width: 3
  conv_kernels: [3, 3]
  conv_strides: [2, 2]
  conv_padding: [1, 1]
  trunk_hidden: 8
  feature_dim: 6
  cln_hidden: [8]
training:
  outer_lr: 0.001
  steps: 8
  q_random: 3
runs:
  - name: MEML
  - name: OML
    variant: OML
meta_test:
  num_classes: 3
  shots: 2
ood:
  source: inverted
output:
  dir: out
  jobs: 1
)";

ExperimentConfig tiny_config(const fs::path& out) {
  auto c = experiment_from_yaml(YAML::Load(kTinyConfig));
  c.output_dir = out;
  return c;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  auto p = dir / "config.yaml";
  std::ofstream(p) << text;
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FUSION_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Accuracy, CountsArgmaxWithLowestIndexTies) {
  Eigen::MatrixXd l(4, 2);
  l << 1, 0, 0, 1, 1, 0, 0, 1;
  std::vector<int> y{0, 1, 0, 0};
  EXPECT_DOUBLE_EQ(accuracy(l, y), 0.75);
  std::vector<int> zeros(4, 0);
  EXPECT_DOUBLE_EQ(accuracy(Eigen::MatrixXd::Zero(4, 3), zeros), 1.0);
  std::vector<int> ones(4, 1);
  EXPECT_DOUBLE_EQ(accuracy(Eigen::MatrixXd::Zero(4, 3), ones), 0.0);
  EXPECT_THROW(accuracy(Eigen::MatrixXd(0, 2), std::vector<int>{}), MetricError);
  EXPECT_THROW(accuracy(l, std::vector<int>{0}), MetricError);
}

TEST(MetaTest, UntrainedWithoutFineTuningIsExactlyChance) {
  const Dataset test = generate_synthetic_glyphs(10, 10, 28, 11);
  FineTuneConfig ft;
  ft.steps = 0;
  for (int C : {2, 10})
    for (std::uint64_t s = 0; s < 4; ++s) {
      auto curve = meta_test(init_params(eval_arch(), s), test, shuffled_classes(iota_classes(C), s), 5, ft, false, s);
      EXPECT_DOUBLE_EQ(curve.final_accuracy(), 1.0 / C);
      EXPECT_EQ(curve.points.size(), std::size_t(C));
    }
}

TEST(MetaTest, CurveShapeAndEvalSizes) {
  const Dataset test = generate_synthetic_glyphs(3, 7, 28, 2);
  auto curve = meta_test(init_params(eval_arch(), 1), test, iota_classes(3), 4, {}, false, 5);
  ASSERT_EQ(curve.points.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(curve.points[i].num_classes, int(i + 1));
    EXPECT_EQ(curve.points[i].eval_items, 3 * (i + 1));
  }
  EXPECT_NO_THROW(curve.validate());
}

TEST(MetaTest, FrozenRepresentationChecksums) {
  const ParameterBundle p = init_params(eval_arch(), 3);
  const Dataset test = generate_synthetic_glyphs(4, 8, 28, 3);
  const GroupMask frozen{true, false, true, true, true};
  const auto before = p.checksum(frozen);
  const auto cln_before = p.checksum(GroupMask::only(Group::Cln));
  for (bool rehearsal : {false, true}) meta_test(p, test, iota_classes(4), 3, {}, rehearsal, 1);
  EXPECT_EQ(p.checksum(frozen), before);
  EXPECT_EQ(p.checksum(GroupMask::only(Group::Cln)), cln_before);
}

TEST(MetaTest, RehearsalAccounting) {
  const ParameterBundle p = init_params(eval_arch(), 4);
  const Dataset test = generate_synthetic_glyphs(4, 8, 28, 4);
  MetaTestStats off, on;
  FineTuneConfig ft;
  ft.steps = 5;
  meta_test(p, test, iota_classes(4), 3, ft, false, 2, &off);
  meta_test(p, test, iota_classes(4), 3, ft, true, 2, &on);
  EXPECT_EQ(off.w_updates, 20u);
  EXPECT_EQ(on.w_updates, 20u);
  EXPECT_EQ(off.rehearsal_items, 0u);
  // From the second class on every step replays one shot-sized batch.
  EXPECT_EQ(on.rehearsal_items, 3u * 5u * 3u);
}

TEST(MetaTest, InvalidArguments) {
  const ParameterBundle p = init_params(eval_arch(), 4);
  const Dataset test = generate_synthetic_glyphs(3, 4, 28, 4);
  EXPECT_THROW(meta_test(p, test, std::vector<int>{}, 2, {}, false, 1), ConfigError);
  EXPECT_THROW(meta_test(p, test, iota_classes(3), 4, {}, false, 1), ConfigError);
  EXPECT_THROW(meta_test(p, test, std::vector<int>{5}, 2, {}, false, 1), ConfigError);
  EXPECT_THROW(meta_test(p, generate_synthetic_glyphs(3, 4, 16, 4), iota_classes(3), 2, {}, false, 1), ShapeError);
}

TEST(Ood, SameDistributionGivesSameCurve) {
  const ParameterBundle p = init_params(eval_arch(), 6);
  const Dataset test = generate_synthetic_glyphs(4, 8, 28, 6);
  auto a = meta_test(p, test, iota_classes(4), 3, {}, false, 9);
  auto b = ood_evaluate(p, test, iota_classes(4), 3, {}, 9);
  ASSERT_EQ(a.points.size(), b.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i) EXPECT_EQ(a.points[i].accuracy, b.points[i].accuracy);
}

TEST(Ood, RgbAdaptedToGrayscaleAndResized) {
  Dataset rgb;
  rgb.channels = 3;
  rgb.height = rgb.width = 4;
  rgb.num_classes = 1;
  rgb.labels = {0, 0};
  rgb.images.assign(2 * rgb.image_size(), 0.0);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 16; ++i) rgb.images[std::size_t(c) * 16 + i] = 0.3 * c;
  auto gray = adapt_dataset(rgb, 1, 4, 4);
  EXPECT_EQ(gray.channels, 1);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(gray.images[i], 0.3, 1e-15);
  auto big = adapt_dataset(rgb, 1, 8, 8);
  EXPECT_EQ(big.image_size(), 64u);
  auto inv = invert_contrast(gray);
  EXPECT_NEAR(inv.images[0], 0.7, 1e-15);
}

TEST(Config, ParsesRunsAndOverrides) {
  auto c = experiment_from_yaml(YAML::Load(kTinyConfig));
  ASSERT_EQ(c.runs.size(), 2u);
  EXPECT_EQ(c.runs[0].training.variant, Variant::Meml);
  EXPECT_EQ(c.runs[1].training.variant, Variant::Oml);
  EXPECT_EQ(c.runs[1].training.steps, 8);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(c.arch.conv_kernels, (std::vector<int>{3, 3}));
  EXPECT_EQ(c.ood.source, "inverted");
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(experiment_from_yaml(YAML::Load("bogus: 1")), ConfigError);
  EXPECT_THROW(experiment_from_yaml(YAML::Load("training: {variant: MAML}")), ConfigError);
  EXPECT_THROW(experiment_from_yaml(YAML::Load("training: {steps: many}")), ConfigError);
  EXPECT_THROW(experiment_from_yaml(YAML::Load("runs: {a: 1}")), ConfigError);

  auto c = experiment_from_yaml(YAML::Load(kTinyConfig));
  c.seeds = {1, 1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = experiment_from_yaml(YAML::Load(kTinyConfig));
  c.meta_test.num_classes = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = experiment_from_yaml(YAML::Load(kTinyConfig));
  c.runs[1].name = "MEML";
  EXPECT_THROW(c.validate(), ConfigError);
  c = experiment_from_yaml(YAML::Load(kTinyConfig));
  c.dataset.source = "imagenet";
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(load_experiment_config("/nonexistent/config.yaml"), ConfigError);
}

TEST(Config, OutputDirectoryFromEnvironment) {
  auto dir = fresh_dir("env");
  auto path = write_config(dir, kTinyConfig);
  ::unsetenv("FUSION_OUT");
  EXPECT_EQ(load_experiment_config(path).output_dir, dir / "out");
  ::setenv("FUSION_OUT", "/tmp/elsewhere", 1);
  EXPECT_EQ(load_experiment_config(path).output_dir, fs::path("/tmp/elsewhere"));
  ::unsetenv("FUSION_OUT");
}

TEST(Experiment, ReportFilesAndReaggregation) {
  auto out = fresh_dir("report");
  auto r = run_experiment(tiny_config(out));
  ASSERT_TRUE(r.failures.empty()) << r.failures.front().message;
  ASSERT_EQ(r.runs.size(), 4u);
  for (const char* f : {"results.csv", "timing.csv", "eval_sizes.csv", "plot_data.csv", "accuracy.svg", "failures.csv",
                        "summary.md", "ood_results.csv", "ood_plot_data.csv", "ood_accuracy.svg", "config.json",
                        "record.json", "runs/MEML/seed_1/assignment.csv", "runs/OML/seed_2/train_log.csv",
                        "runs/MEML/seed_2/checkpoint.fckpt"})
    EXPECT_TRUE(fs::exists(out / f)) << f;

  // Mean per (variant, classes) recomputed from results.csv.
  std::ifstream csv(out / "results.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "variant,k,seed,num_classes,accuracy");
  std::map<std::pair<std::string, int>, std::pair<double, int>> sums;
  int rows = 0;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string variant, k, seed, n, acc;
    std::getline(ss, variant, ',');
    std::getline(ss, k, ',');
    std::getline(ss, seed, ',');
    std::getline(ss, n, ',');
    std::getline(ss, acc, ',');
    auto& s = sums[{variant, std::stoi(n)}];
    s.first += std::stod(acc);
    s.second += 1;
    ++rows;
  }
  EXPECT_EQ(rows, 4 * 3);
  std::ifstream plot(out / "plot_data.csv");
  std::getline(plot, line);
  EXPECT_EQ(line, "series,num_classes,mean,min,max,n");
  int plot_rows = 0;
  while (std::getline(plot, line)) {
    std::stringstream ss(line);
    std::string label, n, mean;
    std::getline(ss, label, ',');
    std::getline(ss, n, ',');
    std::getline(ss, mean, ',');
    const auto& s = sums.at({label, std::stoi(n)});
    EXPECT_NEAR(std::stod(mean), s.first / s.second, 1e-15);
    EXPECT_EQ(s.second, 2);
    ++plot_rows;
  }
  EXPECT_EQ(plot_rows, 2 * 3);

  const std::string svg = slurp(out / "accuracy.svg");
  std::size_t groups = 0;
  for (auto pos = svg.find("<g class=\"series\""); pos != std::string::npos; pos = svg.find("<g class=\"series\"", pos + 1)) ++groups;
  EXPECT_EQ(groups, 2u);

  // The report regenerates identically from record.json alone.
  const std::string before = slurp(out / "results.csv");
  const std::string plot_before = slurp(out / "plot_data.csv");
  fs::remove(out / "results.csv");
  report_directory(out);
  EXPECT_EQ(slurp(out / "results.csv"), before);
  EXPECT_EQ(slurp(out / "plot_data.csv"), plot_before);
}

TEST(Experiment, RerunIsByteIdentical) {
  auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  auto ca = tiny_config(a), cb = tiny_config(b);
  cb.jobs = 2;
  run_experiment(ca);
  run_experiment(cb);
  for (const char* f : {"results.csv", "plot_data.csv", "ood_results.csv", "eval_sizes.csv"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_EQ(slurp(a / "runs/OML/seed_1/assignment.csv"), slurp(b / "runs/OML/seed_1/assignment.csv"));
}

TEST(Experiment, FailingRunIsRecordedAndOthersContinue) {
  auto out = fresh_dir("fail");
  auto c = tiny_config(out);
  c.seeds = {1};
  c.runs[1].training.task_mode = TaskMode::Balanced;
  c.runs[1].training.balanced_size = 40;  // no cluster is this large
  auto r = run_experiment(c);
  ASSERT_EQ(r.runs.size(), 1u);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].variant, "OML");
  EXPECT_EQ(r.failures[0].stage, "meta_train");
  EXPECT_NE(slurp(out / "failures.csv").find("OML,1,meta_train,"), std::string::npos);
}

TEST(Experiment, SweepWritesOneSeriesPerValue) {
  auto dir = fresh_dir("sweep");
  std::string text = kTinyConfig;
  text.replace(text.find("seeds: [1, 2]"), 13, "seeds: [1]");
  text.replace(text.find("  - name: OML\n    variant: OML\n"), 31, "");
  auto path = write_config(dir, text);
  ::unsetenv("FUSION_OUT");
  auto r = run_sweep(path, "k", {"3", "5"});
  EXPECT_EQ(r.runs.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "out/k_3/results.csv"));
  EXPECT_TRUE(fs::exists(dir / "out/k_5/results.csv"));
  EXPECT_EQ(r.runs[0].k, 3);
  EXPECT_EQ(r.runs[1].k, 5);
  const std::string summary = slurp(dir / "out/summary.md");
  EXPECT_NE(summary.find("Best k per variant"), std::string::npos);
  EXPECT_THROW(run_sweep(path, "k", {"3", "3"}), ConfigError);
}

TEST(Cli, ExitCodes) {
  auto dir = fresh_dir("cli");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("run " + (dir / "missing.yaml").string()), 1);
  EXPECT_EQ(run_cli("report " + dir.string()), 1);
  std::ofstream(dir / "bad.yaml") << "bogus_key: 1\n";
  EXPECT_EQ(run_cli("run " + (dir / "bad.yaml").string()), 1);

  std::string failing = kTinyConfig;
  failing.replace(failing.find("seeds: [1, 2]"), 13, "seeds: [1]");
  failing.replace(failing.find("  - name: OML\n    variant: OML\n"), 31,
                  "  - name: OML\n    variant: OML\n    task_mode: balanced\n    balanced_size: 40\n");
  auto path = write_config(dir, failing);
  EXPECT_EQ(run_cli("run " + path.string()), 2);
  EXPECT_EQ(run_cli("report " + (dir / "out").string()), 2);

  const std::string ok_dir = (dir / "ok").string();
  EXPECT_EQ(run_cli("sweep " + path.string() + " --param k --values 3,,4"), 1);
  std::string good = kTinyConfig;
  good.replace(good.find("seeds: [1, 2]"), 13, "seeds: [1]");
  auto good_path = dir / "good.yaml";
  std::ofstream(good_path) << good;
  EXPECT_EQ(run_cli("run " + good_path.string()), 0);
  EXPECT_EQ(run_cli("run " + good_path.string() + " -j 1"), 0);
  EXPECT_EQ(std::system(("FUSION_OUT=" + ok_dir + " " + FUSION_CLI_PATH + " run " + good_path.string() + " > /dev/null 2>&1").c_str()), 0);
  EXPECT_TRUE(fs::exists(fs::path(ok_dir) / "results.csv"));
}
