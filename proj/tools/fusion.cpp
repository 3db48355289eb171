// fusion: experiment CLI.
//
//   fusion run <config.yaml>
//   fusion report <results-dir>
//   fusion sweep <config.yaml> --param k --values 10,30,60
//   fusion selftest
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure
// (including any run that failed inside an experiment).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <unistd.h>

#include <spdlog/cfg/env.h>

#include "fusion/alloc.hpp"
#include "fusion/error.hpp"
#include "fusion/experiment.hpp"
#include "fusion/log.hpp"
#include "fusion/selftest.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

int finish(const fusion::ResultsRecord& r, const std::filesystem::path& dir) {
  std::cout << "wrote " << r.runs.size() << " run(s) to " << dir.string() << "\n";
  if (!r.failures.empty()) {
    std::cerr << r.failures.size() << " run(s) failed; see " << (dir / "failures.csv").string() << "\n";
    return kRuntime;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  fusion::tune_allocator();
  spdlog::cfg::load_env_levels();
  fusion::logger();

  CLI::App app{"Few-shot unsupervised continual learning experiments"};
  app.require_subcommand(1);
  int jobs = -1;
  std::string level;
  app.add_option("--log-level", level, "trace, debug, info, warn, error or off");

  std::string config, results_dir, param, values;
  auto* run = app.add_subcommand("run", "Run every seed and training run of a config");
  run->add_option("config", config, "YAML experiment config")->required();
  run->add_option("-j,--jobs", jobs, "Parallel jobs (overrides output.jobs)");

  auto* report = app.add_subcommand("report", "Regenerate CSVs, plot and summary of a results directory");
  report->add_option("results", results_dir, "Directory holding record.json")->required();

  auto* sweep = app.add_subcommand("sweep", "Repeat a config over values of one parameter");
  sweep->add_option("config", config, "YAML experiment config")->required();
  sweep->add_option("--param", param, "Dotted config key; 'k' means clustering.k")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();

  auto* selftest = app.add_subcommand("selftest", "Run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }
  if (!level.empty()) fusion::logger().set_level(spdlog::level::from_str(level));

  try {
    if (*run) {
      auto cfg = fusion::load_experiment_config(config);
      if (jobs >= 0) cfg.jobs = jobs;
      return finish(fusion::run_experiment(cfg), cfg.output_dir);
    }
    if (*report) {
      if (!std::filesystem::is_regular_file(std::filesystem::path(results_dir) / fusion::kRecordFile))
        throw fusion::ValidationError("no " + std::string(fusion::kRecordFile) + " in " + results_dir);
      auto r = fusion::report_directory(results_dir);
      std::cout << "report written to " << results_dir << "\n";
      return r.failures.empty() ? kOk : kRuntime;
    }
    if (*sweep) {
      std::vector<std::string> list;
      std::string cur;
      for (char ch : values + ",") {
        if (ch != ',') {
          cur += ch;
          continue;
        }
        if (cur.empty()) throw fusion::ConfigError("empty entry in --values");
        list.push_back(cur);
        cur.clear();
      }
      auto cfg = fusion::load_experiment_config(config);
      return finish(fusion::run_sweep(config, param, list), cfg.output_dir);
    }
    if (*selftest) {
      const auto scratch = std::filesystem::temp_directory_path() / ("fusion_selftest_" + std::to_string(::getpid()));
      bool ok = true;
      for (const auto& r : fusion::run_selftest(scratch)) {
        std::printf("%s  %-45s %6.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
        ok = ok && r.passed;
      }
      std::filesystem::remove_all(scratch);
      return ok ? kOk : kRuntime;
    }
  } catch (const fusion::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
