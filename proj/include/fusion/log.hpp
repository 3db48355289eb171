#pragma once

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <memory>

namespace fusion {

/// Library logger (stderr). Level follows SPDLOG_LEVEL when the CLI loads it.
inline spdlog::logger& logger() {
  static std::shared_ptr<spdlog::logger> log = [] {
    auto existing = spdlog::get("fusion");
    if (existing) return existing;
    auto l = spdlog::stderr_color_mt("fusion");
    l->set_pattern("[%l] %v");
    return l;
  }();
  return *log;
}

}  // namespace fusion
