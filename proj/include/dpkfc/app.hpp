#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dpkfc/config.hpp"
#include "dpkfc/trainer.hpp"

namespace dpkfc::app {

/// Environment variable that, when set, prefixes relative output directories.
inline constexpr const char* kOutputRootEnv = "DPKFC_OUTPUT_ROOT";

/// Exit codes of run().
enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
  kContract = 5,
};

struct Request {
  std::string task;         // overrides the config's task when non-empty
  std::string config_path;  // empty: defaults only
  std::vector<std::string> overrides;
};

/// Resolves the config, dispatches the task, writes outputs atomically and
/// returns an exit code. Failures print one JSON error record on `err`.
int run(const Request& request, std::ostream& out, std::ostream& err);

/// Output directory after applying the output-root environment variable.
std::filesystem::path output_dir(const config::Json& resolved);

/// CSV for a run record: one row per step.
std::string run_csv(const train::RunRecord& record);

/// Blobs proxy with the same geometry and class count as `like`, drawn with
/// a different seed, mean scale and noise level (a deliberately mismatched proxy).
data::Dataset mismatched_proxy(const data::Dataset& like, std::uint64_t seed);

}  // namespace dpkfc::app
