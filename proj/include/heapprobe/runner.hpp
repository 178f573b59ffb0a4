#pragma once

// Runs traces in fresh worker processes. Each execution gets its own
// process so heap corruption never leaks between runs; the parent only
// reads the worker's report file, exit status, and captured stderr.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "heapprobe/model_spec.hpp"
#include "heapprobe/report.hpp"
#include "heapprobe/target.hpp"

namespace heapprobe {

namespace exit_code {
inline constexpr int kNoImpact = 0;
inline constexpr int kUsage = 2;
inline constexpr int kFinding = 10;
inline constexpr int kCrash = 11;
inline constexpr int kTimeout = 12;
}  // namespace exit_code

class RunnerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunnerConfig {
  TargetSpec target;
  ModelSpec spec;
  std::chrono::milliseconds timeout{2000};
  std::string worker;               // empty: default_worker_path()
  std::filesystem::path scratch;    // empty: private temp directory
  int finding_signal = 0;           // raised by the worker on findings
  std::size_t max_actions = kMaxActions;
};

struct RunJob {
  std::vector<std::uint8_t> trace;
  Word salt = 0;
};

/// Worker binary next to the running executable, then the build-time path.
/// `HEAPPROBE_WORKER` overrides both.
std::string default_worker_path();

class Runner {
 public:
  explicit Runner(RunnerConfig config);
  ~Runner();
  Runner(const Runner&) = delete;
  Runner& operator=(const Runner&) = delete;

  ImpactReport run(std::span<const std::uint8_t> trace, Word salt);
  /// Runs up to `workers` processes at a time; results are in job order.
  std::vector<ImpactReport> run_batch(std::span<const RunJob> jobs, unsigned workers);

  const RunnerConfig& config() const { return config_; }

 private:
  struct Slot;

  void spawn(Slot& slot, const RunJob& job);
  ImpactReport collect(Slot& slot, int status, bool killed);

  RunnerConfig config_;
  std::string spec_inline_;
  std::vector<std::string> env_;
  bool owns_scratch_ = false;
};

}  // namespace heapprobe
