#pragma once

// Fuzzing campaigns: generate or read inputs, run them in worker processes,
// keep one finding per dedup key, minimize and emit a PoC for each, and
// account for every execution in a summary.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "heapprobe/model_spec.hpp"
#include "heapprobe/report.hpp"
#include "heapprobe/target.hpp"

namespace heapprobe {

class CampaignError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CampaignConfig {
  TargetSpec target;
  ModelSpec spec;
  std::chrono::milliseconds budget{std::chrono::minutes(1)};
  unsigned workers = 1;  // the CLI defaults to the logical CPU count
  Word seed = 0;
  std::filesystem::path out;
  std::optional<std::filesystem::path> input_dir;  // external-fuzzer mode
  bool keep_duplicates = false;
  std::optional<std::uint64_t> max_execs;
  EnumSet<ImpactClass> stop_on;  // end early once a finding of these classes
  std::size_t max_actions = kMaxActions;
  std::chrono::milliseconds timeout{2000};
  // Candidates that corrupt a free list often spin; legitimate runs take
  // milliseconds, and a timeout already counts as "impact lost".
  std::chrono::milliseconds minimize_timeout{250};
  bool minimize = true;
  bool emit_poc = true;
  int finding_signal = 0;
  std::string worker;  // empty: default
  std::function<void(const std::string&)> progress;
};

struct FindingRecord {
  std::string key;
  std::filesystem::path dir;
  ImpactReport report;
  std::size_t raw_actions = 0;
  std::optional<std::size_t> min_actions;
  std::optional<ImpactReport> min_report;
  std::string note;  // flaky minimization, PoC refusal, ...
};

struct CampaignSummary {
  std::string target;
  std::string spec;
  Word seed = 0;
  std::uint64_t executions = 0;
  std::uint64_t finding_executions = 0;
  std::uint64_t no_impact = 0;
  std::uint64_t crashes = 0;
  std::uint64_t timeouts = 0;
  std::map<std::string, std::uint64_t> findings_per_class;  // saved findings
  std::map<std::string, std::uint64_t> aborts_per_check;
  std::map<std::string, std::uint64_t> unknown_aborts;  // verbatim message
  std::vector<FindingRecord> findings;
  std::chrono::milliseconds elapsed{0};

  /// Counters only; findings and timing are not part of the comparison.
  bool same_counters(const CampaignSummary& other) const;
};

/// Deterministic input `index` of the stream for `seed`: 8 to 1024 bytes.
std::vector<std::uint8_t> generate_input(Word seed, std::uint64_t index);
Word derive_salt(Word seed, std::uint64_t index);

/// `<impact>-<site>-<bug>-<trigger>`, e.g. `RW-container-OF-deallocate`.
std::string dedup_key(const ImpactEvent& primary);

CampaignSummary fuzz(const CampaignConfig& config);

std::string format_summary(const CampaignSummary& summary);
CampaignSummary parse_summary(std::string_view text);
CampaignSummary load_summary(const std::filesystem::path& campaign_dir);

struct CoverageReport {
  std::vector<std::pair<std::string, std::uint64_t>> hit;  // catalog order
  std::vector<std::string> missed;
  std::map<std::string, std::uint64_t> unknown;
};

CoverageReport coverage_report(const CampaignSummary& summary);
std::string format_coverage(const CoverageReport& coverage);

/// Writes `content` next to `path` and renames it into place.
void write_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace heapprobe
