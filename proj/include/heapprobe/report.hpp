#pragma once

// Line-oriented `key=value` run reports. One file per execution; the worker
// appends `event=` lines as impacts are detected so a later crash cannot
// lose them.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "heapprobe/detector.hpp"
#include "heapprobe/engine.hpp"

namespace heapprobe {

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImpactReport {
  OutcomeKind outcome = OutcomeKind::NoImpact;
  std::optional<ImpactEvent> primary;
  std::vector<ImpactEvent> events;  // every event, in detection order
  std::vector<StepRecord> log;
  std::vector<std::uint8_t> trace;
  Word salt = 0;
  std::string target;
  int codec_version = kCodecVersion;
  std::string spec;  // inline form
  std::string message;
  std::optional<std::string> check_id;
  int signal = 0;

  bool operator==(const ImpactReport&) const = default;
};

std::string to_hex(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> from_hex(std::string_view hex);

/// `<index>,<impact>,<site>,<trigger>,<bug|->`
std::string format_event(const ImpactEvent& event);
std::optional<ImpactEvent> parse_event(std::string_view text);

/// Space-separated `<E|S|F><records>` per executed step.
std::string format_log(std::span<const StepRecord> log);
std::vector<StepRecord> parse_log(std::string_view text);

std::string serialize(const ImpactReport& report);
/// Later keys override earlier ones, except `event=` which accumulates.
ImpactReport parse_report(std::string_view text);

ImpactReport load_report(const std::string& path);
void save_report(const std::string& path, const ImpactReport& report);

/// Recomputes `primary` from `events` under the allowed impacts.
void apply_verdict(ImpactReport& report, EnumSet<ImpactClass> allowed);

}  // namespace heapprobe
