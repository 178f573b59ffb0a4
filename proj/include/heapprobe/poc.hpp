#pragma once

// Turns a finding into a standalone C program that replays the executed
// actions against the same allocator and exits 0 iff the impact shows up
// again. Values stay symbolic (buffer, container and chunk addresses are
// read at run time), so the program does not depend on a particular
// address-space layout.

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "heapprobe/codec.hpp"
#include "heapprobe/minimizer.hpp"
#include "heapprobe/report.hpp"
#include "heapprobe/target.hpp"

namespace heapprobe {

class PocError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// How the emitted program reaches the allocator.
struct PocTarget {
  TargetSpec spec;
  std::string library;  // dlopen'ed for bundled and so: targets
  UsableSizeMode usable = UsableSizeMode::Api;
};

PocTarget resolve_poc_target(const TargetSpec& spec);

struct PocProgram {
  std::string source;
  std::string file_name;  // <target>_<impact>_<trace-hash>.c
  ImpactKey asserted;
  std::string trace_hash;
};

/// 16 hex digits of FNV-1a over the trace bytes.
std::string trace_hash(std::span<const std::uint8_t> bytes);

/// `report` must be the replay of `program` (same spec) and carry a
/// primary impact. Actions after the primary event are not emitted.
PocProgram emit_poc(const TraceProgram& program, const ImpactReport& report,
                    const PocTarget& target);

inline constexpr std::string_view kDefaultCompileCommand =
    "cc -std=c11 -Wall -Wextra -Werror -pedantic -O0 -o {out} {src} -ldl";

struct PocCheck {
  bool compiled = false;
  int exit_status = -1;  // -1 when killed by a signal or not run
  int signal = 0;
  std::string compiler_output;
};

/// Writes the source into `dir`, compiles it with `command` ({src} and
/// {out} are substituted) and runs it with a timeout.
PocCheck check_poc(const PocProgram& poc, const PocTarget& target,
                   const std::filesystem::path& dir,
                   std::string_view command = kDefaultCompileCommand);

}  // namespace heapprobe
