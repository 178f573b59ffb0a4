#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "heapprobe/codec.hpp"
#include "heapprobe/detector.hpp"
#include "heapprobe/model_spec.hpp"
#include "heapprobe/target.hpp"
#include "heapprobe/types.hpp"

namespace heapprobe {

/// The heap container as it sits in attacker-visible memory: one column per
/// field so `base` is a plain pointer array, as in a typical exploit
/// driver. The allocator may corrupt any of it; the engine reads it back
/// as-is.
struct ContainerLayout {
  std::array<Word, kMaxActions> base;
  std::array<Word, kMaxActions> request;
  std::array<Word, kMaxActions> usable;
  std::array<Word, kMaxActions> status;
};

inline constexpr Word kStatusLive = 1;
inline constexpr Word kStatusFreed = 2;

inline constexpr std::size_t kContainerBytes = sizeof(ContainerLayout);
static_assert(kContainerBytes <= 16 * 1024);

enum class StepStatus : std::uint8_t {
  Executed,
  Skipped,  // ignored by a legitimacy or single-bug rule
  Failed,   // allocation returned zero
};

struct StepRecord {
  StepStatus status = StepStatus::Skipped;
  std::uint16_t records = 0;  // container records before the action ran

  bool operator==(const StepRecord&) const = default;
};

/// What materialize_value may look at.
struct ExecutionContext {
  const ContainerLayout* container = nullptr;
  std::size_t records = 0;
  std::uintptr_t buffer_base = 0;
  std::uintptr_t container_base = 0;
  KnowledgeSet knowledge;
  std::span<const std::uint64_t> explicit_sizes;

  std::optional<std::uintptr_t> role_address(Role role) const;
};

/// Concrete word for a symbolic value. Chunk indices wrap modulo the record
/// count; strategies that need a chunk yield 0 on an empty container.
Word materialize_value(const Value& value, const ExecutionContext& ctx);

struct ExecOptions {
  /// Called before every memory write the engine performs.
  void (*on_write)(void* user, std::uintptr_t address, std::size_t length,
                   ActionKind kind) = nullptr;
  /// Called as soon as an impact event is detected.
  void (*on_event)(void* user, const ImpactEvent& event) = nullptr;
  void* user = nullptr;
};

/// One run of a trace against a target. All engine state (container,
/// buffer, shadows, the trace itself, logs) lives in private mappings at
/// salt-derived addresses, away from the target heap; after `load` the
/// engine makes no allocator calls of its own.
class Execution {
 public:
  Execution(const AllocatorTarget& target, const ModelSpec& spec, Word salt,
            ExecOptions options = {});
  ~Execution();
  Execution(const Execution&) = delete;
  Execution& operator=(const Execution&) = delete;

  void load(std::span<const Action> actions);
  /// Executes the next action; false once the trace is exhausted.
  bool step();
  void run() {
    while (step()) {
    }
  }

  std::span<const ImpactEvent> events() const;
  std::span<const StepRecord> log() const;
  std::optional<BugKind> committed_bug() const;

  const ContainerLayout& container() const;
  std::size_t records() const;
  std::uintptr_t container_base() const;
  std::uintptr_t buffer_base() const;
  std::span<std::byte> buffer();
  ExecutionContext context() const;
  ShadowState& shadow();

 private:
  struct State;

  void apply(const Action& action, std::size_t index);
  void apply_allocate(const Action& action, std::size_t index);
  void apply_deallocate(const Action& action, std::size_t index);
  void apply_heap_write(const Action& action, std::size_t index);
  void apply_buffer_write(const Action& action, std::size_t index);
  void apply_bug(const Action& action, std::size_t index);
  void checkpoint(const Action& action, std::size_t index);
  ImpactEvent make_event(std::size_t index, ImpactClass impact, Site site,
                         ActionKind trigger) const;
  void emit(const ImpactEvent& event);
  void commit(BugKind bug);
  void mark(std::size_t index, StepStatus status);
  void store_container(Word* field, Word value);
  ContainerLayout& layout() const;
  void write_word(std::uintptr_t address, Word value, ActionKind kind);
  void write_byte(std::uintptr_t address, std::uint8_t value, ActionKind kind);
  std::optional<std::size_t> pick(std::uint8_t chunk) const;

  const AllocatorTarget* target_;
  ExecOptions options_;
  State* state_ = nullptr;
  std::byte* container_map_ = nullptr;
  std::byte* buffer_map_ = nullptr;
  std::byte* state_map_ = nullptr;
  std::size_t state_map_bytes_ = 0;
};

enum class OutcomeKind { NoImpact, Finding, Crash, Timeout };

std::string_view name(OutcomeKind kind);
std::optional<OutcomeKind> parse_outcome(std::string_view text);

struct ExecutionOutcome {
  OutcomeKind kind = OutcomeKind::NoImpact;
  std::vector<ImpactEvent> events;
  std::vector<StepRecord> log;
  Verdict verdict;
  std::string message;  // allocator abort text for crashes
  int signal = 0;
};

/// In-process execution. The caller is responsible for isolation: a
/// corrupting trace can take the calling process down.
ExecutionOutcome execute(const TraceProgram& program,
                         const AllocatorTarget& target, const ModelSpec& spec,
                         Word salt, const ExecOptions& options = {});

}  // namespace heapprobe
