#pragma once

// Impact detection by overlap checks at allocation time and by comparing the
// engine's own regions (heap container, global buffer) against byte-exact
// shadows after every action. Every legitimate mutation the engine makes is
// mirrored into the shadow, so a divergence can only come from the
// allocator.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "heapprobe/types.hpp"

namespace heapprobe {

struct ImpactEvent {
  std::uint16_t action_index = 0;
  ImpactClass impact = ImpactClass::RestrictedWrite;
  Site site = Site::None;
  ActionKind trigger = ActionKind::Allocate;
  bool has_bug = false;
  BugKind bug = BugKind::Overflow;  // committed bug when the event fired

  bool operator==(const ImpactEvent&) const = default;
};

/// Half-open byte interval.
struct Interval {
  std::uintptr_t lo = 0;
  std::uintptr_t hi = 0;

  constexpr bool empty() const { return hi <= lo; }
  constexpr bool intersects(const Interval& other) const {
    return !empty() && !other.empty() && lo < other.hi && other.lo < hi;
  }
};

/// (address, size) copied at allocation time; never rewritten afterwards
/// except for the liveness flag, which only the engine's own bookkeeping
/// clears.
struct ChunkReplica {
  std::uintptr_t address = 0;
  std::uint64_t size = 0;
  bool live = false;
};

struct AllocationVerdict {
  ImpactClass impact;
  Site site;
};

struct DivergenceVerdict {
  std::optional<ImpactClass> container;
  std::optional<ImpactClass> buffer;

  bool any() const { return container.has_value() || buffer.has_value(); }
};

/// Non-owning view over the regions the detector watches and the storage
/// for its shadows. All spans must outlive the detector.
class ShadowState {
 public:
  ShadowState() = default;
  ShadowState(std::span<std::byte> container, std::span<std::byte> buffer,
              std::span<std::byte> container_shadow,
              std::span<std::byte> buffer_shadow,
              std::span<ChunkReplica> replica_storage);

  /// Copies both regions into their shadows.
  void sync_all();
  void sync_container(std::size_t offset, std::size_t length);
  void sync_buffer(std::size_t offset, std::size_t length);

  void record_allocation(std::uintptr_t address, std::uint64_t size);
  /// Marks the replica for container record `index` as no longer live.
  void retire(std::size_t index);

  std::span<const ChunkReplica> replicas() const {
    return replicas_.first(replica_count_);
  }
  Interval container_interval() const;
  Interval buffer_interval() const;

  /// AC when the new chunk intersects the container or the buffer; OC when
  /// it intersects a live replica. AC wins when both hold.
  std::optional<AllocationVerdict> check_allocation(std::uintptr_t address,
                                                    std::uint64_t size) const;

  /// Compares regions with their shadows. Allocations and deallocations
  /// (including the frees done by FF and AF) classify as RW, everything
  /// else as AW. Diverged regions are resynchronized so the same corruption
  /// is not reported twice.
  DivergenceVerdict check_divergence(
      ActionKind trigger, std::optional<BugKind> bug = std::nullopt);

 private:
  std::span<std::byte> container_;
  std::span<std::byte> buffer_;
  std::span<std::byte> container_shadow_;
  std::span<std::byte> buffer_shadow_;
  std::span<ChunkReplica> replicas_;
  std::size_t replica_count_ = 0;
};

/// Summary of one execution's events under a set of reportable impacts.
struct Verdict {
  std::optional<ImpactEvent> primary;
  std::vector<ImpactEvent> first_of_class;  // in class order AC, OC, AW, RW

  bool is_finding() const { return primary.has_value(); }
};

/// Picks the first event of each allowed class and the primary by severity
/// AC > AW > OC > RW (earliest event breaks ties).
Verdict final_verdict(std::span<const ImpactEvent> events,
                      EnumSet<ImpactClass> allowed);

}  // namespace heapprobe
