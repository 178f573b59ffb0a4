#include "heapprobe/detector.hpp"

#include <algorithm>
#include <cstring>

namespace heapprobe {

namespace {

Interval interval_of(std::span<const std::byte> region) {
  const auto lo = reinterpret_cast<std::uintptr_t>(region.data());
  return {lo, lo + region.size()};
}

Interval chunk_interval(std::uintptr_t address, std::uint64_t size) {
  // saturate instead of wrapping for absurd sizes near the top of memory
  const auto hi = size > UINTPTR_MAX - address ? UINTPTR_MAX : address + size;
  return {address, hi};
}

bool diverged(std::span<std::byte> original, std::span<std::byte> shadow) {
  return std::memcmp(original.data(), shadow.data(), original.size()) != 0;
}

}  // namespace

ShadowState::ShadowState(std::span<std::byte> container, std::span<std::byte> buffer,
                         std::span<std::byte> container_shadow,
                         std::span<std::byte> buffer_shadow,
                         std::span<ChunkReplica> replica_storage)
    : container_(container),
      buffer_(buffer),
      container_shadow_(container_shadow.first(container.size())),
      buffer_shadow_(buffer_shadow.first(buffer.size())),
      replicas_(replica_storage) {}

void ShadowState::sync_all() {
  std::memcpy(container_shadow_.data(), container_.data(), container_.size());
  std::memcpy(buffer_shadow_.data(), buffer_.data(), buffer_.size());
}

void ShadowState::sync_container(std::size_t offset, std::size_t length) {
  std::memcpy(container_shadow_.data() + offset, container_.data() + offset, length);
}

void ShadowState::sync_buffer(std::size_t offset, std::size_t length) {
  std::memcpy(buffer_shadow_.data() + offset, buffer_.data() + offset, length);
}

void ShadowState::record_allocation(std::uintptr_t address, std::uint64_t size) {
  if (replica_count_ >= replicas_.size()) return;
  replicas_[replica_count_++] = ChunkReplica{address, size, true};
}

void ShadowState::retire(std::size_t index) {
  if (index < replica_count_) replicas_[index].live = false;
}

Interval ShadowState::container_interval() const { return interval_of(container_); }
Interval ShadowState::buffer_interval() const { return interval_of(buffer_); }

std::optional<AllocationVerdict> ShadowState::check_allocation(std::uintptr_t address,
                                                               std::uint64_t size) const {
  const auto chunk = chunk_interval(address, size);
  if (chunk.intersects(container_interval())) {
    return AllocationVerdict{ImpactClass::ArbitraryChunk, Site::Container};
  }
  if (chunk.intersects(buffer_interval())) {
    return AllocationVerdict{ImpactClass::ArbitraryChunk, Site::Buffer};
  }
  for (const auto& r : replicas()) {
    if (r.live && chunk.intersects(chunk_interval(r.address, r.size))) {
      return AllocationVerdict{ImpactClass::OverlappingChunk, Site::None};
    }
  }
  return std::nullopt;
}

DivergenceVerdict ShadowState::check_divergence(ActionKind trigger, std::optional<BugKind> bug) {
  const bool restricted =
      trigger == ActionKind::Allocate || trigger == ActionKind::Deallocate ||
      (trigger == ActionKind::BugInvoke && bug &&
       (*bug == BugKind::DoubleFree || *bug == BugKind::ArbitraryFree));
  const auto impact = restricted ? ImpactClass::RestrictedWrite : ImpactClass::ArbitraryWrite;

  DivergenceVerdict verdict;
  if (diverged(container_, container_shadow_)) {
    verdict.container = impact;
    sync_container(0, container_.size());
  }
  if (diverged(buffer_, buffer_shadow_)) {
    verdict.buffer = impact;
    sync_buffer(0, buffer_.size());
  }
  return verdict;
}

Verdict final_verdict(std::span<const ImpactEvent> events, EnumSet<ImpactClass> allowed) {
  Verdict v;
  for (auto cls : kAllImpacts) {
    if (!allowed.contains(cls)) continue;
    const auto it = std::find_if(events.begin(), events.end(),
                                 [&](const ImpactEvent& e) { return e.impact == cls; });
    if (it != events.end()) v.first_of_class.push_back(*it);
  }
  for (const auto& e : v.first_of_class) {
    if (!v.primary || severity(e.impact) > severity(v.primary->impact)) v.primary = e;
  }
  return v;
}

}  // namespace heapprobe
