#include "heapprobe/engine.hpp"

#include <sys/mman.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <new>

namespace heapprobe {

namespace {

constexpr std::size_t kPage = 4096;
constexpr std::size_t kMaxEvents = kMaxActions * 3;

// Engine regions are placed in [16 TiB, 80 TiB), far from where the kernel
// puts brk heaps, libraries, and anonymous mmaps.
constexpr std::uintptr_t kPlacementLo = std::uintptr_t{1} << 44;
constexpr std::uintptr_t kPlacementPages = (std::uintptr_t{1} << 46) / kPage;

Word splitmix64(Word x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t round_pages(std::size_t bytes) { return (bytes + kPage - 1) & ~(kPage - 1); }

/// Maps `bytes` (page-rounded) of read-write memory between two PROT_NONE
/// guard pages at a salt-derived address. Returns the usable start.
std::byte* map_guarded(std::size_t bytes, Word salt, Word region) {
  const auto inner = round_pages(bytes);
  const auto total = inner + 2 * kPage;
  void* mapping = MAP_FAILED;
  for (Word attempt = 0; attempt < 16 && mapping == MAP_FAILED; ++attempt) {
    const auto page = splitmix64(salt ^ splitmix64(region * 131 + attempt)) % kPlacementPages;
    auto* want = reinterpret_cast<void*>(kPlacementLo + page * kPage);
    void* got = mmap(want, total, PROT_NONE,
                     MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE | MAP_FIXED_NOREPLACE, -1, 0);
    if (got == want) {
      mapping = got;
    } else if (got != MAP_FAILED) {
      munmap(got, total);
    }
  }
  if (mapping == MAP_FAILED) {
    mapping = mmap(nullptr, total, PROT_NONE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (mapping == MAP_FAILED) throw std::bad_alloc();
  }
  auto* start = static_cast<std::byte*>(mapping) + kPage;
  if (mprotect(start, inner, PROT_READ | PROT_WRITE) != 0) {
    munmap(mapping, total);
    throw std::bad_alloc();
  }
  return start;
}

void unmap_guarded(std::byte* start, std::size_t bytes) {
  if (start != nullptr) munmap(start - kPage, round_pages(bytes) + 2 * kPage);
}

Word transform(Word x, const Transform& t) {
  const auto offset = static_cast<Word>(static_cast<std::int64_t>(t.offset));
  switch (t.kind) {
    case TransformKind::None: return x;
    case TransformKind::Linear: return x * t.mult + offset;
    case TransformKind::Shift: return x + offset;
  }
  return x;
}

constexpr Word align_down(Word x) { return x & ~Word{kWordSize - 1}; }

}  // namespace

struct Execution::State {
  std::array<std::byte, kContainerBytes> container_shadow;
  std::array<std::byte, kBufferSize> buffer_shadow;
  std::array<ChunkReplica, kMaxActions> replicas;
  std::array<Action, kMaxActions> actions;
  std::array<StepRecord, kMaxActions> log;
  std::array<ImpactEvent, kMaxEvents> events;
  std::array<std::uint64_t, kMaxExplicitSizes> explicit_sizes;
  ShadowState shadow;
  std::size_t explicit_count = 0;
  std::size_t action_count = 0;
  std::size_t next = 0;
  std::size_t event_count = 0;
  std::size_t records = 0;
  bool has_committed = false;
  BugKind committed = BugKind::Overflow;
  KnowledgeSet knowledge;
};

std::optional<std::uintptr_t> ExecutionContext::role_address(Role role) const {
  switch (role) {
    case Role::Heap:
      if (records == 0 || container == nullptr) return std::nullopt;
      return container->base[records - 1];
    case Role::Buffer: return buffer_base;
    case Role::Container: return container_base;
  }
  return std::nullopt;
}

Word materialize_value(const Value& v, const ExecutionContext& ctx) {
  switch (v.strategy) {
    case Strategy::I1: return kConstantPool[v.arg % kConstantPool.size()];
    case Strategy::I2: {
      const auto lhs = ctx.role_address(v.lhs);
      const auto rhs = ctx.role_address(v.rhs);
      if (!lhs || !rhs) return 0;
      return align_down(transform(*lhs - *rhs, v.transform));
    }
    case Strategy::I3: {
      if (v.arg == kExplicitSizePool) {
        if (ctx.explicit_sizes.empty()) return 0;
        return ctx.explicit_sizes[v.offset % ctx.explicit_sizes.size()];
      }
      const auto group = size_group(v.arg);
      return group.lo + v.offset % (group.hi - group.lo);
    }
    case Strategy::I4:
    case Strategy::I5: {
      if (ctx.records == 0 || ctx.container == nullptr) return 0;
      const auto j = v.arg % ctx.records;
      const auto x = v.strategy == Strategy::I4 ? ctx.container->request[j] : ctx.container->usable[j];
      return transform(x, v.transform);
    }
    case Strategy::P1: return 0;
    case Strategy::P2: return align_down(transform(ctx.buffer_base, v.transform));
    case Strategy::P3: {
      const auto heap = ctx.role_address(Role::Heap);
      if (!heap) return 0;
      return align_down(transform(*heap, v.transform));
    }
    case Strategy::P4: return align_down(transform(ctx.container_base, v.transform));
  }
  return 0;
}

Execution::Execution(const AllocatorTarget& target, const ModelSpec& spec, Word salt,
                     ExecOptions options)
    : target_(&target), options_(options) {
  container_map_ = map_guarded(kContainerBytes, salt, 1);
  buffer_map_ = map_guarded(kBufferSize, salt, 2);
  state_map_bytes_ = sizeof(State);
  state_map_ = map_guarded(state_map_bytes_, salt, 3);
  state_ = new (state_map_) State();

  const auto explicit_count = std::min(spec.sizes.size(), kMaxExplicitSizes);
  std::copy_n(spec.sizes.begin(), explicit_count, state_->explicit_sizes.begin());
  state_->explicit_count = explicit_count;
  state_->knowledge = spec.knowledge;

  state_->shadow = ShadowState(std::span(container_map_, kContainerBytes),
                               std::span(buffer_map_, kBufferSize),
                               std::span(state_->container_shadow),
                               std::span(state_->buffer_shadow),
                               std::span(state_->replicas));
  state_->shadow.sync_all();
}

Execution::~Execution() {
  if (state_ != nullptr) state_->~State();
  unmap_guarded(state_map_, state_map_bytes_);
  unmap_guarded(buffer_map_, kBufferSize);
  unmap_guarded(container_map_, kContainerBytes);
}

void Execution::load(std::span<const Action> actions) {
  const auto n = std::min(actions.size(), kMaxActions);
  std::copy_n(actions.begin(), n, state_->actions.begin());
  state_->action_count = n;
  state_->next = 0;
}

bool Execution::step() {
  auto& s = *state_;
  if (s.next >= s.action_count) return false;
  const auto index = s.next++;
  const Action& action = s.actions[index];
  s.log[index] = StepRecord{StepStatus::Skipped, static_cast<std::uint16_t>(s.records)};
  apply(action, index);
  checkpoint(action, index);
  return true;
}

void Execution::checkpoint(const Action& action, std::size_t index) {
  const auto bug = action.kind == ActionKind::BugInvoke ? std::optional(action.bug) : std::nullopt;
  const auto verdict = state_->shadow.check_divergence(action.kind, bug);
  if (verdict.container) emit(make_event(index, *verdict.container, Site::Container, action.kind));
  if (verdict.buffer) emit(make_event(index, *verdict.buffer, Site::Buffer, action.kind));
}

ImpactEvent Execution::make_event(std::size_t index, ImpactClass impact, Site site,
                                  ActionKind trigger) const {
  ImpactEvent e;
  e.action_index = static_cast<std::uint16_t>(index);
  e.impact = impact;
  e.site = site;
  e.trigger = trigger;
  e.has_bug = state_->has_committed;
  e.bug = state_->committed;
  return e;
}

void Execution::emit(const ImpactEvent& event) {
  auto& s = *state_;
  if (s.event_count >= s.events.size()) return;
  s.events[s.event_count++] = event;
  if (options_.on_event != nullptr) options_.on_event(options_.user, event);
}

void Execution::write_word(std::uintptr_t address, Word value, ActionKind kind) {
  if (options_.on_write != nullptr) options_.on_write(options_.user, address, kWordSize, kind);
  std::memcpy(reinterpret_cast<void*>(address), &value, sizeof value);
}

void Execution::write_byte(std::uintptr_t address, std::uint8_t value, ActionKind kind) {
  if (options_.on_write != nullptr) options_.on_write(options_.user, address, 1, kind);
  *reinterpret_cast<volatile std::uint8_t*>(address) = value;
}

std::optional<std::size_t> Execution::pick(std::uint8_t chunk) const {
  if (state_->records == 0) return std::nullopt;
  return chunk % state_->records;
}

void Execution::mark(std::size_t index, StepStatus status) { state_->log[index].status = status; }

void Execution::store_container(Word* field, Word value) {
  *field = value;
  const auto offset = reinterpret_cast<std::byte*>(field) - container_map_;
  state_->shadow.sync_container(static_cast<std::size_t>(offset), sizeof(Word));
}

ContainerLayout& Execution::layout() const {
  return *reinterpret_cast<ContainerLayout*>(container_map_);
}

void Execution::apply(const Action& action, std::size_t index) {
  switch (action.kind) {
    case ActionKind::Allocate: apply_allocate(action, index); break;
    case ActionKind::Deallocate: apply_deallocate(action, index); break;
    case ActionKind::HeapWrite: apply_heap_write(action, index); break;
    case ActionKind::BufferWrite: apply_buffer_write(action, index); break;
    case ActionKind::BugInvoke: apply_bug(action, index); break;
  }
}

void Execution::apply_allocate(const Action& action, std::size_t index) {
  auto& s = *state_;
  const auto size = materialize_value(action.values[0], context());
  const auto address = target_->allocate(size);
  if (address == 0) {
    mark(index, StepStatus::Failed);
    return;
  }
  mark(index, StepStatus::Executed);
  if (const auto hit = s.shadow.check_allocation(address, size)) {
    emit(make_event(index, hit->impact, hit->site, ActionKind::Allocate));
  }
  // Divergence caused by the allocator call itself must be seen before the
  // engine writes the new record over it.
  checkpoint(action, index);
  if (s.records >= kMaxActions) return;

  auto& c = layout();
  const auto j = s.records;
  store_container(&c.base[j], address);
  store_container(&c.request[j], size);
  store_container(&c.usable[j], target_->usable_size(address, size));
  store_container(&c.status[j], kStatusLive);
  s.records++;
  s.shadow.record_allocation(address, size);

  if (c.usable[j] < size) {
    constexpr char msg[] = "heapprobe: usable size below request\n";
    [[maybe_unused]] auto n = ::write(STDERR_FILENO, msg, sizeof msg - 1);
  }
}

void Execution::apply_deallocate(const Action& action, std::size_t index) {
  const auto j = pick(action.chunk);
  auto& c = layout();
  if (!j || c.status[*j] != kStatusLive) return;
  target_->deallocate(c.base[*j]);
  mark(index, StepStatus::Executed);
  checkpoint(action, index);
  store_container(&c.status[*j], kStatusFreed);
  state_->shadow.retire(*j);
}

namespace {

/// Offset of a word slot inside a span of `usable` bytes, if it fits.
std::optional<Word> slot_offset(std::uint8_t slot, Word usable) {
  if (slot < kSlotCount / 2) {
    const Word offset = Word{slot} * kWordSize;
    if (offset + kWordSize > usable) return std::nullopt;
    return offset;
  }
  const Word back = (kSlotCount - slot) * kWordSize;
  if (back > usable) return std::nullopt;
  return usable - back;
}

}  // namespace

void Execution::apply_heap_write(const Action& action, std::size_t index) {
  const auto j = pick(action.chunk);
  const auto& c = layout();
  if (!j || c.status[*j] != kStatusLive) return;
  const auto offset = slot_offset(action.slot, c.usable[*j]);
  if (!offset) return;
  const auto value = materialize_value(action.values[0], context());
  write_word(c.base[*j] + *offset, value, ActionKind::HeapWrite);
  mark(index, StepStatus::Executed);
}

void Execution::apply_buffer_write(const Action& action, std::size_t index) {
  const auto value = materialize_value(action.values[0], context());
  const auto offset = std::size_t{action.buffer_offset} % (kBufferSize - kWordSize);
  write_word(reinterpret_cast<std::uintptr_t>(buffer_map_) + offset, value,
             ActionKind::BufferWrite);
  state_->shadow.sync_buffer(offset, kWordSize);
  mark(index, StepStatus::Executed);
}

void Execution::apply_bug(const Action& action, std::size_t index) {
  auto& s = *state_;
  if (s.has_committed && s.committed != action.bug) return;

  const auto& c = layout();
  const auto j = pick(action.chunk);
  const auto live = j && c.status[*j] == kStatusLive;
  const auto freed = j && c.status[*j] == kStatusFreed;
  bool executed = false;

  switch (action.bug) {
    case BugKind::Overflow:
      if (!live) break;
      for (std::size_t i = 0; i < action.value_count; ++i) {
        const auto value = materialize_value(action.values[i], context());
        write_word(c.base[*j] + c.usable[*j] + i * kWordSize, value, ActionKind::BugInvoke);
      }
      executed = true;
      break;
    case BugKind::OffByOne:
      if (!live) break;
      write_byte(c.base[*j] + c.usable[*j],
                 static_cast<std::uint8_t>(materialize_value(action.values[0], context())),
                 ActionKind::BugInvoke);
      executed = true;
      break;
    case BugKind::OffByOneNull:
      if (!live) break;
      write_byte(c.base[*j] + c.usable[*j], 0, ActionKind::BugInvoke);
      executed = true;
      break;
    case BugKind::WriteAfterFree: {
      if (!freed) break;
      const auto offset = slot_offset(action.slot, c.usable[*j]);
      if (!offset) break;
      write_word(c.base[*j] + *offset, materialize_value(action.values[0], context()),
                 ActionKind::BugInvoke);
      executed = true;
      break;
    }
    case BugKind::DoubleFree:
      if (!freed) break;
      commit(action.bug);
      target_->deallocate(c.base[*j]);
      executed = true;
      break;
    case BugKind::ArbitraryFree:
      commit(action.bug);
      target_->deallocate(materialize_value(action.values[0], context()));
      executed = true;
      break;
  }
  if (executed) {
    commit(action.bug);
    mark(index, StepStatus::Executed);
  }
}

void Execution::commit(BugKind bug) {
  state_->has_committed = true;
  state_->committed = bug;
}

std::span<const ImpactEvent> Execution::events() const {
  return std::span(state_->events).first(state_->event_count);
}

std::span<const StepRecord> Execution::log() const {
  return std::span(state_->log).first(state_->next);
}

std::optional<BugKind> Execution::committed_bug() const {
  if (!state_->has_committed) return std::nullopt;
  return state_->committed;
}

const ContainerLayout& Execution::container() const { return layout(); }
std::size_t Execution::records() const { return state_->records; }
std::uintptr_t Execution::container_base() const {
  return reinterpret_cast<std::uintptr_t>(container_map_);
}
std::uintptr_t Execution::buffer_base() const {
  return reinterpret_cast<std::uintptr_t>(buffer_map_);
}
std::span<std::byte> Execution::buffer() { return {buffer_map_, kBufferSize}; }
ShadowState& Execution::shadow() { return state_->shadow; }

ExecutionContext Execution::context() const {
  ExecutionContext ctx;
  ctx.container = &layout();
  ctx.records = state_->records;
  ctx.buffer_base = buffer_base();
  ctx.container_base = container_base();
  ctx.knowledge = state_->knowledge;
  ctx.explicit_sizes = std::span(state_->explicit_sizes).first(state_->explicit_count);
  return ctx;
}

std::string_view name(OutcomeKind kind) {
  switch (kind) {
    case OutcomeKind::NoImpact: return "no-impact";
    case OutcomeKind::Finding: return "finding";
    case OutcomeKind::Crash: return "crash";
    case OutcomeKind::Timeout: return "timeout";
  }
  return "?";
}

std::optional<OutcomeKind> parse_outcome(std::string_view text) {
  for (auto k : {OutcomeKind::NoImpact, OutcomeKind::Finding, OutcomeKind::Crash,
                 OutcomeKind::Timeout}) {
    if (name(k) == text) return k;
  }
  return std::nullopt;
}

ExecutionOutcome execute(const TraceProgram& program, const AllocatorTarget& target,
                         const ModelSpec& spec, Word salt, const ExecOptions& options) {
  Execution run(target, spec, salt, options);
  run.load(program.actions);
  run.run();
  ExecutionOutcome out;
  out.events.assign(run.events().begin(), run.events().end());
  out.log.assign(run.log().begin(), run.log().end());
  out.verdict = final_verdict(out.events, spec.impacts);
  out.kind = out.verdict.is_finding() ? OutcomeKind::Finding : OutcomeKind::NoImpact;
  return out;
}

}  // namespace heapprobe
