#pragma once

// Action builders and small helpers shared by the test suites.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include "heapprobe/codec.hpp"
#include "heapprobe/model_spec.hpp"
#include "heapprobe/runner.hpp"

namespace heapprobe::test {

inline Value constant(std::uint8_t index) {
  Value v;
  v.strategy = Strategy::I1;
  v.arg = index;
  return v;
}

/// I3 value that materializes exactly `n` (n in [1, 2^20]).
inline Value exact_size(std::uint64_t n) {
  for (int g = 0; g < kSizeGroupCount; ++g) {
    const auto group = size_group(g);
    if (n >= group.lo && n < group.hi) {
      Value v;
      v.strategy = Strategy::I3;
      v.arg = static_cast<std::uint8_t>(g);
      v.offset = static_cast<std::uint16_t>(n - group.lo);
      return v;
    }
  }
  return constant(0);
}

inline Value address(Strategy s, std::int32_t shift = 0) {
  Value v;
  v.strategy = s;
  if (shift != 0) v.transform = {TransformKind::Shift, 1, shift};
  return v;
}

inline Value chunk_size(Strategy s, std::uint8_t chunk, std::uint8_t mult = 1, std::int32_t offset = 0) {
  Value v;
  v.strategy = s;
  v.arg = chunk;
  if (mult != 1 || offset != 0) v.transform = {TransformKind::Linear, mult, offset};
  return v;
}

inline Action allocate(Value size) {
  Action a;
  a.kind = ActionKind::Allocate;
  a.value_count = 1;
  a.values[0] = size;
  return a;
}

inline Action allocate(std::uint64_t n) { return allocate(exact_size(n)); }

inline Action deallocate(std::uint8_t chunk) {
  Action a;
  a.kind = ActionKind::Deallocate;
  a.chunk = chunk;
  return a;
}

inline Action heap_write(std::uint8_t chunk, std::uint8_t slot, Value v) {
  Action a;
  a.kind = ActionKind::HeapWrite;
  a.chunk = chunk;
  a.slot = slot;
  a.value_count = 1;
  a.values[0] = v;
  return a;
}

inline Action buffer_write(std::uint16_t offset, Value v) {
  Action a;
  a.kind = ActionKind::BufferWrite;
  a.buffer_offset = offset;
  a.value_count = 1;
  a.values[0] = v;
  return a;
}

inline Action bug(BugKind kind, std::uint8_t chunk = 0) {
  Action a;
  a.kind = ActionKind::BugInvoke;
  a.bug = kind;
  a.chunk = chunk;
  return a;
}

inline Action overflow(std::uint8_t chunk, std::initializer_list<Value> words) {
  auto a = bug(BugKind::Overflow, chunk);
  for (const auto& w : words) a.values[a.value_count++] = w;
  return a;
}

inline Action write_after_free(std::uint8_t chunk, std::uint8_t slot, Value v) {
  auto a = bug(BugKind::WriteAfterFree, chunk);
  a.slot = slot;
  a.value_count = 1;
  a.values[0] = v;
  return a;
}

inline Action arbitrary_free(Value v) {
  auto a = bug(BugKind::ArbitraryFree);
  a.value_count = 1;
  a.values[0] = v;
  return a;
}

inline Action off_by_one(std::uint8_t chunk, Value v) {
  auto a = bug(BugKind::OffByOne, chunk);
  a.value_count = 1;
  a.values[0] = v;
  return a;
}

inline ModelSpec spec_without_bugs() {
  ModelSpec s;
  s.bugs = {};
  s.actions.erase(ActionKind::BugInvoke);
  return s;
}

inline ModelSpec spec_with_bugs(std::initializer_list<BugKind> bugs) {
  ModelSpec s;
  s.bugs = {};
  for (auto b : bugs) s.bugs.insert(b);
  return s;
}

/// The fake-chunk unlink script against the container's first record.
/// With `modern` the forward and back pointers point into the container
/// (the layout that passes a double-link check); otherwise the back pointer
/// targets the buffer, which a checked allocator rejects.
inline std::vector<Action> unlink_script(bool modern) {
  return {
      allocate(0x80),
      allocate(0xf8),
      heap_write(0, 1, constant(8)),                        // fake size 0x80
      heap_write(0, 2, address(Strategy::P4, -24)),         // fd
      heap_write(0, 3, modern ? address(Strategy::P4, -16)  // bk
                              : address(Strategy::P2)),
      heap_write(0, 15, constant(8)),                       // next prev_size 0x80
      overflow(0, {exact_size(0x100)}),                     // clear PREV_INUSE
      deallocate(1),
  };
}

inline RunnerConfig runner_config(const std::string& target, const ModelSpec& spec) {
  RunnerConfig rc;
  rc.target = TargetSpec::parse(target);
  rc.spec = spec;
  return rc;
}

/// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "heapprobe-test-XXXXXX").string();
    path_ = ::mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace heapprobe::test
