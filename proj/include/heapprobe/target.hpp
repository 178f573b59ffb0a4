#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

namespace heapprobe {

class TargetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TargetSource { Native, SharedObject, Bundled, Preload };

/// Names an allocator under test. Textual forms: `native`, `so:PATH`,
/// `bundled:NAME`, `preload:PATH`.
struct TargetSpec {
  TargetSource source = TargetSource::Native;
  std::string location;  // path or bundled name; empty for native

  static TargetSpec parse(std::string_view text);
  std::string to_string() const;
  /// File-name-safe identifier.
  std::string id() const;

  bool operator==(const TargetSpec&) const = default;
};

enum class UsableSizeMode {
  Api,            // exported malloc_usable_size
  GlibcSizeWord,  // read the in-place size word of a glibc chunk
  Shim,           // request size rounded up to a word
};

/// Resolved path of a bundled reference allocator (`unsafe-unlink`,
/// `checked`, `page`). Searches $HEAPPROBE_BUNDLED_DIR, then the build tree.
std::string bundled_library_path(std::string_view name);

/// True when the process allocator is glibc's ptmalloc.
bool native_is_glibc();

/// Shim rule for targets without a usable-size entry point.
constexpr std::size_t shim_usable_size(std::size_t request) {
  return (request + 7) & ~std::size_t{7};
}

/// Usable size of a live glibc chunk computed from its size word, which
/// stays meaningful when the next chunk's header has been corrupted.
std::size_t glibc_chunk_usable_size(std::uintptr_t address);

/// The allocator a worker drives. Bound to one worker; not thread-safe.
class AllocatorTarget {
 public:
  using MallocFn = void* (*)(std::size_t);
  using FreeFn = void (*)(void*);
  using UsableFn = std::size_t (*)(void*);
  using ResetFn = void (*)();

  static AllocatorTarget load(const TargetSpec& spec);

  AllocatorTarget(AllocatorTarget&&) noexcept;
  AllocatorTarget& operator=(AllocatorTarget&&) noexcept;
  ~AllocatorTarget();

  const TargetSpec& spec() const { return spec_; }
  std::string id() const { return spec_.id(); }
  bool has_usable_size() const { return usable_fn_ != nullptr; }
  UsableSizeMode usable_mode() const { return usable_mode_; }
  /// Shared object backing the target; empty for the native allocator.
  const std::string& library_path() const { return library_path_; }

  /// Zero means the allocation failed.
  std::uintptr_t allocate(std::size_t size) const {
    return reinterpret_cast<std::uintptr_t>(malloc_fn_(size));
  }
  void deallocate(std::uintptr_t address) const {
    free_fn_(reinterpret_cast<void*>(address));
  }
  std::size_t usable_size(std::uintptr_t address, std::size_t request) const;

  /// Bundled allocators export a reset hook so in-process tests can start
  /// from a pristine heap. No-op elsewhere.
  bool can_reset() const { return reset_fn_ != nullptr; }
  void reset() const {
    if (reset_fn_ != nullptr) reset_fn_();
  }

 private:
  AllocatorTarget() = default;

  TargetSpec spec_;
  std::string library_path_;
  void* handle_ = nullptr;
  MallocFn malloc_fn_ = nullptr;
  FreeFn free_fn_ = nullptr;
  UsableFn usable_fn_ = nullptr;
  ResetFn reset_fn_ = nullptr;
  UsableSizeMode usable_mode_ = UsableSizeMode::Shim;
};

}  // namespace heapprobe
