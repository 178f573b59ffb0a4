#include "heapprobe/target.hpp"

#include <dlfcn.h>
#include <gnu/libc-version.h>
#include <malloc.h>
#include <unistd.h>

#include <cctype>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <utility>
#include <vector>

#ifndef HEAPPROBE_BUNDLED_DIR
#define HEAPPROBE_BUNDLED_DIR ""
#endif

namespace heapprobe {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kBundledNames[] = {"unsafe-unlink", "checked", "page"};

/// dlsym on a handle also searches the library's dependencies (libc among
/// them); only accept a symbol the library itself defines.
void* own_symbol(void* handle, const char* symbol, const std::string& path) {
  void* sym = dlsym(handle, symbol);
  if (sym == nullptr) return nullptr;
  Dl_info info{};
  if (dladdr(sym, &info) == 0 || info.dli_fname == nullptr) return nullptr;
  std::error_code ec;
  if (!fs::equivalent(fs::path(info.dli_fname), fs::path(path), ec)) return nullptr;
  return sym;
}

std::string executable_dir() {
  std::error_code ec;
  auto exe = fs::read_symlink("/proc/self/exe", ec);
  if (ec) return {};
  return exe.parent_path().string();
}

}  // namespace

TargetSpec TargetSpec::parse(std::string_view text) {
  if (text == "native") return {TargetSource::Native, {}};
  const auto colon = text.find(':');
  if (colon == std::string_view::npos || colon + 1 == text.size()) {
    throw TargetError("bad target '" + std::string(text) +
                      "' (expected native, so:PATH, bundled:NAME or preload:PATH)");
  }
  const auto kind = text.substr(0, colon);
  std::string rest(text.substr(colon + 1));
  if (kind == "so") return {TargetSource::SharedObject, rest};
  if (kind == "preload") return {TargetSource::Preload, rest};
  if (kind == "bundled") {
    for (auto n : kBundledNames) {
      if (n == rest) return {TargetSource::Bundled, rest};
    }
    throw TargetError("unknown bundled allocator '" + rest + "'");
  }
  throw TargetError("bad target kind '" + std::string(kind) + "'");
}

std::string TargetSpec::to_string() const {
  switch (source) {
    case TargetSource::Native: return "native";
    case TargetSource::SharedObject: return "so:" + location;
    case TargetSource::Bundled: return "bundled:" + location;
    case TargetSource::Preload: return "preload:" + location;
  }
  return "native";
}

std::string TargetSpec::id() const {
  if (source == TargetSource::Native) return "native";
  std::string base = source == TargetSource::Bundled
                         ? location
                         : fs::path(location).stem().string();
  for (auto& c : base) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-') c = '-';
  }
  return base;
}

std::string bundled_library_path(std::string_view name) {
  std::string file = "libref_";
  for (char c : name) file += c == '-' ? '_' : c;
  file += ".so";

  std::vector<fs::path> dirs;
  if (const char* env = std::getenv("HEAPPROBE_BUNDLED_DIR"); env && *env) dirs.emplace_back(env);
  if (std::strlen(HEAPPROBE_BUNDLED_DIR) > 0) dirs.emplace_back(HEAPPROBE_BUNDLED_DIR);
  if (auto exe = executable_dir(); !exe.empty()) {
    dirs.emplace_back(fs::path(exe));
    dirs.emplace_back(fs::path(exe) / ".." / "lib");
  }
  for (const auto& dir : dirs) {
    std::error_code ec;
    auto candidate = dir / file;
    if (fs::exists(candidate, ec)) return fs::weakly_canonical(candidate).string();
  }
  throw TargetError("bundled allocator '" + std::string(name) + "' not found (" + file +
                    "); set HEAPPROBE_BUNDLED_DIR");
}

bool native_is_glibc() {
  // A preloaded allocator replaces malloc but not gnu_get_libc_version, so
  // check where malloc actually resolves.
  void* sym = dlsym(RTLD_DEFAULT, "malloc");
  Dl_info info{};
  if (sym == nullptr || dladdr(sym, &info) == 0 || info.dli_fname == nullptr) return false;
  return std::strstr(info.dli_fname, "libc.so") != nullptr && gnu_get_libc_version() != nullptr;
}

std::size_t glibc_chunk_usable_size(std::uintptr_t address) {
  constexpr std::size_t kMmapped = 0x2;
  const auto size_word = reinterpret_cast<const std::size_t*>(address)[-1];
  const auto chunk = size_word & ~std::size_t{7};
  // mmapped chunks have no successor whose prev_size field they can borrow
  const auto overhead = (size_word & kMmapped) != 0 ? 2 * sizeof(std::size_t) : sizeof(std::size_t);
  return chunk >= overhead ? chunk - overhead : 0;
}

AllocatorTarget AllocatorTarget::load(const TargetSpec& spec) {
  AllocatorTarget t;
  t.spec_ = spec;
  switch (spec.source) {
    case TargetSource::Native:
      t.malloc_fn_ = &::malloc;
      t.free_fn_ = &::free;
      if (native_is_glibc()) {
        t.usable_mode_ = UsableSizeMode::GlibcSizeWord;
      } else if (auto* fn = dlsym(RTLD_DEFAULT, "malloc_usable_size")) {
        t.usable_fn_ = reinterpret_cast<UsableFn>(fn);
        t.usable_mode_ = UsableSizeMode::Api;
      }
      return t;
    case TargetSource::Bundled:
      t.library_path_ = bundled_library_path(spec.location);
      break;
    case TargetSource::SharedObject:
    case TargetSource::Preload: {
      std::error_code ec;
      auto path = fs::weakly_canonical(spec.location, ec);
      if (ec || !fs::exists(path)) throw TargetError("no such library '" + spec.location + "'");
      t.library_path_ = path.string();
      break;
    }
  }

  if (spec.source == TargetSource::Preload) {
    t.handle_ = dlopen(t.library_path_.c_str(), RTLD_NOW | RTLD_NOLOAD);
    if (t.handle_ == nullptr) {
      throw TargetError("preload target '" + t.library_path_ +
                        "' is not preloaded into this process");
    }
    t.malloc_fn_ = reinterpret_cast<MallocFn>(dlsym(RTLD_DEFAULT, "malloc"));
    t.free_fn_ = reinterpret_cast<FreeFn>(dlsym(RTLD_DEFAULT, "free"));
  } else {
    t.handle_ = dlopen(t.library_path_.c_str(), RTLD_NOW | RTLD_LOCAL);
    if (t.handle_ == nullptr) {
      const char* err = dlerror();
      throw TargetError("cannot load '" + t.library_path_ + "': " + (err ? err : "?"));
    }
    t.malloc_fn_ = reinterpret_cast<MallocFn>(own_symbol(t.handle_, "malloc", t.library_path_));
    t.free_fn_ = reinterpret_cast<FreeFn>(own_symbol(t.handle_, "free", t.library_path_));
  }
  if (t.malloc_fn_ == nullptr || t.free_fn_ == nullptr) {
    throw TargetError("'" + t.library_path_ + "' does not export malloc and free");
  }
  if (auto* fn = own_symbol(t.handle_, "malloc_usable_size", t.library_path_)) {
    t.usable_fn_ = reinterpret_cast<UsableFn>(fn);
    t.usable_mode_ = UsableSizeMode::Api;
  }
  t.reset_fn_ = reinterpret_cast<ResetFn>(own_symbol(t.handle_, "heapprobe_ref_reset", t.library_path_));
  return t;
}

AllocatorTarget::AllocatorTarget(AllocatorTarget&& other) noexcept { *this = std::move(other); }

AllocatorTarget& AllocatorTarget::operator=(AllocatorTarget&& other) noexcept {
  if (this != &other) {
    if (handle_ != nullptr) dlclose(handle_);
    spec_ = std::move(other.spec_);
    library_path_ = std::move(other.library_path_);
    handle_ = std::exchange(other.handle_, nullptr);
    malloc_fn_ = other.malloc_fn_;
    free_fn_ = other.free_fn_;
    usable_fn_ = other.usable_fn_;
    reset_fn_ = other.reset_fn_;
    usable_mode_ = other.usable_mode_;
  }
  return *this;
}

AllocatorTarget::~AllocatorTarget() {
  if (handle_ != nullptr) dlclose(handle_);
}

std::size_t AllocatorTarget::usable_size(std::uintptr_t address, std::size_t request) const {
  switch (usable_mode_) {
    case UsableSizeMode::Api: return usable_fn_(reinterpret_cast<void*>(address));
    case UsableSizeMode::GlibcSizeWord: return glibc_chunk_usable_size(address);
    case UsableSizeMode::Shim: break;
  }
  return shim_usable_size(request);
}

}  // namespace heapprobe
