#include "heapprobe/poc.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

extern char** environ;

namespace heapprobe {

namespace fs = std::filesystem;

namespace {

std::string literal(std::uint64_t v) {
  if (v < (std::uint64_t{1} << 31)) return std::to_string(v);
  std::ostringstream ss;
  ss << "UINT64_C(0x" << std::hex << v << ")";
  return ss.str();
}

std::string with_transform(const std::string& x, const Transform& t) {
  std::string out = x;
  if (t.kind == TransformKind::Linear && t.mult != 1) out += " * " + std::to_string(t.mult);
  if (t.kind != TransformKind::None && t.offset != 0) {
    out += t.offset < 0 ? " - " + std::to_string(-static_cast<std::int64_t>(t.offset))
                        : " + " + std::to_string(t.offset);
  }
  return out;
}

std::string address_of(Role role, std::size_t records) {
  switch (role) {
    case Role::Heap: return "ADDR(p[" + std::to_string(records - 1) + "])";
    case Role::Buffer: return "ADDR(buf)";
    case Role::Container: return "ADDR(&container)";
  }
  return "0";
}

struct Renderer {
  const ModelSpec& spec;
  std::size_t records = 0;

  std::string value(const Value& v) const {
    switch (v.strategy) {
      case Strategy::I1: return literal(kConstantPool[v.arg % kConstantPool.size()]);
      case Strategy::I2:
        if (records == 0 && (v.lhs == Role::Heap || v.rhs == Role::Heap)) return "0";
        return "ALIGN8(" +
               with_transform("(" + address_of(v.lhs, records) + " - " + address_of(v.rhs, records) + ")",
                              v.transform) +
               ")";
      case Strategy::I3: {
        if (v.arg == kExplicitSizePool) {
          const auto n = std::min(spec.sizes.size(), kMaxExplicitSizes);
          return n == 0 ? "0" : literal(spec.sizes[v.offset % n]);
        }
        const auto g = size_group(v.arg);
        return literal(g.lo + v.offset % (g.hi - g.lo));
      }
      case Strategy::I4:
      case Strategy::I5: {
        if (records == 0) return "0";
        const auto j = std::to_string(v.arg % records);
        return with_transform((v.strategy == Strategy::I4 ? "size[" : "usable[") + j + "]", v.transform);
      }
      case Strategy::P1: return "0";
      case Strategy::P2: return "ALIGN8(" + with_transform("ADDR(buf)", v.transform) + ")";
      case Strategy::P3:
        if (records == 0) return "0";
        return "ALIGN8(" + with_transform(address_of(Role::Heap, records), v.transform) + ")";
      case Strategy::P4: return "ALIGN8(" + with_transform("ADDR(&container)", v.transform) + ")";
    }
    return "0";
  }
};

bool is_literal(const std::string& expr) {
  return !expr.empty() && expr.find_first_not_of("0123456789") == std::string::npos;
}

std::string_view long_name(ImpactClass c) {
  switch (c) {
    case ImpactClass::ArbitraryChunk: return "arbitrary chunk";
    case ImpactClass::OverlappingChunk: return "overlapping chunk";
    case ImpactClass::ArbitraryWrite: return "arbitrary write";
    case ImpactClass::RestrictedWrite: return "restricted write";
  }
  return "?";
}

std::string_view vulnerability(BugKind b) {
  switch (b) {
    case BugKind::Overflow: return "heap overflow";
    case BugKind::WriteAfterFree: return "write after free";
    case BugKind::ArbitraryFree: return "arbitrary free";
    case BugKind::DoubleFree: return "double free";
    case BugKind::OffByOne: return "off-by-one";
    case BugKind::OffByOneNull: return "off-by-one NUL";
  }
  return "?";
}

std::string slot_offset(std::uint8_t slot, const std::string& j) {
  if (slot < kSlotCount / 2) return std::to_string(slot * kWordSize);
  return "usable[" + j + "] - " + std::to_string((kSlotCount - slot) * kWordSize);
}

std::string region(Site site) { return site == Site::Buffer ? "buf" : "&container"; }

}  // namespace

std::string trace_hash(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

PocTarget resolve_poc_target(const TargetSpec& spec) {
  PocTarget t;
  t.spec = spec;
  if (spec.source == TargetSource::Native) {
    const auto loaded = AllocatorTarget::load(spec);
    t.usable = loaded.usable_mode();
    return t;
  }
  if (spec.source == TargetSource::Preload) {
    t.library = fs::absolute(spec.location).string();
    t.usable = UsableSizeMode::Api;
    return t;
  }
  const auto loaded = AllocatorTarget::load(spec);
  t.library = loaded.library_path();
  t.usable = loaded.usable_mode();
  return t;
}

PocProgram emit_poc(const TraceProgram& program, const ImpactReport& report, const PocTarget& target) {
  if (!report.primary) throw PocError("report has no impact to reproduce");
  const auto& primary = *report.primary;
  const std::size_t trigger = primary.action_index;
  if (trigger >= program.actions.size() || trigger >= report.log.size()) {
    throw PocError("report log does not cover the impact's action");
  }
  const ModelSpec spec = report.spec.empty() ? ModelSpec{} : parse_inline_spec(report.spec);
  const bool dynamic = target.spec.source == TargetSource::Bundled ||
                       target.spec.source == TargetSource::SharedObject;
  const bool memory_check = primary.impact == ImpactClass::ArbitraryWrite ||
                            primary.impact == ImpactClass::RestrictedWrite;
  const bool overlap_check = primary.impact == ImpactClass::OverlappingChunk;

  std::ostringstream body;
  bool uses_n = false;
  bool uses_chunk = false;
  bool uses_store64 = false;
  bool uses_store8 = false;
  bool uses_record = false;
  bool uses_release = false;
  std::size_t emitted = 0;

  const auto check_memory = [&](const char* indent) {
    body << indent << "if (memcmp(shadow, " << region(primary.site) << ", sizeof shadow) != 0)\n"
         << indent << "  return reproduced(\"" << long_name(primary.impact) << " in the "
         << (primary.site == Site::Buffer ? "buffer" : "container") << "\");\n";
  };

  for (std::size_t i = 0; i <= trigger; ++i) {
    const auto& a = program.actions[i];
    const auto& log = report.log[i];
    if (log.status == StepStatus::Skipped) continue;
    ++emitted;
    const std::size_t r = log.records;
    const Renderer render{spec, r};
    const bool is_trigger = i == trigger;
    if (is_trigger && memory_check) body << "\n  snapshot();\n";

    switch (a.kind) {
      case ActionKind::Allocate: {
        auto n = render.value(a.values[0]);
        if (!is_literal(n)) {
          body << "  n = " << n << ";\n";
          n = "n";
          uses_n = true;
        }
        if (log.status == StepStatus::Failed) {
          body << "  (void)malloc(" << n << "); /* returns NULL */\n";
          if (is_trigger && memory_check) check_memory("  ");
          break;
        }
        const auto idx = std::to_string(r);
        uses_record = true;
        if (is_trigger && memory_check) {
          uses_chunk = true;
          body << "  chunk = malloc(" << n << ");\n";
          check_memory("  ");
          body << "  p[" << idx << "] = chunk;\n  record(" << idx << ", " << n << ");\n";
        } else {
          body << "  p[" << idx << "] = malloc(" << n << ");\n";
          if (is_trigger && primary.impact == ImpactClass::ArbitraryChunk) {
            body << "\n  if (overlaps(ADDR(p[" << idx << "]), " << n << ", ADDR(" << region(primary.site)
                 << "), sizeof " << (primary.site == Site::Buffer ? "buf" : "container") << "))\n"
                 << "    return reproduced(\"arbitrary chunk in the "
                 << (primary.site == Site::Buffer ? "buffer" : "container") << "\");\n";
          } else if (is_trigger && overlap_check) {
            body << "\n  if (overlaps_live(ADDR(p[" << idx << "]), " << n << ", " << idx << "))\n"
                 << "    return reproduced(\"overlapping chunk\");\n";
          }
          body << "  record(" << idx << ", " << n << ");\n";
        }
        break;
      }
      case ActionKind::Deallocate: {
        const auto j = std::to_string(a.chunk % r);
        body << "  free(p[" << j << "]);\n";
        if (is_trigger && memory_check) check_memory("  ");
        body << "  release(" << j << ");\n";
        uses_release = true;
        break;
      }
      case ActionKind::HeapWrite: {
        const auto j = std::to_string(a.chunk % r);
        uses_store64 = true;
        body << "  store64(AT(p[" << j << "], " << slot_offset(a.slot, j) << "), "
             << render.value(a.values[0]) << ");\n";
        if (is_trigger && memory_check) check_memory("  ");
        break;
      }
      case ActionKind::BufferWrite: {
        uses_store64 = true;
        const auto off = std::size_t{a.buffer_offset} % (kBufferSize - kWordSize);
        body << "  store64(AT(buf, " << off << "), " << render.value(a.values[0]) << ");\n";
        if (is_trigger && memory_check) check_memory("  ");
        break;
      }
      case ActionKind::BugInvoke: {
        body << "  /* VULNERABILITY: " << vulnerability(a.bug) << " */\n";
        const auto j = r == 0 ? std::string("0") : std::to_string(a.chunk % r);
        switch (a.bug) {
          case BugKind::Overflow:
            uses_store64 = true;
            for (std::size_t k = 0; k < a.value_count; ++k) {
              body << "  store64(AT(p[" << j << "], usable[" << j << "]"
                   << (k == 0 ? std::string() : " + " + std::to_string(k * kWordSize)) << "), "
                   << render.value(a.values[k]) << ");\n";
            }
            break;
          case BugKind::OffByOne:
            uses_store8 = true;
            body << "  store8(AT(p[" << j << "], usable[" << j << "]), " << render.value(a.values[0])
                 << ");\n";
            break;
          case BugKind::OffByOneNull:
            uses_store8 = true;
            body << "  store8(AT(p[" << j << "], usable[" << j << "]), 0);\n";
            break;
          case BugKind::WriteAfterFree:
            uses_store64 = true;
            body << "  store64(AT(p[" << j << "], " << slot_offset(a.slot, j) << "), "
                 << render.value(a.values[0]) << ");\n";
            break;
          case BugKind::DoubleFree: body << "  free(p[" << j << "]);\n"; break;
          case BugKind::ArbitraryFree:
            body << "  free((void *)(uintptr_t)(" << render.value(a.values[0]) << "));\n";
            break;
        }
        if (is_trigger && memory_check) check_memory("  ");
        break;
      }
    }
  }

  // Unused statics would trip -Werror in the default compile command.
  const std::string statements = body.str();
  const bool uses_buf = std::regex_search(statements, std::regex(R"(\bbuf\b)")) ||
                        (memory_check && primary.site == Site::Buffer);
  const bool uses_container =
      std::regex_search(statements, std::regex(R"(\b(p|size|usable|status|container)\b)")) ||
      (memory_check && primary.site != Site::Buffer);

  const auto hash = trace_hash(report.trace);
  std::ostringstream src;
  src << "/* Proof of concept: " << long_name(primary.impact) << " (" << name(primary.impact) << ")";
  if (primary.site != Site::None) src << " in the " << name(primary.site);
  src << ".\n"
      << " *\n"
      << " * target: " << target.spec.to_string() << "\n"
      << " * trace:  " << hash << " (codec " << report.codec_version << ", " << emitted << " of "
      << program.actions.size() << " actions replayed)\n"
      << " * Exits 0 when the impact reproduces, 1 when it does not.\n";
  if (dynamic) src << " * Usage: ./poc [allocator.so]\n";
  if (target.spec.source == TargetSource::Preload) {
    src << " * Run with LD_PRELOAD=" << target.library << "\n";
  }
  src << " */\n";
  if (dynamic) src << "#define _POSIX_C_SOURCE 200809L\n#include <dlfcn.h>\n";
  if (!dynamic && target.usable == UsableSizeMode::Api) src << "#include <malloc.h>\n";
  src << "#include <stdint.h>\n#include <stdio.h>\n";
  if (!dynamic) src << "#include <stdlib.h>\n";
  src << "#include <string.h>\n\n";

  if (dynamic) {
    src << "#define TARGET_LIBRARY \"" << target.library << "\"\n\n"
        << "static void *(*target_malloc)(size_t);\n"
        << "static void (*target_free)(void *);\n";
    if (target.usable == UsableSizeMode::Api) src << "static size_t (*target_usable)(void *);\n";
    src << "#define malloc(n) target_malloc(n)\n#define free(m) target_free(m)\n\n";
  }

  if (uses_container) {
    src << "/* Same layout as the fuzzer's heap container. */\n"
        << "static _Alignas(4096) struct {\n"
        << "  void *base[256];\n"
        << "  uint64_t request[256];\n"
        << "  uint64_t usable_size[256];\n"
        << "  uint64_t state[256];\n"
        << "} container;\n";
  }
  if (uses_buf) src << "static _Alignas(4096) unsigned char buf[4096];\n";
  src << "\n"
      << "#define p container.base\n"
      << "#define size container.request\n"
      << "#define usable container.usable_size\n"
      << "#define status container.state\n"
      << "#define LIVE 1\n#define FREED 2\n\n"
      << "#define ADDR(x) ((uint64_t)(uintptr_t)(x))\n"
      << "#define AT(x, off) (ADDR(x) + (uint64_t)(off))\n"
      << "#define ALIGN8(x) ((uint64_t)(x) & ~(uint64_t)7)\n\n";

  if (memory_check) {
    src << "static unsigned char shadow[sizeof " << (primary.site == Site::Buffer ? "buf" : "container")
        << "];\n\n"
        << "static void snapshot(void) { memcpy(shadow, " << region(primary.site)
        << ", sizeof shadow); }\n\n";
  }
  if (overlap_check) {
    src << "static uint64_t replica_addr[256];\nstatic uint64_t replica_size[256];\n"
        << "static int replica_live[256];\n\n";
  }
  if (uses_store64) {
    src << "static void store64(uint64_t addr, uint64_t value) {\n"
        << "  memcpy((void *)(uintptr_t)addr, &value, sizeof value);\n}\n\n";
  }
  if (uses_store8) {
    src << "static void store8(uint64_t addr, uint64_t value) {\n"
        << "  *(volatile unsigned char *)(uintptr_t)addr = (unsigned char)value;\n}\n\n";
  }
  if (uses_record && target.usable == UsableSizeMode::GlibcSizeWord) {
    src << "/* glibc chunk size word minus the header overhead. */\n"
        << "static uint64_t chunk_usable(const void *mem) {\n"
        << "  uint64_t word = ((const uint64_t *)mem)[-1];\n"
        << "  uint64_t overhead = (word & 2) ? 16 : 8;\n"
        << "  uint64_t bytes = word & ~(uint64_t)7;\n"
        << "  return bytes >= overhead ? bytes - overhead : 0;\n}\n\n";
  }

  if (uses_record) {
    src << "static void record(int i, uint64_t n) {\n  size[i] = n;\n";
    switch (target.usable) {
      case UsableSizeMode::Api:
        src << "  usable[i] = " << (dynamic ? "target_usable" : "malloc_usable_size") << "(p[i]);\n";
        break;
      case UsableSizeMode::GlibcSizeWord: src << "  usable[i] = chunk_usable(p[i]);\n"; break;
      case UsableSizeMode::Shim: src << "  usable[i] = (n + 7) & ~(uint64_t)7;\n"; break;
    }
    src << "  status[i] = LIVE;\n";
    if (overlap_check) {
      src << "  replica_addr[i] = ADDR(p[i]);\n  replica_size[i] = n;\n  replica_live[i] = 1;\n";
    }
    src << "}\n\n";
  }
  if (uses_release) {
    src << "static void release(int i) {\n  status[i] = FREED;\n";
    if (overlap_check) src << "  replica_live[i] = 0;\n";
    src << "}\n\n";
  }

  if (primary.impact == ImpactClass::ArbitraryChunk || overlap_check) {
    src << "static uint64_t end_of(uint64_t lo, uint64_t len) {\n"
        << "  return len > UINT64_MAX - lo ? UINT64_MAX : lo + len;\n}\n\n"
        << "static int overlaps(uint64_t a, uint64_t alen, uint64_t b, uint64_t blen) {\n"
        << "  return alen > 0 && blen > 0 && a < end_of(b, blen) && b < end_of(a, alen);\n}\n\n";
  }
  if (overlap_check) {
    src << "static int overlaps_live(uint64_t addr, uint64_t len, int count) {\n"
        << "  for (int i = 0; i < count; ++i) {\n"
        << "    if (replica_live[i] && overlaps(addr, len, replica_addr[i], replica_size[i])) return 1;\n"
        << "  }\n  return 0;\n}\n\n";
  }
  src << "static int reproduced(const char *what) {\n"
      << "  fputs(\"reproduced: \", stderr);\n  fputs(what, stderr);\n  fputs(\"\\n\", stderr);\n"
      << "  return 0;\n}\n\n";

  src << "int main(int argc, char **argv) {\n";
  if (uses_n) src << "  uint64_t n;\n";
  if (uses_chunk) src << "  void *chunk;\n";
  if (dynamic) {
    src << "  const char *library = argc > 1 ? argv[1] : TARGET_LIBRARY;\n"
        << "  void *handle = dlopen(library, RTLD_NOW | RTLD_LOCAL);\n"
        << "  if (handle == NULL) {\n    fputs(\"cannot load allocator\\n\", stderr);\n    return 2;\n  }\n"
        << "  *(void **)&target_malloc = dlsym(handle, \"malloc\");\n"
        << "  *(void **)&target_free = dlsym(handle, \"free\");\n";
    if (target.usable == UsableSizeMode::Api) {
      src << "  *(void **)&target_usable = dlsym(handle, \"malloc_usable_size\");\n";
    }
    src << "  if (target_malloc == NULL || target_free == NULL";
    if (target.usable == UsableSizeMode::Api) src << " || target_usable == NULL";
    src << ") {\n    fputs(\"allocator lacks malloc/free\\n\", stderr);\n    return 2;\n  }\n\n";
  } else {
    src << "  (void)argc;\n  (void)argv;\n\n";
  }
  src << statements;
  src << "\n  fputs(\"impact not reproduced\\n\", stderr);\n  return 1;\n}\n";

  PocProgram poc;
  poc.source = src.str();
  poc.asserted = {primary.impact, primary.site};
  poc.trace_hash = hash;
  poc.file_name = target.spec.id() + "_" + std::string(name(primary.impact)) + "_" + hash + ".c";
  return poc;
}

namespace {

std::string replace_all(std::string s, std::string_view what, const std::string& with) {
  for (auto pos = s.find(what); pos != std::string::npos; pos = s.find(what, pos + with.size())) {
    s.replace(pos, what.size(), with);
  }
  return s;
}

std::string quote(const std::string& s) { return "'" + replace_all(s, "'", "'\\''") + "'"; }

}  // namespace

PocCheck check_poc(const PocProgram& poc, const PocTarget& target, const fs::path& dir,
                   std::string_view command) {
  PocCheck result;
  fs::create_directories(dir);
  const auto src = dir / poc.file_name;
  const auto out = dir / fs::path(poc.file_name).stem();
  {
    std::ofstream f(src, std::ios::trunc);
    f << poc.source;
  }
  auto cmd = replace_all(std::string(command), "{src}", quote(src.string()));
  cmd = replace_all(cmd, "{out}", quote(out.string())) + " 2>&1";
  if (FILE* pipe = ::popen(cmd.c_str(), "r")) {
    std::array<char, 4096> chunk{};
    std::size_t n = 0;
    while ((n = std::fread(chunk.data(), 1, chunk.size(), pipe)) > 0) {
      result.compiler_output.append(chunk.data(), n);
    }
    const int status = ::pclose(pipe);
    result.compiled = WIFEXITED(status) && WEXITSTATUS(status) == 0 && fs::exists(out);
  }
  if (!result.compiled) return result;

  std::vector<std::string> env;
  for (char** e = environ; *e != nullptr; ++e) {
    std::string_view kv(*e);
    if (!kv.starts_with("LD_PRELOAD=") && !kv.starts_with("LIBC_FATAL_STDERR_=")) env.emplace_back(kv);
  }
  env.emplace_back("LIBC_FATAL_STDERR_=1");
  if (target.spec.source == TargetSource::Preload) env.push_back("LD_PRELOAD=" + target.library);
  std::vector<char*> envp;
  for (auto& e : env) envp.push_back(e.data());
  envp.push_back(nullptr);
  std::string exe = out.string();
  std::array<char*, 2> argv = {exe.data(), nullptr};

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, STDIN_FILENO, "/dev/null", O_RDONLY, 0);
  posix_spawn_file_actions_addopen(&fa, STDOUT_FILENO, "/dev/null", O_WRONLY, 0);
  posix_spawn_file_actions_addopen(&fa, STDERR_FILENO, "/dev/null", O_WRONLY, 0);
  pid_t pid = -1;
  const int rc = posix_spawn(&pid, exe.c_str(), &fa, nullptr, argv.data(), envp.data());
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) return result;

  const int pidfd = static_cast<int>(::syscall(SYS_pidfd_open, pid, 0));
  if (pidfd >= 0) {
    pollfd pfd{pidfd, POLLIN, 0};
    if (::poll(&pfd, 1, 10'000) == 0) ::kill(pid, SIGKILL);
    ::close(pidfd);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  if (WIFEXITED(status)) result.exit_status = WEXITSTATUS(status);
  if (WIFSIGNALED(status)) result.signal = WTERMSIG(status);
  return result;
}

}  // namespace heapprobe
