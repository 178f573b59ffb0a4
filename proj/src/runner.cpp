#include "heapprobe/runner.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/personality.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>

#include "heapprobe/abort_catalog.hpp"

extern char** environ;

#ifndef HEAPPROBE_WORKER_PATH
#define HEAPPROBE_WORKER_PATH ""
#endif

namespace heapprobe {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr auto kKillGrace = std::chrono::milliseconds(1000);

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RunnerError("cannot write " + path.string());
}

// Last line the allocator printed; the engine's own warnings are skipped.
std::string last_line(const std::string& text) {
  std::string_view s = text;
  while (!s.empty()) {
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
    const auto nl = s.rfind('\n');
    const auto line = nl == std::string_view::npos ? s : s.substr(nl + 1);
    if (!line.starts_with("heapprobe: ")) return std::string(line);
    s = nl == std::string_view::npos ? std::string_view() : s.substr(0, nl);
  }
  return {};
}

std::string hex(Word w) {
  std::ostringstream ss;
  ss << std::hex << w;
  return ss.str();
}

int pidfd_open(pid_t pid) { return static_cast<int>(::syscall(SYS_pidfd_open, pid, 0)); }

}  // namespace

std::string default_worker_path() {
  if (const char* env = std::getenv("HEAPPROBE_WORKER"); env && *env) return env;
  std::error_code ec;
  const auto exe = fs::read_symlink("/proc/self/exe", ec);
  if (!ec) {
    const auto sibling = exe.parent_path() / "heapprobe_worker";
    if (fs::exists(sibling, ec)) return sibling.string();
  }
  return HEAPPROBE_WORKER_PATH;
}

struct Runner::Slot {
  std::size_t job = 0;
  pid_t pid = -1;
  int pidfd = -1;
  Clock::time_point deadline;
  bool killed = false;
  fs::path trace_path;
  fs::path report_path;
  fs::path stderr_path;
};

Runner::Runner(RunnerConfig config) : config_(std::move(config)) {
  if (config_.worker.empty()) config_.worker = default_worker_path();
  if (config_.worker.empty() || access(config_.worker.c_str(), X_OK) != 0) {
    throw RunnerError("worker binary not found ('" + config_.worker + "'); set HEAPPROBE_WORKER");
  }
  if (config_.target.source == TargetSource::Bundled) {
    bundled_library_path(config_.target.location);  // fail early when missing
  }
  spec_inline_ = config_.spec.to_inline();

  if (config_.scratch.empty()) {
    std::string tmpl = (fs::temp_directory_path() / "heapprobe-XXXXXX").string();
    if (mkdtemp(tmpl.data()) == nullptr) throw RunnerError("cannot create scratch directory");
    config_.scratch = tmpl;
    owns_scratch_ = true;
  } else {
    fs::create_directories(config_.scratch);
  }

  // Workers inherit a fixed address-space layout so the same trace and salt
  // reproduce the same heap addresses.
  const int persona = personality(0xffffffff);
  if (persona != -1) personality(static_cast<unsigned long>(persona) | ADDR_NO_RANDOMIZE);

  for (char** e = environ; *e != nullptr; ++e) {
    std::string_view kv(*e);
    if (kv.starts_with("LD_PRELOAD=") || kv.starts_with("LIBC_FATAL_STDERR_=")) continue;
    env_.emplace_back(kv);
  }
  env_.emplace_back("LIBC_FATAL_STDERR_=1");
  if (config_.target.source == TargetSource::Preload) {
    env_.push_back("LD_PRELOAD=" + fs::absolute(config_.target.location).string());
  }
}

Runner::~Runner() {
  if (owns_scratch_) {
    std::error_code ec;
    fs::remove_all(config_.scratch, ec);
  }
}

void Runner::spawn(Slot& slot, const RunJob& job) {
  write_file(slot.trace_path, job.trace);
  std::error_code ec;
  fs::remove(slot.report_path, ec);

  std::vector<std::string> args = {
      config_.worker,
      "--target", config_.target.to_string(),
      "--spec", spec_inline_,
      "--salt", hex(job.salt),
      "--trace", slot.trace_path.string(),
      "--report", slot.report_path.string(),
      "--timeout-ms", std::to_string(config_.timeout.count()),
      "--max-actions", std::to_string(config_.max_actions),
  };
  if (config_.finding_signal != 0) {
    args.push_back("--finding-signal");
    args.push_back(std::to_string(config_.finding_signal));
  }
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  std::vector<char*> envp;
  for (auto& e : env_) envp.push_back(e.data());
  envp.push_back(nullptr);

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, STDIN_FILENO, "/dev/null", O_RDONLY, 0);
  posix_spawn_file_actions_addopen(&fa, STDOUT_FILENO, "/dev/null", O_WRONLY, 0);
  posix_spawn_file_actions_addopen(&fa, STDERR_FILENO, slot.stderr_path.c_str(),
                                   O_WRONLY | O_CREAT | O_TRUNC, 0644);
  pid_t pid = -1;
  const int rc = posix_spawn(&pid, config_.worker.c_str(), &fa, nullptr, argv.data(), envp.data());
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) throw RunnerError(std::string("cannot spawn worker: ") + std::strerror(rc));

  slot.pid = pid;
  slot.pidfd = pidfd_open(pid);
  slot.killed = false;
  slot.deadline = Clock::now() + config_.timeout + kKillGrace;
}

ImpactReport Runner::collect(Slot& slot, int status, bool killed) {
  ImpactReport report;
  if (fs::exists(slot.report_path)) report = parse_report(read_file(slot.report_path));
  report.target = config_.target.to_string();
  report.spec = spec_inline_;
  report.codec_version = kCodecVersion;

  if (killed) {
    report.outcome = OutcomeKind::Timeout;
  } else if (WIFEXITED(status)) {
    switch (WEXITSTATUS(status)) {
      case exit_code::kNoImpact: report.outcome = OutcomeKind::NoImpact; break;
      case exit_code::kFinding: report.outcome = OutcomeKind::Finding; break;
      case exit_code::kTimeout: report.outcome = OutcomeKind::Timeout; break;
      case exit_code::kUsage:
        throw RunnerError("worker rejected its arguments: " + last_line(read_file(slot.stderr_path)));
      default: report.outcome = OutcomeKind::Crash; break;
    }
  } else if (WIFSIGNALED(status)) {
    report.signal = WTERMSIG(status);
    report.outcome = config_.finding_signal != 0 && report.signal == config_.finding_signal
                         ? OutcomeKind::Finding
                         : OutcomeKind::Crash;
  } else {
    report.outcome = OutcomeKind::Crash;
  }

  apply_verdict(report, config_.spec.impacts);
  if (report.outcome == OutcomeKind::Finding && !report.primary) {
    report.outcome = OutcomeKind::NoImpact;
  }
  if (report.outcome == OutcomeKind::Crash) {
    report.message = normalize_abort_message(last_line(read_file(slot.stderr_path)));
    if (auto id = classify_abort(report.message)) report.check_id = std::string(*id);
  } else {
    report.message.clear();
    report.check_id.reset();
  }
  return report;
}

ImpactReport Runner::run(std::span<const std::uint8_t> trace, Word salt) {
  RunJob job{std::vector<std::uint8_t>(trace.begin(), trace.end()), salt};
  return run_batch(std::span(&job, 1), 1).front();
}

std::vector<ImpactReport> Runner::run_batch(std::span<const RunJob> jobs, unsigned workers) {
  workers = std::max(1u, workers);
  std::vector<std::optional<ImpactReport>> results(jobs.size());
  std::vector<Slot> slots(std::min<std::size_t>(workers, std::max<std::size_t>(jobs.size(), 1)));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto stem = config_.scratch / ("run-" + std::to_string(getpid()) + "-" + std::to_string(i));
    slots[i].trace_path = stem.string() + ".trace";
    slots[i].report_path = stem.string() + ".report";
    slots[i].stderr_path = stem.string() + ".stderr";
  }

  std::size_t next = 0;
  std::size_t running = 0;
  for (auto& s : slots) {
    if (next >= jobs.size()) break;
    s.job = next;
    spawn(s, jobs[next++]);
    ++running;
  }

  while (running > 0) {
    std::vector<pollfd> fds;
    std::vector<Slot*> owners;
    auto wake = Clock::now() + std::chrono::seconds(1);
    for (auto& s : slots) {
      if (s.pid < 0) continue;
      fds.push_back({s.pidfd, POLLIN, 0});
      owners.push_back(&s);
      wake = std::min(wake, s.deadline);
    }
    const auto wait_ms = std::chrono::duration_cast<std::chrono::milliseconds>(wake - Clock::now());
    const bool have_fds = std::all_of(fds.begin(), fds.end(), [](const pollfd& p) { return p.fd >= 0; });
    if (have_fds) {
      ::poll(fds.data(), fds.size(), static_cast<int>(std::clamp<long long>(wait_ms.count(), 0, 1000)));
    } else {
      ::usleep(200);
    }

    for (auto* s : owners) {
      int status = 0;
      const pid_t got = ::waitpid(s->pid, &status, WNOHANG);
      if (got == 0) {
        if (Clock::now() >= s->deadline && !s->killed) {
          ::kill(s->pid, SIGKILL);
          s->killed = true;
        }
        continue;
      }
      if (got < 0 && errno == EINTR) continue;
      auto report = collect(*s, status, s->killed);
      report.trace = jobs[s->job].trace;
      report.salt = jobs[s->job].salt;
      results[s->job] = std::move(report);
      if (s->pidfd >= 0) ::close(s->pidfd);
      s->pid = -1;
      s->pidfd = -1;
      --running;
      if (next < jobs.size()) {
        s->job = next;
        spawn(*s, jobs[next++]);
        ++running;
      }
    }
  }

  std::vector<ImpactReport> out;
  out.reserve(results.size());
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

}  // namespace heapprobe
