// Executes one trace against one target and reports through a file and the
// exit status. Spawned by the campaign runner; not meant for direct use.
//
// Once execution starts the worker must not touch the heap: with the native
// target the heap under test is this process's own. Everything written after
// that point goes through fixed buffers and write(2).

#include <fcntl.h>
#include <signal.h>
#include <sys/time.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <csignal>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>

#include "heapprobe/codec.hpp"
#include "heapprobe/engine.hpp"
#include "heapprobe/model_spec.hpp"
#include "heapprobe/runner.hpp"
#include "heapprobe/target.hpp"

namespace {

using namespace heapprobe;

class LineWriter {
 public:
  LineWriter& put(std::string_view s) {
    for (char c : s) {
      if (len_ == sizeof buf_) flush();
      buf_[len_++] = c;
    }
    return *this;
  }
  LineWriter& num(std::uint64_t v) {
    char digits[24];
    int n = 0;
    do {
      digits[n++] = static_cast<char>('0' + v % 10);
      v /= 10;
    } while (v != 0);
    while (n > 0) put(std::string_view(&digits[--n], 1));
    return *this;
  }
  void flush() {
    std::size_t off = 0;
    while (off < len_) {
      const auto n = ::write(fd_, buf_ + off, len_ - off);
      if (n <= 0) break;
      off += static_cast<std::size_t>(n);
    }
    len_ = 0;
  }
  explicit LineWriter(int fd) : fd_(fd) {}
  ~LineWriter() { flush(); }

 private:
  int fd_;
  char buf_[512];
  std::size_t len_ = 0;
};

int g_report_fd = -1;
volatile sig_atomic_t g_found = 0;
volatile sig_atomic_t g_done = 0;
int g_finding_signal = 0;
EnumSet<ImpactClass> g_allowed;
const Execution* g_execution = nullptr;
alignas(16) unsigned char g_altstack[64 * 1024];

void write_log(LineWriter& w) {
  if (g_execution == nullptr) return;
  w.put("log=");
  bool first = true;
  for (const auto& r : g_execution->log()) {
    if (!first) w.put(" ");
    first = false;
    w.put(r.status == StepStatus::Executed ? "E" : r.status == StepStatus::Failed ? "F" : "S");
    w.num(r.records);
  }
  w.put("\n");
}

[[noreturn]] void finish(std::string_view outcome, int code, int sig) {
  {
    LineWriter w(g_report_fd);
    write_log(w);
    w.put("outcome=").put(outcome).put("\n");
    if (sig != 0) w.put("signal=").num(static_cast<std::uint64_t>(sig)).put("\n");
  }
  if (code == exit_code::kFinding && g_finding_signal != 0) {
    ::signal(g_finding_signal, SIG_DFL);
    ::raise(g_finding_signal);
  }
  ::_exit(code);
}

extern "C" void on_fatal(int sig) {
  if (g_done) ::_exit(exit_code::kCrash);
  g_done = 1;
  if (g_found) finish("finding", exit_code::kFinding, sig);
  finish("crash", exit_code::kCrash, sig);
}

extern "C" void on_alarm(int) {
  if (g_done) ::_exit(exit_code::kTimeout);
  g_done = 1;
  if (g_found) finish("finding", exit_code::kFinding, 0);
  finish("timeout", exit_code::kTimeout, 0);
}

void on_event(void*, const ImpactEvent& e) {
  LineWriter w(g_report_fd);
  w.put("event=").num(e.action_index).put(",").put(name(e.impact)).put(",").put(name(e.site));
  w.put(",").put(name(e.trigger)).put(",").put(e.has_bug ? name(e.bug) : "-").put("\n");
  if (g_allowed.contains(e.impact)) g_found = 1;
}

void install_handlers(std::chrono::milliseconds timeout) {
  stack_t ss{};
  ss.ss_sp = g_altstack;
  ss.ss_size = sizeof g_altstack;
  ::sigaltstack(&ss, nullptr);

  struct sigaction sa{};
  sa.sa_handler = on_fatal;
  sa.sa_flags = SA_ONSTACK;
  sigemptyset(&sa.sa_mask);
  for (int sig : {SIGSEGV, SIGBUS, SIGILL, SIGTRAP, SIGFPE, SIGABRT, SIGSYS}) {
    ::sigaction(sig, &sa, nullptr);
  }
  sa.sa_handler = on_alarm;
  ::sigaction(SIGALRM, &sa, nullptr);

  itimerval timer{};
  timer.it_value.tv_sec = timeout.count() / 1000;
  timer.it_value.tv_usec = (timeout.count() % 1000) * 1000;
  ::setitimer(ITIMER_REAL, &timer, nullptr);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"heapprobe worker: executes one trace"};
  std::string target_text = "native";
  std::string spec_text;
  std::string salt_text = "0";
  std::string trace_path;
  std::string report_path;
  long timeout_ms = 2000;
  std::size_t max_actions = kMaxActions;
  app.add_option("--target", target_text, "native, so:PATH, bundled:NAME or preload:PATH");
  app.add_option("--spec", spec_text, "model spec in inline form");
  app.add_option("--salt", salt_text, "placement salt (hex)");
  app.add_option("--trace", trace_path, "trace bytes")->required();
  app.add_option("--report", report_path, "report file to write")->required();
  app.add_option("--timeout-ms", timeout_ms, "wall-clock limit");
  app.add_option("--finding-signal", g_finding_signal, "signal raised on findings");
  app.add_option("--max-actions", max_actions, "decode at most this many actions");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code::kUsage;
  }

  ModelSpec spec;
  Word salt = 0;
  std::vector<std::uint8_t> bytes;
  std::optional<AllocatorTarget> target;
  try {
    spec = spec_text.empty() ? ModelSpec{} : parse_inline_spec(spec_text);
    salt = std::stoull(salt_text, nullptr, 16);
    std::ifstream in(trace_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read trace '" + trace_path + "'");
    bytes.assign(std::istreambuf_iterator<char>(in), {});
    target = AllocatorTarget::load(TargetSpec::parse(target_text));
  } catch (const std::exception& e) {
    std::cerr << "heapprobe_worker: " << e.what() << '\n';
    return exit_code::kUsage;
  }
  if (target->can_reset()) target->reset();

  const auto program = decode(bytes, spec, std::min(max_actions, kMaxActions));
  g_allowed = spec.impacts;
  g_report_fd = ::open(report_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_APPEND, 0644);
  if (g_report_fd < 0) {
    std::cerr << "heapprobe_worker: cannot open report '" << report_path << "'\n";
    return exit_code::kUsage;
  }

  ExecOptions options;
  options.on_event = on_event;
  Execution execution(*target, spec, salt, options);
  execution.load(program.actions);
  g_execution = &execution;
  install_handlers(std::chrono::milliseconds(timeout_ms));

  execution.run();

  g_done = 1;
  if (g_found) finish("finding", exit_code::kFinding, 0);
  finish("no-impact", exit_code::kNoImpact, 0);
}
