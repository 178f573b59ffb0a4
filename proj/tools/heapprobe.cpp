// heapprobe: fuzz allocators for heap exploitation primitives.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <thread>

#include "heapprobe/campaign.hpp"
#include "heapprobe/codec.hpp"
#include "heapprobe/minimizer.hpp"
#include "heapprobe/poc.hpp"
#include "heapprobe/runner.hpp"

namespace {

using namespace heapprobe;
namespace fs = std::filesystem;

std::chrono::milliseconds parse_duration(const std::string& text) {
  std::size_t used = 0;
  const double value = std::stod(text, &used);
  const std::string unit = text.substr(used);
  double ms = 0;
  if (unit.empty() || unit == "s") ms = value * 1e3;
  else if (unit == "ms") ms = value;
  else if (unit == "m") ms = value * 60e3;
  else if (unit == "h") ms = value * 3600e3;
  else throw CLI::ValidationError("--budget", "unknown unit '" + unit + "' (use ms, s, m, h)");
  if (ms <= 0) throw CLI::ValidationError("--budget", "must be positive");
  return std::chrono::milliseconds(static_cast<long long>(ms));
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  write_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

EnumSet<ImpactClass> parse_impacts(const std::string& text) {
  EnumSet<ImpactClass> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto c = parse_impact(item);
    if (!c) throw std::runtime_error("unknown impact class '" + item + "'");
    out.insert(*c);
  }
  return out;
}

struct Common {
  std::string target = "native";
  std::string spec_path;
  long timeout_ms = 2000;

  void add(CLI::App* app) {
    app->add_option("--target", target, "native, so:PATH, bundled:NAME or preload:PATH");
    app->add_option("--spec", spec_path, "model spec file");
    app->add_option("--timeout-ms", timeout_ms, "per-execution wall-clock limit");
  }
  ModelSpec spec() const { return spec_path.empty() ? ModelSpec{} : load_model_spec(spec_path); }
};

// Reports name their own target and spec; flags given explicitly win.
RunnerConfig runner_for(const Common& c, const ImpactReport* report, CLI::App* app) {
  RunnerConfig rc;
  rc.timeout = std::chrono::milliseconds(c.timeout_ms);
  const bool target_given = app->count("--target") > 0;
  const bool spec_given = app->count("--spec") > 0;
  rc.target = TargetSpec::parse(report && !target_given ? report->target : c.target);
  rc.spec = report && !spec_given ? parse_inline_spec(report->spec) : c.spec();
  return rc;
}

int cmd_fuzz(const Common& c, const std::string& budget, unsigned workers, const std::string& seed,
             const std::string& out, const std::string& input_dir, bool keep_duplicates,
             std::uint64_t max_execs, const std::string& stop_on, bool no_minimize, bool no_poc) {
  CampaignConfig config;
  config.target = TargetSpec::parse(c.target);
  config.spec = c.spec();
  config.budget = parse_duration(budget);
  config.workers = workers;
  config.seed = std::stoull(seed, nullptr, 16);
  config.out = out;
  if (!input_dir.empty()) config.input_dir = input_dir;
  config.keep_duplicates = keep_duplicates;
  if (max_execs > 0) config.max_execs = max_execs;
  config.stop_on = parse_impacts(stop_on);
  config.timeout = std::chrono::milliseconds(c.timeout_ms);
  config.minimize = !no_minimize;
  config.emit_poc = !no_poc;
  config.progress = [](const std::string& line) { std::cerr << "heapprobe: " << line << '\n'; };

  const auto summary = fuzz(config);
  std::cout << format_summary(summary);
  return 0;
}

int cmd_replay(const Common& c, CLI::App* app, const std::string& report_path,
               const std::string& trace_path, const std::string& salt_text) {
  std::optional<ImpactReport> recorded;
  std::vector<std::uint8_t> trace;
  Word salt = 0;
  if (!report_path.empty()) {
    recorded = load_report(report_path);
    trace = recorded->trace;
    salt = recorded->salt;
  }
  if (!trace_path.empty()) trace = read_bytes(trace_path);
  if (app->count("--salt") > 0) salt = std::stoull(salt_text, nullptr, 16);
  if (report_path.empty() && trace_path.empty()) throw std::runtime_error("need --report or --trace");

  Runner runner(runner_for(c, recorded ? &*recorded : nullptr, app));
  const auto report = runner.run(trace, salt);
  std::cout << serialize(report);
  return 0;
}

int cmd_minimize(const Common& c, CLI::App* app, const std::string& report_path, const std::string& out,
                 long oracle_timeout_ms) {
  const auto report = load_report(report_path);
  const auto key = impact_key(report);
  if (!key) throw std::runtime_error("report has no finding to minimize");
  Runner runner(runner_for(c, &report, app));
  auto oracle_config = runner.config();
  oracle_config.timeout = std::chrono::milliseconds(std::min(c.timeout_ms, oracle_timeout_ms));
  Runner oracle_runner(oracle_config);
  const auto& spec = runner.config().spec;
  const auto program = decode(report.trace, spec);
  const auto end = std::min<std::size_t>(program.size(), report.primary->action_index + 1u);
  const auto result = minimize(std::span(program.actions.data(), end), *key,
                               process_oracle(oracle_runner, report.salt));
  const auto bytes = encode(result.actions, spec);
  const auto replay = runner.run(bytes, report.salt);
  fs::path dir = out.empty() ? fs::path(report_path).parent_path() : fs::path(out);
  if (dir.empty()) dir = ".";
  fs::create_directories(dir);
  write_bytes(dir / "min_trace.bin", bytes);
  write_atomic(dir / "min_report.txt", serialize(replay));
  std::cerr << "heapprobe: " << program.size() << " -> " << result.actions.size() << " actions in "
            << result.passes << " passes, " << result.evaluations << " executions\n";
  std::cout << serialize(replay);
  return 0;
}

int cmd_emit_poc(const Common& c, CLI::App* app, const std::string& report_path,
                 const std::string& trace_path, const std::string& out, bool check,
                 const std::string& compile_command) {
  auto report = load_report(report_path);
  Runner runner(runner_for(c, &report, app));
  const auto& spec = runner.config().spec;
  if (!trace_path.empty()) report.trace = read_bytes(trace_path);
  // The step log drives emission; a fresh replay guarantees it matches the trace.
  report = runner.run(report.trace, report.salt);
  if (!impact_key(report)) throw std::runtime_error("trace does not reproduce a finding on this target");

  const auto target = resolve_poc_target(runner.config().target);
  const auto poc = emit_poc(decode(report.trace, spec), report, target);
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  fs::create_directories(dir);
  write_atomic(dir / poc.file_name, poc.source);
  std::cout << (dir / poc.file_name).string() << '\n';
  if (!check) return 0;

  const auto result = check_poc(poc, target, dir, compile_command);
  if (!result.compiled) {
    std::cerr << result.compiler_output;
    std::cout << "check: compile failed\n";
    return 1;
  }
  std::cout << "check: exit " << result.exit_status;
  if (result.signal != 0) std::cout << " signal " << result.signal;
  std::cout << (result.exit_status == 0 ? " (reproduced)\n" : " (not reproduced)\n");
  return result.exit_status == 0 ? 0 : 1;
}

int cmd_coverage(const std::string& dir) {
  std::cout << format_coverage(coverage_report(load_summary(dir)));
  return 0;
}

// Quick health check of the installation: every bundled target loads in a
// worker, an empty trace has no impact, and bug-free random traces stay
// clean.
int cmd_selftest(const Common& c) {
  int failures = 0;
  auto line = [&](bool ok, const std::string& what) {
    std::cout << (ok ? "PASS " : "FAIL ") << what << '\n';
    if (!ok) ++failures;
  };
  std::vector<std::string> targets = {"bundled:unsafe-unlink", "bundled:checked", "bundled:page", "native"};
  ModelSpec clean;
  clean.bugs = {};
  for (const auto& t : targets) {
    try {
      RunnerConfig rc;
      rc.target = TargetSpec::parse(t);
      rc.spec = clean;
      rc.timeout = std::chrono::milliseconds(c.timeout_ms);
      Runner runner(rc);
      const auto empty = runner.run({}, 0);
      line(empty.outcome == OutcomeKind::NoImpact, t + ": empty trace has no impact");
      std::vector<RunJob> jobs;
      for (std::uint64_t i = 0; i < 64; ++i) jobs.push_back({generate_input(0x5e1f, i), derive_salt(0x5e1f, i)});
      std::size_t impacts = 0;
      for (const auto& r : runner.run_batch(jobs, std::max(1u, std::thread::hardware_concurrency()))) {
        if (!r.events.empty()) ++impacts;
      }
      line(impacts == 0, t + ": 64 bug-free traces, " + std::to_string(impacts) + " impact reports");
    } catch (const std::exception& e) {
      line(false, t + ": " + e.what());
    }
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"heapprobe: fuzz heap allocators for exploitation primitives"};
  app.require_subcommand(1);

  Common common;
  std::string budget = "60s", seed = "0", out = "campaign", input_dir, stop_on;
  unsigned workers = std::max(1u, std::thread::hardware_concurrency());
  bool keep_duplicates = false, no_minimize = false, no_poc = false;
  std::uint64_t max_execs = 0;
  auto* fuzz_cmd = app.add_subcommand("fuzz", "run a campaign");
  common.add(fuzz_cmd);
  fuzz_cmd->add_option("--budget", budget, "wall time, e.g. 90s, 10m, 1h");
  fuzz_cmd->add_option("--workers", workers, "parallel worker processes");
  fuzz_cmd->add_option("--seed", seed, "generator seed (hex)");
  fuzz_cmd->add_option("--out", out, "campaign directory");
  fuzz_cmd->add_option("--input-dir", input_dir, "read inputs from this directory instead");
  fuzz_cmd->add_flag("--keep-duplicates", keep_duplicates, "save every finding, not one per key");
  fuzz_cmd->add_option("--max-execs", max_execs, "stop after this many executions");
  fuzz_cmd->add_option("--stop-on", stop_on, "stop at the first finding of these classes (AC,OC,AW,RW)");
  fuzz_cmd->add_flag("--no-minimize", no_minimize, "skip minimization");
  fuzz_cmd->add_flag("--no-poc", no_poc, "skip PoC emission");

  Common replay_common;
  std::string replay_report, replay_trace, replay_salt = "0";
  auto* replay_cmd = app.add_subcommand("replay", "execute one trace again");
  replay_common.add(replay_cmd);
  replay_cmd->add_option("--report", replay_report, "finding report (supplies trace, salt, target, spec)");
  replay_cmd->add_option("--trace", replay_trace, "trace bytes");
  replay_cmd->add_option("--salt", replay_salt, "placement salt (hex)");

  Common min_common;
  std::string min_report, min_out;
  auto* min_cmd = app.add_subcommand("minimize", "shrink a finding");
  min_common.add(min_cmd);
  min_cmd->add_option("report", min_report, "finding report")->required();
  min_cmd->add_option("--out", min_out, "directory for min_trace.bin and min_report.txt");
  long min_oracle_timeout = 250;
  min_cmd->add_option("--oracle-timeout-ms", min_oracle_timeout, "limit for candidate executions");

  Common poc_common;
  std::string poc_report, poc_trace, poc_out;
  bool poc_check = false;
  std::string poc_command(kDefaultCompileCommand);
  auto* poc_cmd = app.add_subcommand("emit-poc", "write a standalone C reproducer");
  poc_common.add(poc_cmd);
  poc_cmd->add_option("report", poc_report, "finding report")->required();
  poc_cmd->add_option("--trace", poc_trace, "use these trace bytes instead (e.g. min_trace.bin)");
  poc_cmd->add_option("--out", poc_out, "output directory");
  poc_cmd->add_flag("--check", poc_check, "compile and run the PoC");
  poc_cmd->add_option("--compile-command", poc_command, "compiler command with {src} and {out}");

  std::string coverage_dir;
  auto* cov_cmd = app.add_subcommand("coverage", "security checks hit by a campaign");
  cov_cmd->add_option("dir", coverage_dir, "campaign directory")->required();

  Common self_common;
  auto* self_cmd = app.add_subcommand("selftest", "check the installation");
  self_cmd->add_option("--timeout-ms", self_common.timeout_ms, "per-execution wall-clock limit");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fuzz_cmd) {
      return cmd_fuzz(common, budget, workers, seed, out, input_dir, keep_duplicates, max_execs,
                      stop_on, no_minimize, no_poc);
    }
    if (*replay_cmd) return cmd_replay(replay_common, replay_cmd, replay_report, replay_trace, replay_salt);
    if (*min_cmd) return cmd_minimize(min_common, min_cmd, min_report, min_out, min_oracle_timeout);
    if (*poc_cmd) {
      return cmd_emit_poc(poc_common, poc_cmd, poc_report, poc_trace, poc_out, poc_check, poc_command);
    }
    if (*cov_cmd) return cmd_coverage(coverage_dir);
    if (*self_cmd) return cmd_selftest(self_common);
  } catch (const std::exception& e) {
    std::cerr << "heapprobe: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
