#include "heapprobe/campaign.hpp"

#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "heapprobe/abort_catalog.hpp"
#include "heapprobe/codec.hpp"
#include "heapprobe/minimizer.hpp"
#include "heapprobe/poc.hpp"
#include "heapprobe/runner.hpp"

namespace heapprobe {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kMinInput = 8;
constexpr std::size_t kMaxInput = 1024;
constexpr auto kRescanDelay = std::chrono::milliseconds(200);
constexpr auto kProgressEvery = std::chrono::seconds(5);

std::mt19937_64 stream_rng(Word seed, std::uint64_t index, std::uint32_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    purpose};
  return std::mt19937_64(seq);
}

std::string hex_word(Word w) {
  std::ostringstream ss;
  ss << "0x" << std::hex << w;
  return ss.str();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CampaignError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string bytes_text(std::span<const std::uint8_t> bytes) {
  return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

std::string key_for(const ImpactEvent& e) {
  std::string key;
  key += name(e.impact);
  key += '-';
  key += name(e.site);
  key += '-';
  key += e.has_bug ? std::string(name(e.bug)) : "none";
  key += '-';
  key += name(e.trigger);
  return key;
}

// Inputs of the external-fuzzer mode, oldest name first.
class InputQueue {
 public:
  explicit InputQueue(fs::path dir) : dir_(std::move(dir)) {
    if (!fs::is_directory(dir_)) throw CampaignError("input directory '" + dir_.string() + "' not found");
  }

  std::vector<fs::path> take(std::size_t limit) {
    std::vector<fs::path> fresh;
    for (const auto& entry : fs::directory_iterator(dir_)) {
      if (!entry.is_regular_file()) continue;
      const auto name = entry.path().filename().string();
      if (name.starts_with('.') || seen_.contains(name)) continue;
      fresh.push_back(entry.path());
    }
    std::sort(fresh.begin(), fresh.end());
    if (fresh.size() > limit) fresh.resize(limit);
    for (const auto& p : fresh) seen_.insert(p.filename().string());
    return fresh;
  }

 private:
  fs::path dir_;
  std::set<std::string> seen_;
};

struct Pending {
  std::size_t finding = 0;  // index into summary.findings
};

void save_new_finding(const fs::path& findings_dir, FindingRecord& record) {
  const auto tmp = findings_dir / (".tmp-" + record.key);
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp);
  write_atomic(tmp / "report.txt", serialize(record.report));
  write_atomic(tmp / "trace.bin", bytes_text(record.report.trace));
  fs::remove_all(record.dir, ec);
  fs::rename(tmp, record.dir);
}

void finish_finding(const CampaignConfig& config, Runner& runner, Runner& oracle_runner,
                    FindingRecord& record) {
  const auto& report = record.report;
  const auto program = decode(report.trace, config.spec, config.max_actions);
  record.raw_actions = program.size();
  const auto key = impact_key(report);

  std::optional<TraceProgram> poc_program;
  std::optional<ImpactReport> poc_report;
  if (config.minimize && key) {
    // Actions after the primary event cannot change it.
    const auto end = std::min<std::size_t>(program.size(), report.primary->action_index + 1u);
    const std::span<const Action> prefix(program.actions.data(), end);
    try {
      auto result = minimize(prefix, *key, process_oracle(oracle_runner, report.salt));
      const auto bytes = encode(result.actions, config.spec);
      auto replay = runner.run(bytes, report.salt);
      record.min_actions = result.actions.size();
      write_atomic(record.dir / "min_trace.bin", bytes_text(bytes));
      write_atomic(record.dir / "min_report.txt", serialize(replay));
      poc_program = decode(bytes, config.spec, config.max_actions);
      poc_report = replay;
      record.min_report = std::move(replay);
    } catch (const FlakyFinding& e) {
      record.note = std::string("minimization skipped: ") + e.what();
    }
  }
  if (!config.emit_poc) return;
  if (!poc_program) {
    poc_program = program;
    poc_report = report;
  }
  try {
    const auto poc = emit_poc(*poc_program, *poc_report, resolve_poc_target(config.target));
    write_atomic(record.dir / "poc.c", poc.source);
  } catch (const PocError& e) {
    if (!record.note.empty()) record.note += "; ";
    record.note += std::string("no PoC: ") + e.what();
  }
  if (!record.note.empty()) write_atomic(record.dir / "note.txt", record.note + "\n");
}

}  // namespace

bool CampaignSummary::same_counters(const CampaignSummary& o) const {
  return executions == o.executions && finding_executions == o.finding_executions &&
         no_impact == o.no_impact && crashes == o.crashes && timeouts == o.timeouts &&
         findings_per_class == o.findings_per_class && aborts_per_check == o.aborts_per_check &&
         unknown_aborts == o.unknown_aborts;
}

std::vector<std::uint8_t> generate_input(Word seed, std::uint64_t index) {
  auto rng = stream_rng(seed, index, 1);
  std::uniform_int_distribution<std::size_t> length(kMinInput, kMaxInput);
  std::uniform_int_distribution<int> byte(0, 255);
  std::vector<std::uint8_t> out(length(rng));
  for (auto& b : out) b = static_cast<std::uint8_t>(byte(rng));
  return out;
}

Word derive_salt(Word seed, std::uint64_t index) { return stream_rng(seed, index, 2)(); }

std::string dedup_key(const ImpactEvent& primary) { return key_for(primary); }

void write_atomic(const fs::path& path, std::string_view content) {
  auto tmp = path;
  tmp += ".tmp-" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw CampaignError("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

CampaignSummary fuzz(const CampaignConfig& config) {
  config.spec.validate();
  if (config.out.empty()) throw CampaignError("no output directory");
  const auto findings_dir = config.out / "findings";
  fs::create_directories(findings_dir);

  RunnerConfig rc;
  rc.target = config.target;
  rc.spec = config.spec;
  rc.timeout = config.timeout;
  rc.worker = config.worker;
  rc.finding_signal = config.finding_signal;
  rc.max_actions = config.max_actions;
  Runner runner(rc);
  rc.timeout = std::min(config.timeout, config.minimize_timeout);
  Runner oracle_runner(rc);

  CampaignSummary summary;
  summary.target = config.target.to_string();
  summary.spec = config.spec.to_inline();
  summary.seed = config.seed;

  std::optional<InputQueue> queue;
  if (config.input_dir) queue.emplace(*config.input_dir);

  const auto workers = std::max(1u, config.workers);
  const auto start = Clock::now();
  const auto deadline = start + config.budget;
  auto next_progress = start + kProgressEvery;
  std::set<std::string> keys;
  std::vector<Pending> pending;
  std::uint64_t index = 0;
  bool stop = false;

  while (!stop && Clock::now() < deadline) {
    std::size_t batch = static_cast<std::size_t>(workers) * 4;
    if (config.max_execs) {
      if (summary.executions >= *config.max_execs) break;
      batch = std::min<std::uint64_t>(batch, *config.max_execs - summary.executions);
    }
    std::vector<RunJob> jobs;
    if (queue) {
      for (const auto& path : queue->take(batch)) {
        const auto text = read_file(path);
        jobs.push_back({std::vector<std::uint8_t>(text.begin(), text.end()),
                        derive_salt(config.seed, index + jobs.size())});
      }
      if (jobs.empty()) {
        std::this_thread::sleep_for(kRescanDelay);
        continue;
      }
    } else {
      for (std::size_t i = 0; i < batch; ++i) {
        jobs.push_back({generate_input(config.seed, index + i), derive_salt(config.seed, index + i)});
      }
    }

    auto reports = runner.run_batch(jobs, workers);
    for (auto& report : reports) {
      const auto this_index = index++;
      ++summary.executions;
      switch (report.outcome) {
        case OutcomeKind::NoImpact: ++summary.no_impact; break;
        case OutcomeKind::Timeout: ++summary.timeouts; break;
        case OutcomeKind::Crash:
          ++summary.crashes;
          if (report.check_id) {
            ++summary.aborts_per_check[*report.check_id];
          } else if (!report.message.empty()) {
            ++summary.unknown_aborts[report.message];
          }
          break;
        case OutcomeKind::Finding: {
          ++summary.finding_executions;
          const auto key = key_for(*report.primary);
          const bool fresh = keys.insert(key).second;
          if (fresh || config.keep_duplicates) {
            FindingRecord record;
            record.key = fresh ? key : key + "-" + std::to_string(this_index);
            record.dir = findings_dir / record.key;
            record.report = std::move(report);
            save_new_finding(findings_dir, record);
            ++summary.findings_per_class[std::string(name(record.report.primary->impact))];
            summary.findings.push_back(std::move(record));
            pending.push_back({summary.findings.size() - 1});
            const auto impact = summary.findings.back().report.primary->impact;
            if (config.stop_on.contains(impact)) stop = true;
          }
          break;
        }
      }
      if (stop) break;
    }

    if (config.progress && Clock::now() >= next_progress) {
      next_progress = Clock::now() + kProgressEvery;
      config.progress("executions=" + std::to_string(summary.executions) +
                      " findings=" + std::to_string(summary.findings.size()) +
                      " crashes=" + std::to_string(summary.crashes));
    }
  }

  if (summary.executions == 0) {
    throw CampaignError("no execution completed within the budget");
  }

  for (const auto& p : pending) {
    auto& record = summary.findings[p.finding];
    if (config.progress && (config.minimize || config.emit_poc)) {
      config.progress((config.minimize ? "minimizing " : "emitting PoC for ") + record.key);
    }
    finish_finding(config, runner, oracle_runner, record);
  }

  summary.elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start);
  write_atomic(config.out / "summary.txt", format_summary(summary));
  return summary;
}

std::string format_summary(const CampaignSummary& s) {
  std::ostringstream out;
  out << "target=" << s.target << '\n';
  out << "spec=" << s.spec << '\n';
  out << "seed=" << hex_word(s.seed) << '\n';
  out << "executions=" << s.executions << '\n';
  out << "finding_executions=" << s.finding_executions << '\n';
  out << "no_impact=" << s.no_impact << '\n';
  out << "crashes=" << s.crashes << '\n';
  out << "timeouts=" << s.timeouts << '\n';
  out << "elapsed_ms=" << s.elapsed.count() << '\n';
  for (const auto& [impact, n] : s.findings_per_class) out << "findings." << impact << '=' << n << '\n';
  for (const auto& [id, n] : s.aborts_per_check) out << "abort." << id << '=' << n << '\n';
  for (const auto& [msg, n] : s.unknown_aborts) out << "abort_unknown=" << n << '\t' << msg << '\n';
  for (const auto& f : s.findings) {
    out << "finding=" << f.key << '\t' << f.raw_actions << '\t';
    if (f.min_actions) {
      out << *f.min_actions;
    } else {
      out << '-';
    }
    out << '\n';
  }
  return out.str();
}

CampaignSummary parse_summary(std::string_view text) {
  CampaignSummary s;
  auto number = [](std::string_view v) { return std::stoull(std::string(v), nullptr, 0); };
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string_view key(line.data(), eq);
    const std::string_view value = std::string_view(line).substr(eq + 1);
    if (key == "target") s.target = value;
    else if (key == "spec") s.spec = value;
    else if (key == "seed") s.seed = number(value);
    else if (key == "executions") s.executions = number(value);
    else if (key == "finding_executions") s.finding_executions = number(value);
    else if (key == "no_impact") s.no_impact = number(value);
    else if (key == "crashes") s.crashes = number(value);
    else if (key == "timeouts") s.timeouts = number(value);
    else if (key == "elapsed_ms") s.elapsed = std::chrono::milliseconds(number(value));
    else if (key.starts_with("findings.")) s.findings_per_class[std::string(key.substr(9))] = number(value);
    else if (key.starts_with("abort.")) s.aborts_per_check[std::string(key.substr(6))] = number(value);
    else if (key == "abort_unknown") {
      const auto tab = value.find('\t');
      if (tab == std::string_view::npos) continue;
      s.unknown_aborts[std::string(value.substr(tab + 1))] = number(value.substr(0, tab));
    } else if (key == "finding") {
      FindingRecord f;
      std::istringstream fields{std::string(value)};
      std::string raw, min;
      std::getline(fields, f.key, '\t');
      std::getline(fields, raw, '\t');
      std::getline(fields, min, '\t');
      if (!raw.empty()) f.raw_actions = number(raw);
      if (!min.empty() && min != "-") f.min_actions = number(min);
      s.findings.push_back(std::move(f));
    }
  }
  return s;
}

CampaignSummary load_summary(const fs::path& campaign_dir) {
  return parse_summary(read_file(campaign_dir / "summary.txt"));
}

CoverageReport coverage_report(const CampaignSummary& summary) {
  CoverageReport out;
  for (const auto& check : kSecurityChecks) {
    const auto it = summary.aborts_per_check.find(std::string(check.id));
    if (it != summary.aborts_per_check.end() && it->second > 0) {
      out.hit.emplace_back(std::string(check.id), it->second);
    } else {
      out.missed.emplace_back(check.id);
    }
  }
  out.unknown = summary.unknown_aborts;
  return out;
}

std::string format_coverage(const CoverageReport& c) {
  std::ostringstream out;
  out << "checks hit: " << c.hit.size() << " of " << kSecurityChecks.size() << '\n';
  for (const auto& [id, n] : c.hit) out << "  hit    " << id << "  " << n << '\n';
  for (const auto& id : c.missed) out << "  missed " << id << '\n';
  for (const auto& [msg, n] : c.unknown) out << "  unknown " << n << "  " << msg << '\n';
  return out.str();
}

}  // namespace heapprobe
