#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "heapprobe/abort_catalog.hpp"
#include "heapprobe/campaign.hpp"
#include "heapprobe/minimizer.hpp"
#include "heapprobe/report.hpp"
#include "support.hpp"

namespace heapprobe {
namespace {

using namespace test;
namespace fs = std::filesystem;

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

CampaignConfig small_campaign(const std::string& target, const fs::path& out, std::uint64_t execs) {
  CampaignConfig c;
  c.target = TargetSpec::parse(target);
  c.out = out;
  c.seed = 0x1234;
  c.budget = std::chrono::minutes(10);
  c.max_execs = execs;
  c.minimize = false;
  c.emit_poc = false;
  return c;
}

TEST(ModelSpecText, ParsesCommentsWildcardsAndLists) {
  const auto spec = parse_model_spec(
      "# campaign restrictions\n"
      "actions = allocate, deallocate, bug\n"
      "bugs = FF\n"
      "impacts = *\n"
      "size_groups = 0,1\n"
      "sizes = 24, 4096\n"
      "knowledge = BA   # buffer only\n");
  EXPECT_EQ(spec.actions, (EnumSet<ActionKind>{ActionKind::Allocate, ActionKind::Deallocate,
                                               ActionKind::BugInvoke}));
  EXPECT_EQ(spec.bugs, EnumSet<BugKind>{BugKind::DoubleFree});
  EXPECT_EQ(spec.impacts, ModelSpec{}.impacts);
  EXPECT_EQ(spec.size_groups, (EnumSet<int>{0, 1}));
  EXPECT_EQ(spec.sizes, (std::vector<std::uint64_t>{24, 4096}));
  EXPECT_EQ(spec.knowledge, KnowledgeSet{Role::Buffer});
  EXPECT_EQ(parse_inline_spec(spec.to_inline()), spec);
  EXPECT_EQ(parse_model_spec(""), ModelSpec{});
}

TEST(ModelSpecText, RejectsUnknownKeysAndValues) {
  EXPECT_THROW(parse_model_spec("colour = red\n"), SpecError);
  EXPECT_THROW(parse_model_spec("bugs = UAF\n"), SpecError);
  EXPECT_THROW(parse_model_spec("size_groups = 5\n"), SpecError);
  ModelSpec empty;
  empty.actions = {};
  EXPECT_THROW(empty.validate(), SpecError);
}

TEST(AbortCatalog, ClassifiesByLongestPrefix) {
  EXPECT_EQ(classify_abort("free(): invalid pointer"), "SP3");
  EXPECT_EQ(classify_abort("double free or corruption (fasttop)"), "F2");
  EXPECT_EQ(classify_abort("corrupted double-linked list (not small)"), "D2");
  EXPECT_EQ(classify_abort("corrupted double-linked list"), "D1");
  EXPECT_FALSE(classify_abort("free(): double free detected in tcache 2"));
  EXPECT_FALSE(classify_abort(""));
}

TEST(AbortCatalog, NormalizesDecoratedMessages) {
  EXPECT_EQ(normalize_abort_message("*** Error in `./a.out': free(): invalid pointer: 0x0000000001c3e010 ***"),
            "free(): invalid pointer");
  EXPECT_EQ(normalize_abort_message("  malloc(): memory corruption\n"), "malloc(): memory corruption");
  EXPECT_EQ(normalize_abort_message("free(): invalid size"), "free(): invalid size");
}

TEST(Reports, SerializeRoundTrips) {
  ImpactReport r;
  r.outcome = OutcomeKind::Crash;
  ImpactEvent e;
  e.action_index = 7;
  e.impact = ImpactClass::RestrictedWrite;
  e.site = Site::Container;
  e.trigger = ActionKind::Deallocate;
  e.has_bug = true;
  e.bug = BugKind::Overflow;
  r.events = {e, e};
  r.events[1].site = Site::Buffer;
  r.primary = e;
  r.log = {{StepStatus::Executed, 0}, {StepStatus::Skipped, 1}, {StepStatus::Failed, 1}};
  r.trace = {0x00, 0xff, 0x10};
  r.salt = 0xdeadbeef;
  r.target = "bundled:checked";
  r.spec = ModelSpec{}.to_inline();
  r.message = "corrupted double-linked list";
  r.check_id = "D1";
  r.signal = 4;
  EXPECT_EQ(parse_report(serialize(r)), r);
  EXPECT_EQ(format_event(e), "7,RW,container,deallocate,OF");
  EXPECT_EQ(parse_event(format_event(e)), e);
  EXPECT_EQ(format_log(r.log), "E0 S1 F1");
  EXPECT_EQ(parse_log("E0 S1 F1"), r.log);
  EXPECT_EQ(from_hex(to_hex(r.trace)), r.trace);
}

TEST(Inputs, AreDeterministicAndBounded) {
  std::set<Word> salts;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto a = generate_input(5, i);
    EXPECT_EQ(a, generate_input(5, i));
    EXPECT_GE(a.size(), 8u);
    EXPECT_LE(a.size(), 1024u);
    salts.insert(derive_salt(5, i));
  }
  EXPECT_EQ(salts.size(), 1000u);
  EXPECT_NE(generate_input(5, 0), generate_input(6, 0));
}

TEST(Inputs, DedupKeyNamesImpactSiteBugAndTrigger) {
  ImpactEvent e;
  e.impact = ImpactClass::ArbitraryWrite;
  e.site = Site::Buffer;
  e.trigger = ActionKind::HeapWrite;
  EXPECT_EQ(dedup_key(e), "AW-buffer-none-heap_write");
  e.has_bug = true;
  e.bug = BugKind::WriteAfterFree;
  EXPECT_EQ(dedup_key(e), "AW-buffer-WF-heap_write");
}

TEST(Coverage, EmptyCampaignMissesEveryCheck) {
  const auto cov = coverage_report(CampaignSummary{});
  EXPECT_TRUE(cov.hit.empty());
  EXPECT_EQ(cov.missed.size(), kSecurityChecks.size());
  EXPECT_TRUE(cov.unknown.empty());
  EXPECT_FALSE(format_coverage(cov).empty());
}

TEST(Coverage, CountsKnownAndUnknownAborts) {
  CampaignSummary s;
  s.aborts_per_check = {{"F2", 3}, {"D1", 1}};
  s.unknown_aborts = {{"free(): double free detected in tcache 2", 2}};
  const auto cov = coverage_report(s);
  ASSERT_EQ(cov.hit.size(), 2u);
  EXPECT_EQ(cov.hit[0], (std::pair<std::string, std::uint64_t>{"D1", 1}));
  EXPECT_EQ(cov.hit[1], (std::pair<std::string, std::uint64_t>{"F2", 3}));
  EXPECT_EQ(cov.missed.size(), kSecurityChecks.size() - 2);
  EXPECT_EQ(cov.unknown.size(), 1u);
}

TEST(WriteAtomic, LeavesOnlyTheFinalFile) {
  TempDir dir;
  write_atomic(dir.path() / "x.txt", "hello");
  write_atomic(dir.path() / "x.txt", "again");
  EXPECT_EQ(read_text(dir.path() / "x.txt"), "again");
  EXPECT_EQ(std::distance(fs::directory_iterator(dir.path()), fs::directory_iterator()), 1);
}

// Every execution lands in exactly one bucket, every saved finding has its
// own key, and crashes never produce finding directories.
TEST(Campaign, AccountsForEveryExecution) {
  TempDir dir;
  const auto s = fuzz(small_campaign("bundled:checked", dir.path(), 300));
  EXPECT_EQ(s.executions, 300u);
  EXPECT_EQ(s.executions, s.no_impact + s.finding_executions + s.crashes + s.timeouts);
  std::uint64_t classified = 0;
  for (const auto& [id, n] : s.aborts_per_check) classified += n;
  for (const auto& [msg, n] : s.unknown_aborts) classified += n;
  EXPECT_LE(classified, s.crashes);
  EXPECT_GT(s.crashes, 0u);

  std::set<std::string> keys;
  std::uint64_t per_class = 0;
  for (const auto& [c, n] : s.findings_per_class) per_class += n;
  EXPECT_EQ(per_class, s.findings.size());
  for (const auto& f : s.findings) {
    EXPECT_TRUE(keys.insert(f.key).second);
    EXPECT_EQ(f.key, dedup_key(*f.report.primary));
    EXPECT_EQ(f.report.outcome, OutcomeKind::Finding);
    EXPECT_TRUE(fs::exists(f.dir / "report.txt"));
    EXPECT_TRUE(fs::exists(f.dir / "trace.bin"));
  }
  EXPECT_LE(s.findings.size(), s.finding_executions);
  std::size_t dirs = 0;
  for (const auto& entry : fs::directory_iterator(dir.path() / "findings")) {
    EXPECT_FALSE(entry.path().filename().string().starts_with(".tmp-"));
    ++dirs;
  }
  EXPECT_EQ(dirs, s.findings.size());

  const auto loaded = load_summary(dir.path());
  EXPECT_TRUE(loaded.same_counters(s));
  EXPECT_EQ(loaded.findings.size(), s.findings.size());
}

TEST(Campaign, SameSeedSameCounters) {
  TempDir a, b;
  const auto x = fuzz(small_campaign("bundled:unsafe-unlink", a.path(), 120));
  const auto y = fuzz(small_campaign("bundled:unsafe-unlink", b.path(), 120));
  EXPECT_TRUE(x.same_counters(y));
  ASSERT_EQ(x.findings.size(), y.findings.size());
  for (std::size_t i = 0; i < x.findings.size(); ++i) {
    EXPECT_EQ(x.findings[i].key, y.findings[i].key);
    EXPECT_EQ(x.findings[i].report, y.findings[i].report);
  }
}

TEST(Campaign, KeepDuplicatesSavesEveryFinding) {
  TempDir dir;
  auto config = small_campaign("bundled:unsafe-unlink", dir.path(), 120);
  config.keep_duplicates = true;
  const auto s = fuzz(config);
  EXPECT_EQ(s.findings.size(), s.finding_executions);
}

TEST(Campaign, ReadsInputsFromADirectory) {
  TempDir inputs, out;
  const ModelSpec spec;
  write_file(inputs.path() / "a.bin", encode(unlink_script(true), spec));
  write_file(inputs.path() / "b.bin", std::vector<std::uint8_t>{});
  write_file(inputs.path() / ".partial", encode(unlink_script(true), spec));
  auto config = small_campaign("bundled:unsafe-unlink", out.path(), 2);
  config.input_dir = inputs.path();
  config.minimize = true;
  config.emit_poc = true;
  const auto s = fuzz(config);
  EXPECT_EQ(s.executions, 2u);
  EXPECT_EQ(s.no_impact, 1u);
  ASSERT_EQ(s.findings.size(), 1u);
  const auto& f = s.findings[0];
  EXPECT_EQ(f.raw_actions, unlink_script(true).size());
  ASSERT_TRUE(f.min_actions);
  EXPECT_LE(*f.min_actions, f.raw_actions);
  EXPECT_TRUE(fs::exists(f.dir / "min_trace.bin"));
  EXPECT_TRUE(fs::exists(f.dir / "poc.c"));
  EXPECT_EQ(impact_key(*f.min_report), impact_key(f.report));
}

TEST(Campaign, StopsOnRequestedClass) {
  TempDir inputs, out;
  const ModelSpec spec;
  for (int i = 0; i < 5; ++i) {
    write_file(inputs.path() / ("t" + std::to_string(i)), encode(unlink_script(true), spec));
  }
  auto config = small_campaign("bundled:unsafe-unlink", out.path(), 100);
  config.input_dir = inputs.path();
  config.stop_on = {ImpactClass::RestrictedWrite};
  const auto s = fuzz(config);
  EXPECT_EQ(s.findings.size(), 1u);
  EXPECT_EQ(s.executions, 1u);
}

TEST(Campaign, MissingInputDirectoryOrZeroBudgetFails) {
  TempDir out;
  auto config = small_campaign("bundled:page", out.path(), 10);
  config.input_dir = out.path() / "missing";
  EXPECT_THROW(fuzz(config), CampaignError);
  config.input_dir.reset();
  config.budget = std::chrono::milliseconds(0);
  EXPECT_THROW(fuzz(config), CampaignError);
}

TEST(CommandLine, FuzzReplayAndCoverage) {
  TempDir dir;
  const auto out = dir.path() / "campaign";
  const std::string cli = HEAPPROBE_CLI;
  ASSERT_EQ(std::system((cli + " fuzz --target bundled:checked --max-execs 40 --seed 9 --workers 1 --no-poc --out " +
                         out.string() + " > /dev/null 2>&1")
                            .c_str()),
            0);
  const auto summary = load_summary(out);
  EXPECT_EQ(summary.executions, 40u);
  EXPECT_EQ(summary.seed, 9u);
  ASSERT_EQ(std::system((cli + " coverage " + out.string() + " > " + (dir.path() / "cov.txt").string()).c_str()), 0);
  EXPECT_FALSE(read_text(dir.path() / "cov.txt").empty());
  // Replaying a saved finding prints the same report.
  for (const auto& f : summary.findings) {
    const auto saved = out / "findings" / f.key / "report.txt";
    const auto again = dir.path() / "replay.txt";
    ASSERT_EQ(std::system((cli + " replay --report " + saved.string() + " > " + again.string()).c_str()), 0);
    EXPECT_EQ(parse_report(read_text(again)), load_report(saved.string())) << f.key;
  }
  EXPECT_NE(std::system((cli + " fuzz --target jemalloc --out " + out.string() + " 2> /dev/null").c_str()), 0);
}

}  // namespace
}  // namespace heapprobe
