#include <gtest/gtest.h>

#include <regex>

#include "heapprobe/poc.hpp"
#include "heapprobe/runner.hpp"
#include "support.hpp"

namespace heapprobe {
namespace {

using namespace test;

struct Replayed {
  TraceProgram program;
  ImpactReport report;
};

Replayed replay(const std::string& target, const std::vector<Action>& actions, Word salt,
                const ModelSpec& spec = ModelSpec{}) {
  Runner runner(runner_config(target, spec));
  const auto bytes = encode(actions, spec);
  return {decode(bytes, spec), runner.run(bytes, salt)};
}

std::vector<Action> double_free_overlap() {
  return {allocate(24), deallocate(0), bug(BugKind::DoubleFree, 0), allocate(24), allocate(24)};
}

TEST(TraceHash, IsFnv1a64) {
  EXPECT_EQ(trace_hash({}), "cbf29ce484222325");
  const std::vector<std::uint8_t> a = {'a'};
  EXPECT_EQ(trace_hash(a), "af63dc4c8601ec8c");
}

TEST(EmitPoc, RefusesReportsWithoutImpact) {
  const auto r = replay("bundled:unsafe-unlink", {allocate(32), deallocate(0)}, 1);
  ASSERT_FALSE(r.report.primary);
  EXPECT_THROW(emit_poc(r.program, r.report, resolve_poc_target(TargetSpec::parse("bundled:unsafe-unlink"))),
               PocError);
}

TEST(EmitPoc, NamesTheFileAfterTargetImpactAndTrace) {
  const auto r = replay("bundled:unsafe-unlink", unlink_script(true), 1);
  ASSERT_TRUE(r.report.primary);
  const auto poc = emit_poc(r.program, r.report, resolve_poc_target(TargetSpec::parse("bundled:unsafe-unlink")));
  EXPECT_EQ(poc.file_name, "unsafe-unlink_" + std::string(name(r.report.primary->impact)) + "_" +
                               trace_hash(r.program.source) + ".c");
  EXPECT_EQ(poc.trace_hash, trace_hash(r.program.source));
  EXPECT_EQ(poc.asserted, (ImpactKey{r.report.primary->impact, r.report.primary->site}));
}

TEST(EmitPoc, RendersActionsAsPlainCalls) {
  const auto r = replay("bundled:unsafe-unlink", unlink_script(true), 1);
  const auto poc = emit_poc(r.program, r.report, resolve_poc_target(TargetSpec::parse("bundled:unsafe-unlink")));
  EXPECT_NE(poc.source.find("  p[0] = malloc(128);\n"), std::string::npos) << poc.source;
  EXPECT_NE(poc.source.find("  p[1] = malloc(248);\n"), std::string::npos);
  EXPECT_NE(poc.source.find("free(p[1]);"), std::string::npos);
  EXPECT_NE(poc.source.find("VULNERABILITY"), std::string::npos);
}

TEST(EmitPoc, NullPointerValueRendersAsZero) {
  const std::vector<Action> trace = {allocate(32), heap_write(0, 0, address(Strategy::P1)),
                                     allocate(24), deallocate(1), bug(BugKind::DoubleFree, 1),
                                     allocate(24), allocate(24)};
  const auto r = replay("bundled:unsafe-unlink", trace, 1);
  ASSERT_TRUE(r.report.primary);
  const auto poc = emit_poc(r.program, r.report, resolve_poc_target(TargetSpec::parse("bundled:unsafe-unlink")));
  EXPECT_TRUE(std::regex_search(poc.source, std::regex(R"(store64\(AT\(p\[0\], 0\), 0\);)"))) << poc.source;
}

TEST(EmitPoc, SourceIsDeterministicAndLayoutIndependent) {
  const auto target = resolve_poc_target(TargetSpec::parse("bundled:unsafe-unlink"));
  const auto a = replay("bundled:unsafe-unlink", unlink_script(true), 1);
  const auto b = replay("bundled:unsafe-unlink", unlink_script(true), 99);
  EXPECT_EQ(emit_poc(a.program, a.report, target).source, emit_poc(a.program, a.report, target).source);
  EXPECT_EQ(emit_poc(a.program, a.report, target).source, emit_poc(b.program, b.report, target).source);
}

TEST(EmitPoc, ActionsAfterTheImpactAreNotEmitted) {
  auto trace = double_free_overlap();
  trace.push_back(allocate(4000));
  const auto r = replay("bundled:unsafe-unlink", trace, 1);
  ASSERT_TRUE(r.report.primary);
  ASSERT_EQ(r.report.primary->action_index, 4);
  const auto poc = emit_poc(r.program, r.report, resolve_poc_target(TargetSpec::parse("bundled:unsafe-unlink")));
  EXPECT_EQ(poc.source.find("malloc(4000)"), std::string::npos);
}

// Compile the program and run it against the same allocator.
TEST(CheckPoc, ReproducesFindingsWhenCompiledAndRun) {
  struct Case {
    std::vector<Action> trace;
    ImpactClass impact;
  };
  const std::vector<Case> cases = {{unlink_script(true), ImpactClass::RestrictedWrite},
                                   {double_free_overlap(), ImpactClass::OverlappingChunk}};
  for (const auto& c : cases) {
    const auto r = replay("bundled:unsafe-unlink", c.trace, 1);
    ASSERT_TRUE(r.report.primary);
    EXPECT_EQ(r.report.primary->impact, c.impact);
    const auto target = resolve_poc_target(TargetSpec::parse("bundled:unsafe-unlink"));
    const auto poc = emit_poc(r.program, r.report, target);
    TempDir dir;
    const auto check = check_poc(poc, target, dir.path());
    EXPECT_TRUE(check.compiled) << check.compiler_output;
    EXPECT_EQ(check.exit_status, 0) << poc.source;
  }
}

TEST(CheckPoc, CompilerFailureIsReported) {
  const auto r = replay("bundled:unsafe-unlink", unlink_script(true), 1);
  const auto target = resolve_poc_target(TargetSpec::parse("bundled:unsafe-unlink"));
  auto poc = emit_poc(r.program, r.report, target);
  poc.source += "\nthis is not C\n";
  TempDir dir;
  const auto check = check_poc(poc, target, dir.path());
  EXPECT_FALSE(check.compiled);
  EXPECT_FALSE(check.compiler_output.empty());
}

}  // namespace
}  // namespace heapprobe
