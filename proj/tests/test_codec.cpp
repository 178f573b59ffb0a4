#include <gtest/gtest.h>

#include <random>

#include "heapprobe/codec.hpp"
#include "heapprobe/engine.hpp"
#include "support.hpp"

namespace heapprobe {
namespace {

using namespace heapprobe::test;

constexpr int kPropertyInputs = 10'000;

std::vector<std::uint8_t> random_bytes(std::mt19937_64& rng, std::size_t max_len = 512) {
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<int> byte(0, 255);
  std::vector<std::uint8_t> out(len(rng));
  for (auto& b : out) b = static_cast<std::uint8_t>(byte(rng));
  return out;
}

ModelSpec random_spec(std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.6);
  ModelSpec s;
  s.actions = {};
  s.bugs = {};
  s.impacts = {};
  s.size_groups = {};
  s.knowledge = {};
  do {
    for (auto k : kAllActions) {
      if (coin(rng)) s.actions.insert(k);
    }
    for (auto b : kAllBugs) {
      if (coin(rng)) s.bugs.insert(b);
    }
  } while (s.enabled_actions().empty());
  for (auto c : kAllImpacts) {
    if (coin(rng)) s.impacts.insert(c);
  }
  for (int g = 0; g < kSizeGroupCount; ++g) {
    if (coin(rng)) s.size_groups.insert(g);
  }
  for (auto r : kAllRoles) {
    if (coin(rng)) s.knowledge.insert(r);
  }
  if (coin(rng)) {
    std::uniform_int_distribution<std::uint64_t> size(0, 4096);
    for (int i = 0; i < 5; ++i) s.sizes.push_back(size(rng));
  }
  return s;
}

bool is_address_strategy(Strategy s) { return s >= Strategy::P1; }

std::optional<Role> role_of(Strategy s) {
  switch (s) {
    case Strategy::P2: return Role::Buffer;
    case Strategy::P3: return Role::Heap;
    case Strategy::P4: return Role::Container;
    default: return std::nullopt;
  }
}

// Every value an action carries, with whether it must be integer-typed.
std::vector<std::pair<Value, bool>> values_of(const Action& a) {
  std::vector<std::pair<Value, bool>> out;
  for (const auto& v : a.value_span()) {
    const bool integer = a.kind == ActionKind::Allocate;
    out.emplace_back(v, integer);
  }
  return out;
}

TEST(CodecExamples, EmptyInputDecodesToEmptyProgram) {
  EXPECT_TRUE(decode({}, ModelSpec{}).empty());
}

TEST(CodecExamples, TruncatedAllocateIsDropped) {
  const std::vector<std::uint8_t> bytes = {0x05};
  EXPECT_TRUE(decode(bytes, ModelSpec{}).empty());
}

TEST(CodecExamples, DeallocateOfChunkZero) {
  const std::vector<std::uint8_t> bytes = {0x01, 0x00};
  const auto program = decode(bytes, ModelSpec{});
  ASSERT_EQ(program.size(), 1u);
  EXPECT_EQ(program.actions[0].kind, ActionKind::Deallocate);
  EXPECT_EQ(program.actions[0].chunk, 0);
}

TEST(CodecExamples, EncodeEmptyAndSingleDeallocate) {
  EXPECT_TRUE(encode(std::span<const Action>{}, ModelSpec{}).empty());
  const std::vector<Action> one = {deallocate(0)};
  EXPECT_EQ(encode(one, ModelSpec{}), (std::vector<std::uint8_t>{0x01, 0x00}));
}

// Source holds the consumed prefix; a truncated trailing action is dropped.
TEST(CodecExamples, SourceBytesAreTheConsumedPrefix) {
  const std::vector<std::uint8_t> bytes = {0x01, 0x07, 0x01};
  const auto program = decode(bytes, ModelSpec{});
  EXPECT_EQ(program.source, (std::vector<std::uint8_t>{0x01, 0x07}));
  EXPECT_EQ(program.size(), 1u);
}

TEST(CodecExamples, KindSelectionWrapsOverEnabledActions) {
  ModelSpec spec;
  spec.actions = {ActionKind::Deallocate, ActionKind::BufferWrite};
  // 0 -> Deallocate, 1 -> BufferWrite, 2 -> Deallocate again.
  const std::vector<std::uint8_t> bytes = {0x02, 0x03};
  const auto program = decode(bytes, spec);
  ASSERT_EQ(program.size(), 1u);
  EXPECT_EQ(program.actions[0].kind, ActionKind::Deallocate);
  EXPECT_EQ(program.actions[0].chunk, 3);
}

TEST(CodecExamples, BufferOffsetIsWordAlignedAndInRange) {
  ModelSpec spec;
  spec.actions = {ActionKind::BufferWrite};
  // offset 0xffff, value block: P1 selector, shift mode none.
  const auto p1 = static_cast<std::uint8_t>(spec.enabled_strategies().size() - 4);
  const std::vector<std::uint8_t> bytes = {0x00, 0xff, 0xff, p1};
  const auto program = decode(bytes, spec);
  ASSERT_EQ(program.size(), 1u);
  const auto off = program.actions[0].buffer_offset;
  EXPECT_EQ(off % kWordSize, 0u);
  EXPECT_LE(off + kWordSize, kBufferSize);
  EXPECT_EQ(off, (0xffff % (kBufferSize - kWordSize)) & ~std::size_t{7});
}

TEST(CodecExamples, ActionCapStopsDecoding) {
  std::vector<std::uint8_t> bytes;
  for (int i = 0; i < 400; ++i) {
    bytes.push_back(0x01);
    bytes.push_back(0x00);
  }
  EXPECT_EQ(decode(bytes, ModelSpec{}).size(), kMaxActions);
  EXPECT_EQ(decode(bytes, ModelSpec{}, 10).size(), 10u);
}

TEST(CodecExamples, EncodeRejectsDisabledActionWithIndex) {
  ModelSpec spec;
  spec.actions.erase(ActionKind::Deallocate);
  const std::vector<Action> program = {allocate(32), deallocate(0)};
  try {
    encode(program, spec);
    FAIL() << "expected EncodeError";
  } catch (const EncodeError& e) {
    EXPECT_EQ(e.index(), 1u);
  }
}

TEST(CodecExamples, EncodeRejectsStrategyWithoutKnowledge) {
  ModelSpec spec;
  spec.knowledge.erase(Role::Buffer);
  const std::vector<Action> program = {allocate(32), heap_write(0, 0, address(Strategy::P2))};
  EXPECT_THROW(encode(program, spec), EncodeError);
}

TEST(SizeGroups, BoundariesArePowersOfThirtyTwo) {
  EXPECT_EQ(size_group(0).lo, 1u);
  EXPECT_EQ(size_group(0).hi, 32u);
  EXPECT_EQ(size_group(1).hi, 1024u);
  EXPECT_EQ(size_group(2).hi, 32768u);
  EXPECT_EQ(size_group(3).hi, std::uint64_t{1} << 20);
  EXPECT_EQ(size_group(4).lo, std::uint64_t{1} << 20);
  EXPECT_EQ(size_group(4).hi, (std::uint64_t{1} << 20) + 1);
  for (int g = 0; g + 1 < kSizeGroupCount; ++g) EXPECT_EQ(size_group(g).hi, size_group(g + 1).lo);
}

TEST(ConstantPool, MatchesDecidedValues) {
  const std::array<std::uint64_t, 16> expected = {
      0, 1, 8, 16, 24, 32, 64, 127, 128, 255, 256, 4096, 65536, 1048575,
      0xffffffffffffffffULL, 0xfffffffffffffff8ULL};
  EXPECT_EQ(kConstantPool, expected);
}

class Materialize : public ::testing::Test {
 protected:
  void SetUp() override {
    ctx.container = &layout;
    ctx.records = 2;
    ctx.buffer_base = 0x7000'0000'1000;
    ctx.container_base = 0x7000'0000'8000;
    ctx.knowledge = {Role::Heap, Role::Buffer, Role::Container};
    layout.base[0] = 0x5555'0000'0010;
    layout.request[0] = 20;
    layout.usable[0] = 24;
    layout.base[1] = 0x5555'0000'0030;
    layout.request[1] = 100;
    layout.usable[1] = 104;
  }
  ContainerLayout layout{};
  ExecutionContext ctx;
};

TEST_F(Materialize, NullStrategyIsZero) { EXPECT_EQ(materialize_value(address(Strategy::P1), ctx), 0u); }

TEST_F(Materialize, GroupTwoOffsetZeroIs1024) {
  Value v;
  v.strategy = Strategy::I3;
  v.arg = 2;
  EXPECT_EQ(materialize_value(v, ctx), 1024u);
}

TEST_F(Materialize, UsableSizeWithLinearTransform) {
  EXPECT_EQ(materialize_value(chunk_size(Strategy::I5, 0, 2, 8), ctx), 56u);
}

TEST_F(Materialize, RequestSizeIndexWrapsOverRecords) {
  EXPECT_EQ(materialize_value(chunk_size(Strategy::I4, 3), ctx), 100u);
}

TEST_F(Materialize, AddressStrategiesUseTheirRole) {
  EXPECT_EQ(materialize_value(address(Strategy::P2, 16), ctx), ctx.buffer_base + 16);
  EXPECT_EQ(materialize_value(address(Strategy::P4, -16), ctx), ctx.container_base - 16);
  EXPECT_EQ(materialize_value(address(Strategy::P3), ctx), layout.base[1]);
}

TEST_F(Materialize, AddressDifference) {
  Value v;
  v.strategy = Strategy::I2;
  v.lhs = Role::Container;
  v.rhs = Role::Buffer;
  EXPECT_EQ(materialize_value(v, ctx), ctx.container_base - ctx.buffer_base);
}

TEST_F(Materialize, EmptyContainerFallsBackToZero) {
  ctx.records = 0;
  EXPECT_EQ(materialize_value(chunk_size(Strategy::I4, 0, 3, 8), ctx), 0u);
  EXPECT_EQ(materialize_value(chunk_size(Strategy::I5, 1), ctx), 0u);
  EXPECT_EQ(materialize_value(address(Strategy::P3, 64), ctx), 0u);
}

TEST_F(Materialize, ExplicitSizePool) {
  const std::array<std::uint64_t, 3> sizes = {40, 56, 72};
  ctx.explicit_sizes = sizes;
  Value v;
  v.strategy = Strategy::I3;
  v.arg = kExplicitSizePool;
  v.offset = 4;
  EXPECT_EQ(materialize_value(v, ctx), 56u);
}

TEST(CodecProperties, DecodeIsDeterministic) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < kPropertyInputs; ++i) {
    const auto spec = random_spec(rng);
    const auto bytes = random_bytes(rng);
    const auto a = decode(bytes, spec);
    const auto b = decode(bytes, spec);
    ASSERT_EQ(a.actions, b.actions);
  }
}

TEST(CodecProperties, EncodeRoundTrips) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < kPropertyInputs; ++i) {
    const auto spec = random_spec(rng);
    const auto program = decode(random_bytes(rng), spec);
    const auto bytes = encode(program, spec);
    const auto again = decode(bytes, spec);
    ASSERT_EQ(again.actions, program.actions) << "input " << i;
    ASSERT_EQ(encode(again, spec), bytes);
  }
}

TEST(CodecProperties, DecodedProgramsRespectTheSpec) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < kPropertyInputs; ++i) {
    const auto spec = random_spec(rng);
    const auto program = decode(random_bytes(rng), spec);
    ASSERT_LE(program.size(), kMaxActions);
    for (const auto& a : program.actions) {
      ASSERT_TRUE(spec.actions.contains(a.kind));
      if (a.kind == ActionKind::BugInvoke) ASSERT_TRUE(spec.bugs.contains(a.bug));
      if (a.kind == ActionKind::HeapWrite || a.bug == BugKind::WriteAfterFree) ASSERT_LT(a.slot, kSlotCount);
      for (const auto& [v, integer] : values_of(a)) {
        if (integer) ASSERT_FALSE(is_address_strategy(v.strategy));
        if (a.kind == ActionKind::BugInvoke && a.bug == BugKind::ArbitraryFree) {
          ASSERT_TRUE(is_address_strategy(v.strategy));
        }
        if (auto role = role_of(v.strategy)) ASSERT_TRUE(spec.knowledge.contains(*role));
        if (v.strategy == Strategy::I2) {
          ASSERT_NE(v.lhs, v.rhs);
          ASSERT_TRUE(spec.knowledge.contains(v.lhs));
          ASSERT_TRUE(spec.knowledge.contains(v.rhs));
        }
        if (v.strategy == Strategy::I3 && v.arg != kExplicitSizePool) {
          ASSERT_TRUE(spec.size_groups.contains(v.arg));
        }
        if (v.strategy == Strategy::I3 && v.arg == kExplicitSizePool) ASSERT_FALSE(spec.sizes.empty());
        // Linear transforms only on integer strategies; address strategies shift or nothing.
        if (v.transform.kind == TransformKind::Linear) {
          ASSERT_TRUE(v.strategy == Strategy::I4 || v.strategy == Strategy::I5);
        }
        if (v.strategy == Strategy::I1 || v.strategy == Strategy::I3 || v.strategy == Strategy::P1) {
          ASSERT_EQ(v.transform.kind, TransformKind::None);
        }
        ASSERT_EQ(v.transform.offset % static_cast<std::int32_t>(kWordSize), 0);
      }
    }
  }
}

TEST(CodecProperties, AddressValuesAreWordAligned) {
  std::mt19937_64 rng(4);
  ContainerLayout layout{};
  std::uniform_int_distribution<std::uint64_t> any;
  for (int i = 0; i < kPropertyInputs; ++i) {
    const auto spec = random_spec(rng);
    ExecutionContext ctx;
    ctx.container = &layout;
    ctx.records = 1 + static_cast<std::size_t>(any(rng) % 8);
    for (std::size_t j = 0; j < ctx.records; ++j) layout.base[j] = any(rng);
    ctx.buffer_base = any(rng);
    ctx.container_base = any(rng);
    ctx.knowledge = spec.knowledge;
    for (const auto& a : decode(random_bytes(rng), spec).actions) {
      for (const auto& v : a.value_span()) {
        if (!is_address_strategy(v.strategy) && v.strategy != Strategy::I2) continue;
        ASSERT_EQ(materialize_value(v, ctx) % kWordSize, 0u) << describe(v);
      }
    }
  }
}

TEST(CodecProperties, EverySizeGroupIsReachable) {
  std::mt19937_64 rng(5);
  std::array<bool, kSizeGroupCount> seen{};
  const ModelSpec spec;
  for (int i = 0; i < kPropertyInputs; ++i) {
    for (const auto& a : decode(random_bytes(rng), spec).actions) {
      if (a.kind == ActionKind::Allocate && a.values[0].strategy == Strategy::I3) {
        seen.at(a.values[0].arg) = true;
      }
    }
  }
  for (int g = 0; g < kSizeGroupCount; ++g) EXPECT_TRUE(seen[g]) << "group " << g;
}

TEST(CodecProperties, PrefixOfInputDecodesToPrefixOfProgram) {
  std::mt19937_64 rng(6);
  const ModelSpec spec;
  for (int i = 0; i < 1000; ++i) {
    const auto bytes = random_bytes(rng);
    const auto full = decode(bytes, spec);
    const auto cut = bytes.size() / 2;
    const auto part = decode(std::span(bytes).first(cut), spec);
    ASSERT_LE(part.size(), full.size());
    for (std::size_t k = 0; k < part.size(); ++k) ASSERT_EQ(part.actions[k], full.actions[k]);
  }
}

}  // namespace
}  // namespace heapprobe
