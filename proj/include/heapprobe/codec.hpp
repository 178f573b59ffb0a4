#pragma once

// Byte-level codec that turns fuzzer output into heap action traces.
//
// Layout of one action (all multi-byte fields little-endian):
//
//   kind      1 byte, index into the spec's enabled actions
//   Allocate    value block (integer strategies only)
//   Deallocate  chunk byte
//   HeapWrite   chunk byte, slot byte (mod 16), value block
//   BufferWrite offset u16 (mod buffer_size - 8, low 3 bits cleared),
//               value block
//   BugInvoke   bug byte (index into enabled bugs), then per bug:
//                 OF   chunk byte, count byte (1 + c mod 8), count blocks
//                 WF   chunk byte, slot byte, value block
//                 AF   value block (address strategies only)
//                 FF   chunk byte
//                 O1   chunk byte, value block
//                 O1N  chunk byte
//
// A value block is a selector byte over the enabled strategies followed by
// strategy parameters and, for strategies that carry one, a transform:
//
//   I1  constant index byte             (no transform)
//   I2  role-pair byte                  shift transform
//   I3  pool byte, offset u16           (no transform)
//   I4  chunk byte                      linear transform
//   I5  chunk byte                      linear transform
//   P1  -                               (no transform)
//   P2..P4  -                           shift transform
//
// Shift transform: mode byte (mod 2: none, shift) then b as a signed byte.
// Linear transform: mode byte (mod 3: none, linear, shift); linear carries
// an `a` byte (index into {1,2,3,4,8}) then b; shift carries b only.
// b is scaled by the word size.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "heapprobe/model_spec.hpp"
#include "heapprobe/types.hpp"

namespace heapprobe {

inline constexpr int kCodecVersion = 1;
inline constexpr std::size_t kBufferSize = 4096;
inline constexpr std::size_t kSlotCount = 16;
inline constexpr std::size_t kMaxOverflowWords = 8;

inline constexpr std::array<std::uint64_t, 16> kConstantPool = {
    0,    1,    8,       16,          24,
    32,   64,   127,     128,         255,
    256,  4096, 1u << 16, (1u << 20) - 1, ~std::uint64_t{0},
    ~std::uint64_t{0} - 7};

inline constexpr std::array<std::uint8_t, 5> kLinearMultipliers = {1, 2, 3, 4,
                                                                   8};

/// Size groups are half-open [lo, hi). Boundaries at 2^0, 2^5, 2^10, 2^15,
/// 2^20; the last group holds exactly 2^20.
struct SizeGroup {
  std::uint64_t lo;
  std::uint64_t hi;
};

SizeGroup size_group(int index);

/// Index of the explicit-size pool in I3's pool numbering (after groups).
inline constexpr std::uint8_t kExplicitSizePool = kSizeGroupCount;

enum class TransformKind : std::uint8_t { None, Linear, Shift };

struct Transform {
  TransformKind kind = TransformKind::None;
  std::uint8_t mult = 1;     // Linear only
  std::int32_t offset = 0;   // bytes, multiple of the word size

  bool operator==(const Transform&) const = default;
};

struct Value {
  Strategy strategy = Strategy::P1;
  std::uint8_t arg = 0;       // I1 constant index, I3 pool, I4/I5 chunk byte
  Role lhs = Role::Heap;      // I2
  Role rhs = Role::Buffer;    // I2
  std::uint16_t offset = 0;   // I3
  Transform transform;

  bool operator==(const Value&) const = default;
};

/// One heap action with symbolic parameters. Trivially copyable so a trace
/// can be moved into memory the engine owns before execution.
struct Action {
  ActionKind kind = ActionKind::Allocate;
  BugKind bug = BugKind::Overflow;  // BugInvoke only
  std::uint8_t chunk = 0;           // raw byte, reduced at execution time
  std::uint8_t slot = 0;            // HeapWrite / WF
  std::uint16_t buffer_offset = 0;  // BufferWrite
  std::uint8_t value_count = 0;
  std::array<Value, kMaxOverflowWords> values{};

  bool operator==(const Action&) const = default;

  std::span<const Value> value_span() const {
    return {values.data(), value_count};
  }
};

struct TraceProgram {
  std::vector<Action> actions;
  std::vector<std::uint8_t> source;

  std::size_t size() const { return actions.size(); }
  bool empty() const { return actions.empty(); }
};

class EncodeError : public std::runtime_error {
 public:
  EncodeError(std::size_t index, const std::string& what)
      : std::runtime_error("action " + std::to_string(index) + ": " + what),
        index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

/// Total function: malformed or truncated suffixes are dropped.
TraceProgram decode(std::span<const std::uint8_t> bytes, const ModelSpec& spec,
                    std::size_t max_actions = kMaxActions);

/// Inverse of decode on decoded programs. Throws EncodeError when an action
/// uses something the spec disables.
std::vector<std::uint8_t> encode(std::span<const Action> actions,
                                 const ModelSpec& spec);

inline std::vector<std::uint8_t> encode(const TraceProgram& program,
                                        const ModelSpec& spec) {
  return encode(program.actions, spec);
}

/// Ordered role pairs (lhs != rhs) available to I2 under `knowledge`.
std::vector<std::pair<Role, Role>> role_pairs(KnowledgeSet knowledge);

/// I3 pools available under `spec`: enabled size groups in index order,
/// then kExplicitSizePool when an explicit size list is present.
std::vector<std::uint8_t> size_pools(const ModelSpec& spec);

/// Human-readable one-line rendering, for logs and reports.
std::string describe(const Action& action);
std::string describe(const Value& value);

}  // namespace heapprobe
