#pragma once

#include <array>
#include <initializer_list>
#include <cstdint>
#include <optional>
#include <string_view>

namespace heapprobe {

using Word = std::uint64_t;

inline constexpr std::size_t kWordSize = sizeof(Word);

/// Hard upper bound on actions per trace; also the heap container capacity.
inline constexpr std::size_t kMaxActions = 256;

enum class ActionKind : std::uint8_t {
  Allocate,
  Deallocate,
  HeapWrite,
  BufferWrite,
  BugInvoke,
};

inline constexpr std::array<ActionKind, 5> kAllActions = {
    ActionKind::Allocate, ActionKind::Deallocate, ActionKind::HeapWrite,
    ActionKind::BufferWrite, ActionKind::BugInvoke};

enum class BugKind : std::uint8_t {
  Overflow,        // OF
  WriteAfterFree,  // WF
  ArbitraryFree,   // AF
  DoubleFree,      // FF
  OffByOne,        // O1
  OffByOneNull,    // O1N
};

inline constexpr std::array<BugKind, 6> kAllBugs = {
    BugKind::Overflow, BugKind::WriteAfterFree, BugKind::ArbitraryFree,
    BugKind::DoubleFree, BugKind::OffByOne, BugKind::OffByOneNull};

/// Value-generation strategies. I* produce integers, P* produce addresses.
enum class Strategy : std::uint8_t { I1, I2, I3, I4, I5, P1, P2, P3, P4 };

inline constexpr std::array<Strategy, 9> kAllStrategies = {
    Strategy::I1, Strategy::I2, Strategy::I3, Strategy::I4, Strategy::I5,
    Strategy::P1, Strategy::P2, Strategy::P3, Strategy::P4};

/// Addresses an attacker may know.
enum class Role : std::uint8_t { Heap, Buffer, Container };

inline constexpr std::array<Role, 3> kAllRoles = {Role::Heap, Role::Buffer,
                                                  Role::Container};

enum class ImpactClass : std::uint8_t {
  ArbitraryChunk,    // AC
  OverlappingChunk,  // OC
  ArbitraryWrite,    // AW
  RestrictedWrite,   // RW
};

inline constexpr std::array<ImpactClass, 4> kAllImpacts = {
    ImpactClass::ArbitraryChunk, ImpactClass::OverlappingChunk,
    ImpactClass::ArbitraryWrite, ImpactClass::RestrictedWrite};

enum class Site : std::uint8_t { None, Container, Buffer };

/// Small bitset over an enum whose values are dense from zero.
template <typename E>
class EnumSet {
 public:
  constexpr EnumSet() = default;
  constexpr EnumSet(std::initializer_list<E> items) {
    for (E e : items) insert(e);
  }

  constexpr void insert(E e) { bits_ |= bit(e); }
  constexpr void erase(E e) { bits_ &= ~bit(e); }
  constexpr bool contains(E e) const { return (bits_ & bit(e)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint32_t bits() const { return bits_; }

  friend constexpr bool operator==(EnumSet, EnumSet) = default;

 private:
  static constexpr std::uint32_t bit(E e) {
    return std::uint32_t{1} << static_cast<unsigned>(e);
  }
  std::uint32_t bits_ = 0;
};

using KnowledgeSet = EnumSet<Role>;

std::string_view name(ActionKind k);
std::string_view name(BugKind k);
std::string_view name(Strategy s);
std::string_view name(Role r);
std::string_view name(ImpactClass c);
std::string_view name(Site s);

std::optional<ActionKind> parse_action_kind(std::string_view text);
std::optional<BugKind> parse_bug_kind(std::string_view text);
std::optional<ImpactClass> parse_impact(std::string_view text);
std::optional<Site> parse_site(std::string_view text);
std::optional<Role> parse_role(std::string_view text);

constexpr bool is_address_typed(Strategy s) {
  return s == Strategy::P1 || s == Strategy::P2 || s == Strategy::P3 ||
         s == Strategy::P4;
}

/// Knowledge needed before a strategy may be generated (I2 is special-cased:
/// it needs two distinct known roles).
constexpr std::optional<Role> required_role(Strategy s) {
  switch (s) {
    case Strategy::P2: return Role::Buffer;
    case Strategy::P3: return Role::Heap;
    case Strategy::P4: return Role::Container;
    default: return std::nullopt;
  }
}

/// Severity rank used to pick a report's primary class; higher wins.
constexpr int severity(ImpactClass c) {
  switch (c) {
    case ImpactClass::ArbitraryChunk: return 4;
    case ImpactClass::ArbitraryWrite: return 3;
    case ImpactClass::OverlappingChunk: return 2;
    case ImpactClass::RestrictedWrite: return 1;
  }
  return 0;
}

}  // namespace heapprobe
