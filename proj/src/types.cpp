#include "heapprobe/types.hpp"

#include <algorithm>
#include <cctype>
#include <string>

namespace heapprobe {

namespace {

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) ==
                  std::tolower(static_cast<unsigned char>(y));
         });
}

template <typename E, std::size_t N>
std::optional<E> lookup(std::string_view text, const std::array<E, N>& all) {
  for (E e : all) {
    if (iequals(text, name(e))) return e;
  }
  return std::nullopt;
}

}  // namespace

std::string_view name(ActionKind k) {
  switch (k) {
    case ActionKind::Allocate: return "allocate";
    case ActionKind::Deallocate: return "deallocate";
    case ActionKind::HeapWrite: return "heap_write";
    case ActionKind::BufferWrite: return "buffer_write";
    case ActionKind::BugInvoke: return "bug";
  }
  return "?";
}

std::string_view name(BugKind k) {
  switch (k) {
    case BugKind::Overflow: return "OF";
    case BugKind::WriteAfterFree: return "WF";
    case BugKind::ArbitraryFree: return "AF";
    case BugKind::DoubleFree: return "FF";
    case BugKind::OffByOne: return "O1";
    case BugKind::OffByOneNull: return "O1N";
  }
  return "?";
}

std::string_view name(Strategy s) {
  switch (s) {
    case Strategy::I1: return "I1";
    case Strategy::I2: return "I2";
    case Strategy::I3: return "I3";
    case Strategy::I4: return "I4";
    case Strategy::I5: return "I5";
    case Strategy::P1: return "P1";
    case Strategy::P2: return "P2";
    case Strategy::P3: return "P3";
    case Strategy::P4: return "P4";
  }
  return "?";
}

std::string_view name(Role r) {
  switch (r) {
    case Role::Heap: return "HA";
    case Role::Buffer: return "BA";
    case Role::Container: return "CA";
  }
  return "?";
}

std::string_view name(ImpactClass c) {
  switch (c) {
    case ImpactClass::ArbitraryChunk: return "AC";
    case ImpactClass::OverlappingChunk: return "OC";
    case ImpactClass::ArbitraryWrite: return "AW";
    case ImpactClass::RestrictedWrite: return "RW";
  }
  return "?";
}

std::string_view name(Site s) {
  switch (s) {
    case Site::None: return "none";
    case Site::Container: return "container";
    case Site::Buffer: return "buffer";
  }
  return "?";
}

std::optional<ActionKind> parse_action_kind(std::string_view text) {
  if (iequals(text, "bug_invoke")) return ActionKind::BugInvoke;
  return lookup(text, kAllActions);
}

std::optional<BugKind> parse_bug_kind(std::string_view text) {
  return lookup(text, kAllBugs);
}

std::optional<ImpactClass> parse_impact(std::string_view text) {
  return lookup(text, kAllImpacts);
}

std::optional<Site> parse_site(std::string_view text) {
  return lookup(text, std::array{Site::None, Site::Container, Site::Buffer});
}

std::optional<Role> parse_role(std::string_view text) {
  return lookup(text, kAllRoles);
}

}  // namespace heapprobe
