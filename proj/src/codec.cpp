#include "heapprobe/codec.hpp"

#include <algorithm>

namespace heapprobe {

namespace {

enum class TransformClass { None, Shift, Linear };

constexpr TransformClass transform_class(Strategy s) {
  switch (s) {
    case Strategy::I2:
    case Strategy::P2:
    case Strategy::P3:
    case Strategy::P4: return TransformClass::Shift;
    case Strategy::I4:
    case Strategy::I5: return TransformClass::Linear;
    default: return TransformClass::None;
  }
}

enum class ValueType { Integer, Any, Address };

/// Everything decode/encode need to know about a spec, computed once.
struct Tables {
  std::vector<ActionKind> actions;
  std::vector<BugKind> bugs;
  std::vector<Strategy> integer;
  std::vector<Strategy> any;
  std::vector<Strategy> address;
  std::vector<std::pair<Role, Role>> pairs;
  std::vector<std::uint8_t> pools;

  explicit Tables(const ModelSpec& spec)
      : actions(spec.enabled_actions()),
        bugs(spec.enabled_bugs()),
        any(spec.enabled_strategies()),
        pairs(role_pairs(spec.knowledge)),
        pools(size_pools(spec)) {
    for (auto s : any) (is_address_typed(s) ? address : integer).push_back(s);
  }

  const std::vector<Strategy>& strategies(ValueType type) const {
    switch (type) {
      case ValueType::Integer: return integer;
      case ValueType::Address: return address;
      case ValueType::Any: break;
    }
    return any;
  }
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool u8(std::uint8_t& out) {
    if (pos_ >= bytes_.size()) return false;
    out = bytes_[pos_++];
    return true;
  }
  bool u16(std::uint16_t& out) {
    std::uint8_t lo = 0, hi = 0;
    if (!u8(lo) || !u8(hi)) return false;
    out = static_cast<std::uint16_t>(lo | (hi << 8));
    return true;
  }
  std::size_t pos() const { return pos_; }
  bool exhausted() const { return pos_ >= bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
const T& select(const std::vector<T>& list, std::uint8_t b) {
  return list[b % list.size()];
}

bool read_transform(Reader& in, TransformClass cls, Transform& out) {
  out = Transform{};
  if (cls == TransformClass::None) return true;
  std::uint8_t mode = 0;
  if (!in.u8(mode)) return false;
  const auto kinds = cls == TransformClass::Shift
                         ? std::vector{TransformKind::None, TransformKind::Shift}
                         : std::vector{TransformKind::None, TransformKind::Linear,
                                       TransformKind::Shift};
  out.kind = select(kinds, mode);
  if (out.kind == TransformKind::Linear) {
    std::uint8_t a = 0;
    if (!in.u8(a)) return false;
    out.mult = kLinearMultipliers[a % kLinearMultipliers.size()];
  }
  if (out.kind != TransformKind::None) {
    std::uint8_t b = 0;
    if (!in.u8(b)) return false;
    out.offset = static_cast<std::int8_t>(b) * static_cast<std::int32_t>(kWordSize);
  }
  return true;
}

bool read_value(Reader& in, const Tables& t, ValueType type, Value& out) {
  const auto& list = t.strategies(type);
  std::uint8_t sel = 0;
  if (list.empty() || !in.u8(sel)) return false;
  out = Value{};
  out.strategy = select(list, sel);
  std::uint8_t b = 0;
  switch (out.strategy) {
    case Strategy::I1:
      if (!in.u8(b)) return false;
      out.arg = static_cast<std::uint8_t>(b % kConstantPool.size());
      break;
    case Strategy::I2: {
      if (!in.u8(b)) return false;
      const auto& pair = select(t.pairs, b);
      out.lhs = pair.first;
      out.rhs = pair.second;
      break;
    }
    case Strategy::I3:
      if (!in.u8(b) || !in.u16(out.offset)) return false;
      out.arg = select(t.pools, b);
      break;
    case Strategy::I4:
    case Strategy::I5:
      if (!in.u8(out.arg)) return false;
      break;
    default: break;
  }
  return read_transform(in, transform_class(out.strategy), out.transform);
}

bool read_action(Reader& in, const Tables& t, Action& out) {
  out = Action{};
  std::uint8_t b = 0;
  if (!in.u8(b)) return false;
  out.kind = select(t.actions, b);
  switch (out.kind) {
    case ActionKind::Allocate:
      out.value_count = 1;
      return read_value(in, t, ValueType::Integer, out.values[0]);
    case ActionKind::Deallocate:
      return in.u8(out.chunk);
    case ActionKind::HeapWrite:
      if (!in.u8(out.chunk) || !in.u8(b)) return false;
      out.slot = static_cast<std::uint8_t>(b % kSlotCount);
      out.value_count = 1;
      return read_value(in, t, ValueType::Any, out.values[0]);
    case ActionKind::BufferWrite: {
      std::uint16_t raw = 0;
      if (!in.u16(raw)) return false;
      out.buffer_offset = static_cast<std::uint16_t>(
          (raw % (kBufferSize - kWordSize)) & ~std::size_t{7});
      out.value_count = 1;
      return read_value(in, t, ValueType::Any, out.values[0]);
    }
    case ActionKind::BugInvoke:
      break;
  }

  if (!in.u8(b)) return false;
  out.bug = select(t.bugs, b);
  switch (out.bug) {
    case BugKind::Overflow: {
      if (!in.u8(out.chunk) || !in.u8(b)) return false;
      out.value_count = static_cast<std::uint8_t>(1 + b % kMaxOverflowWords);
      for (std::size_t i = 0; i < out.value_count; ++i) {
        if (!read_value(in, t, ValueType::Any, out.values[i])) return false;
      }
      return true;
    }
    case BugKind::WriteAfterFree:
      if (!in.u8(out.chunk) || !in.u8(b)) return false;
      out.slot = static_cast<std::uint8_t>(b % kSlotCount);
      out.value_count = 1;
      return read_value(in, t, ValueType::Any, out.values[0]);
    case BugKind::ArbitraryFree:
      out.value_count = 1;
      return read_value(in, t, ValueType::Address, out.values[0]);
    case BugKind::OffByOne:
      if (!in.u8(out.chunk)) return false;
      out.value_count = 1;
      return read_value(in, t, ValueType::Any, out.values[0]);
    case BugKind::DoubleFree:
    case BugKind::OffByOneNull:
      return in.u8(out.chunk);
  }
  return false;
}

template <typename T>
std::uint8_t index_of(const std::vector<T>& list, const T& item, std::size_t at,
                      const char* what) {
  const auto it = std::find(list.begin(), list.end(), item);
  if (it == list.end()) throw EncodeError(at, std::string(what) + " not enabled by spec");
  return static_cast<std::uint8_t>(it - list.begin());
}

void write_transform(std::vector<std::uint8_t>& out, TransformClass cls,
                     const Transform& tr, std::size_t at) {
  if (cls == TransformClass::None) {
    if (tr.kind != TransformKind::None) throw EncodeError(at, "strategy takes no transform");
    return;
  }
  if (cls == TransformClass::Shift && tr.kind == TransformKind::Linear) {
    throw EncodeError(at, "linear transform on a shift-only strategy");
  }
  out.push_back(static_cast<std::uint8_t>(tr.kind == TransformKind::None  ? 0
                                          : tr.kind == TransformKind::Linear ? 1
                                          : cls == TransformClass::Shift    ? 1
                                                                            : 2));
  if (tr.kind == TransformKind::Linear) {
    const auto it = std::find(kLinearMultipliers.begin(), kLinearMultipliers.end(), tr.mult);
    if (it == kLinearMultipliers.end()) throw EncodeError(at, "unsupported multiplier");
    out.push_back(static_cast<std::uint8_t>(it - kLinearMultipliers.begin()));
  }
  if (tr.kind != TransformKind::None) {
    const auto words = tr.offset / static_cast<std::int32_t>(kWordSize);
    if (tr.offset % static_cast<std::int32_t>(kWordSize) != 0 || words < -128 || words > 127) {
      throw EncodeError(at, "transform offset out of range");
    }
    out.push_back(static_cast<std::uint8_t>(static_cast<std::int8_t>(words)));
  }
}

void write_value(std::vector<std::uint8_t>& out, const Tables& t, ValueType type,
                 const Value& v, std::size_t at) {
  out.push_back(index_of(t.strategies(type), v.strategy, at, "strategy"));
  switch (v.strategy) {
    case Strategy::I1:
      if (v.arg >= kConstantPool.size()) throw EncodeError(at, "constant index out of range");
      out.push_back(v.arg);
      break;
    case Strategy::I2:
      out.push_back(index_of(t.pairs, std::pair{v.lhs, v.rhs}, at, "role pair"));
      break;
    case Strategy::I3:
      out.push_back(index_of(t.pools, v.arg, at, "size pool"));
      out.push_back(static_cast<std::uint8_t>(v.offset & 0xff));
      out.push_back(static_cast<std::uint8_t>(v.offset >> 8));
      break;
    case Strategy::I4:
    case Strategy::I5:
      out.push_back(v.arg);
      break;
    default: break;
  }
  write_transform(out, transform_class(v.strategy), v.transform, at);
}

void write_action(std::vector<std::uint8_t>& out, const Tables& t, const Action& a,
                  std::size_t at) {
  auto expect_values = [&](std::size_t n) {
    if (a.value_count != n) throw EncodeError(at, "unexpected value count");
  };
  out.push_back(index_of(t.actions, a.kind, at, "action kind"));
  switch (a.kind) {
    case ActionKind::Allocate:
      expect_values(1);
      write_value(out, t, ValueType::Integer, a.values[0], at);
      return;
    case ActionKind::Deallocate:
      out.push_back(a.chunk);
      return;
    case ActionKind::HeapWrite:
      if (a.slot >= kSlotCount) throw EncodeError(at, "slot out of range");
      expect_values(1);
      out.push_back(a.chunk);
      out.push_back(a.slot);
      write_value(out, t, ValueType::Any, a.values[0], at);
      return;
    case ActionKind::BufferWrite:
      if (a.buffer_offset % kWordSize != 0 || a.buffer_offset >= kBufferSize - kWordSize) {
        throw EncodeError(at, "buffer offset out of range");
      }
      expect_values(1);
      out.push_back(static_cast<std::uint8_t>(a.buffer_offset & 0xff));
      out.push_back(static_cast<std::uint8_t>(a.buffer_offset >> 8));
      write_value(out, t, ValueType::Any, a.values[0], at);
      return;
    case ActionKind::BugInvoke:
      break;
  }
  out.push_back(index_of(t.bugs, a.bug, at, "bug"));
  switch (a.bug) {
    case BugKind::Overflow:
      if (a.value_count < 1 || a.value_count > kMaxOverflowWords) {
        throw EncodeError(at, "overflow length out of range");
      }
      out.push_back(a.chunk);
      out.push_back(static_cast<std::uint8_t>(a.value_count - 1));
      for (std::size_t i = 0; i < a.value_count; ++i) {
        write_value(out, t, ValueType::Any, a.values[i], at);
      }
      return;
    case BugKind::WriteAfterFree:
      if (a.slot >= kSlotCount) throw EncodeError(at, "slot out of range");
      expect_values(1);
      out.push_back(a.chunk);
      out.push_back(a.slot);
      write_value(out, t, ValueType::Any, a.values[0], at);
      return;
    case BugKind::ArbitraryFree:
      expect_values(1);
      write_value(out, t, ValueType::Address, a.values[0], at);
      return;
    case BugKind::OffByOne:
      expect_values(1);
      out.push_back(a.chunk);
      write_value(out, t, ValueType::Any, a.values[0], at);
      return;
    case BugKind::DoubleFree:
    case BugKind::OffByOneNull:
      out.push_back(a.chunk);
      return;
  }
}

}  // namespace

SizeGroup size_group(int index) {
  if (index >= kSizeGroupCount - 1) {
    return {std::uint64_t{1} << 20, (std::uint64_t{1} << 20) + 1};
  }
  return {std::uint64_t{1} << (5 * index), std::uint64_t{1} << (5 * (index + 1))};
}

std::vector<std::pair<Role, Role>> role_pairs(KnowledgeSet knowledge) {
  std::vector<std::pair<Role, Role>> out;
  for (auto a : kAllRoles) {
    for (auto b : kAllRoles) {
      if (a != b && knowledge.contains(a) && knowledge.contains(b)) out.emplace_back(a, b);
    }
  }
  return out;
}

std::vector<std::uint8_t> size_pools(const ModelSpec& spec) {
  std::vector<std::uint8_t> out;
  for (int g = 0; g < kSizeGroupCount; ++g) {
    if (spec.size_groups.contains(g)) out.push_back(static_cast<std::uint8_t>(g));
  }
  if (!spec.sizes.empty()) out.push_back(kExplicitSizePool);
  return out;
}

TraceProgram decode(std::span<const std::uint8_t> bytes, const ModelSpec& spec,
                    std::size_t max_actions) {
  TraceProgram program;
  const Tables tables(spec);
  if (tables.actions.empty()) return program;
  max_actions = std::min(max_actions, kMaxActions);

  Reader in(bytes);
  std::size_t consumed = 0;
  Action action;
  while (!in.exhausted() && program.actions.size() < max_actions) {
    if (!read_action(in, tables, action)) break;
    program.actions.push_back(action);
    consumed = in.pos();
  }
  program.source.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(consumed));
  return program;
}

std::vector<std::uint8_t> encode(std::span<const Action> actions, const ModelSpec& spec) {
  const Tables tables(spec);
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < actions.size(); ++i) write_action(out, tables, actions[i], i);
  return out;
}

std::string describe(const Value& v) {
  std::string out(name(v.strategy));
  switch (v.strategy) {
    case Strategy::I1: out += "(" + std::to_string(kConstantPool[v.arg % kConstantPool.size()]) + ")"; break;
    case Strategy::I2: out += "(" + std::string(name(v.lhs)) + "-" + std::string(name(v.rhs)) + ")"; break;
    case Strategy::I3: out += "(pool=" + std::to_string(v.arg) + ",off=" + std::to_string(v.offset) + ")"; break;
    case Strategy::I4:
    case Strategy::I5: out += "(chunk=" + std::to_string(v.arg) + ")"; break;
    default: break;
  }
  switch (v.transform.kind) {
    case TransformKind::None: break;
    case TransformKind::Linear:
      out += "*" + std::to_string(v.transform.mult) + "+" + std::to_string(v.transform.offset);
      break;
    case TransformKind::Shift: out += "+" + std::to_string(v.transform.offset); break;
  }
  return out;
}

std::string describe(const Action& a) {
  std::string out(name(a.kind));
  switch (a.kind) {
    case ActionKind::Allocate: out += " " + describe(a.values[0]); break;
    case ActionKind::Deallocate: out += " chunk=" + std::to_string(a.chunk); break;
    case ActionKind::HeapWrite:
      out += " chunk=" + std::to_string(a.chunk) + " slot=" + std::to_string(a.slot) + " " +
             describe(a.values[0]);
      break;
    case ActionKind::BufferWrite:
      out += " offset=" + std::to_string(a.buffer_offset) + " " + describe(a.values[0]);
      break;
    case ActionKind::BugInvoke:
      out += " " + std::string(name(a.bug));
      if (a.bug != BugKind::ArbitraryFree) out += " chunk=" + std::to_string(a.chunk);
      if (a.bug == BugKind::WriteAfterFree) out += " slot=" + std::to_string(a.slot);
      for (const auto& v : a.value_span()) out += " " + describe(v);
      break;
  }
  return out;
}

}  // namespace heapprobe
