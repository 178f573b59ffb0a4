#include "heapprobe/report.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace heapprobe {

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

template <typename T>
std::optional<T> parse_int(std::string_view text, int base = 10) {
  if (base == 16 && (text.starts_with("0x") || text.starts_with("0X"))) text.remove_prefix(2);
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value, base);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) return std::nullopt;
  return value;
}

std::string hex_word(Word w) {
  char buf[2 + 16 + 1];
  auto [ptr, ec] = std::to_chars(buf + 2, buf + sizeof buf, w, 16);
  buf[0] = '0';
  buf[1] = 'x';
  return std::string(buf, ptr);
}

}  // namespace

std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out += kDigits[b >> 4];
    out += kDigits[b & 0xf];
  }
  return out;
}

std::vector<std::uint8_t> from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw ReportError("odd-length hex string");
  std::vector<std::uint8_t> out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    auto byte = parse_int<std::uint8_t>(hex.substr(i, 2), 16);
    if (!byte) throw ReportError("bad hex digits '" + std::string(hex.substr(i, 2)) + "'");
    out.push_back(*byte);
  }
  return out;
}

std::string format_event(const ImpactEvent& e) {
  std::string out = std::to_string(e.action_index);
  out += ',';
  out += name(e.impact);
  out += ',';
  out += name(e.site);
  out += ',';
  out += name(e.trigger);
  out += ',';
  out += e.has_bug ? name(e.bug) : "-";
  return out;
}

std::optional<ImpactEvent> parse_event(std::string_view text) {
  const auto parts = split(text, ',');
  if (parts.size() != 5) return std::nullopt;
  ImpactEvent e;
  const auto index = parse_int<std::uint16_t>(parts[0]);
  const auto impact = parse_impact(parts[1]);
  const auto site = parse_site(parts[2]);
  const auto trigger = parse_action_kind(parts[3]);
  if (!index || !impact || !site || !trigger) return std::nullopt;
  e.action_index = *index;
  e.impact = *impact;
  e.site = *site;
  e.trigger = *trigger;
  if (parts[4] != "-") {
    const auto bug = parse_bug_kind(parts[4]);
    if (!bug) return std::nullopt;
    e.has_bug = true;
    e.bug = *bug;
  }
  return e;
}

std::string format_log(std::span<const StepRecord> log) {
  std::string out;
  for (const auto& r : log) {
    if (!out.empty()) out += ' ';
    out += r.status == StepStatus::Executed ? 'E' : r.status == StepStatus::Failed ? 'F' : 'S';
    out += std::to_string(r.records);
  }
  return out;
}

std::vector<StepRecord> parse_log(std::string_view text) {
  std::vector<StepRecord> out;
  if (text.empty()) return out;
  for (auto item : split(text, ' ')) {
    if (item.size() < 2) throw ReportError("bad log entry '" + std::string(item) + "'");
    StepRecord r;
    switch (item[0]) {
      case 'E': r.status = StepStatus::Executed; break;
      case 'S': r.status = StepStatus::Skipped; break;
      case 'F': r.status = StepStatus::Failed; break;
      default: throw ReportError("bad log entry '" + std::string(item) + "'");
    }
    const auto records = parse_int<std::uint16_t>(item.substr(1));
    if (!records) throw ReportError("bad log entry '" + std::string(item) + "'");
    r.records = *records;
    out.push_back(r);
  }
  return out;
}

std::string serialize(const ImpactReport& r) {
  std::ostringstream out;
  out << "outcome=" << name(r.outcome) << '\n';
  if (r.primary) {
    out << "impact=" << name(r.primary->impact) << '\n'
        << "site=" << name(r.primary->site) << '\n'
        << "action_index=" << r.primary->action_index << '\n'
        << "bug=" << (r.primary->has_bug ? name(r.primary->bug) : "none") << '\n'
        << "trigger=" << name(r.primary->trigger) << '\n';
  } else {
    out << "impact=none\n";
  }
  out << "target=" << r.target << '\n'
      << "salt=" << hex_word(r.salt) << '\n'
      << "codec_version=" << r.codec_version << '\n'
      << "spec=" << r.spec << '\n'
      << "trace_hex=" << to_hex(r.trace) << '\n';
  if (!r.message.empty()) out << "message=" << r.message << '\n';
  if (r.check_id) out << "check_id=" << *r.check_id << '\n';
  if (r.signal != 0) out << "signal=" << r.signal << '\n';
  for (const auto& e : r.events) out << "event=" << format_event(e) << '\n';
  out << "log=" << format_log(r.log) << '\n';
  return out.str();
}

ImpactReport parse_report(std::string_view text) {
  ImpactReport r;
  std::optional<ImpactClass> impact;
  std::optional<Site> site;
  std::optional<std::uint16_t> index;
  std::optional<BugKind> bug;
  std::optional<ActionKind> trigger;

  for (auto line : split(text, '\n')) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ReportError("bad report line '" + std::string(line) + "'");
    const auto key = line.substr(0, eq);
    const auto value = line.substr(eq + 1);
    const auto bad = [&] {
      return ReportError("bad value for '" + std::string(key) + "': '" + std::string(value) + "'");
    };

    if (key == "outcome") {
      auto o = parse_outcome(value);
      if (!o) throw bad();
      r.outcome = *o;
    } else if (key == "impact") {
      impact = value == "none" ? std::nullopt : parse_impact(value);
      if (value != "none" && !impact) throw bad();
    } else if (key == "site") {
      site = parse_site(value);
      if (!site) throw bad();
    } else if (key == "action_index") {
      index = parse_int<std::uint16_t>(value);
      if (!index) throw bad();
    } else if (key == "bug") {
      bug = value == "none" ? std::nullopt : parse_bug_kind(value);
      if (value != "none" && !bug) throw bad();
    } else if (key == "trigger") {
      trigger = parse_action_kind(value);
      if (!trigger) throw bad();
    } else if (key == "target") {
      r.target = value;
    } else if (key == "salt") {
      auto s = parse_int<Word>(value, 16);
      if (!s) throw bad();
      r.salt = *s;
    } else if (key == "codec_version") {
      auto v = parse_int<int>(value);
      if (!v) throw bad();
      r.codec_version = *v;
    } else if (key == "spec") {
      r.spec = value;
    } else if (key == "trace_hex") {
      r.trace = from_hex(value);
    } else if (key == "message") {
      r.message = value;
    } else if (key == "check_id") {
      r.check_id = std::string(value);
    } else if (key == "signal") {
      auto s = parse_int<int>(value);
      if (!s) throw bad();
      r.signal = *s;
    } else if (key == "event") {
      auto e = parse_event(value);
      if (!e) throw bad();
      r.events.push_back(*e);
    } else if (key == "log") {
      r.log = parse_log(value);
    }
    // unknown keys are ignored so newer reports stay readable
  }

  if (impact) {
    ImpactEvent e;
    e.impact = *impact;
    e.site = site.value_or(Site::None);
    e.action_index = index.value_or(0);
    e.trigger = trigger.value_or(ActionKind::Allocate);
    e.has_bug = bug.has_value();
    if (bug) e.bug = *bug;
    r.primary = e;
  }
  return r;
}

ImpactReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ReportError("cannot open report '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_report(ss.str());
}

void save_report(const std::string& path, const ImpactReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ReportError("cannot write report '" + path + "'");
  out << serialize(report);
  if (!out) throw ReportError("short write to '" + path + "'");
}

void apply_verdict(ImpactReport& report, EnumSet<ImpactClass> allowed) {
  report.primary = final_verdict(report.events, allowed).primary;
}

}  // namespace heapprobe
