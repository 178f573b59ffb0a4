#include "heapprobe/abort_catalog.hpp"

#include <cctype>

namespace heapprobe {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool is_hex_address(std::string_view s) {
  if (s.size() < 3 || !s.starts_with("0x")) return false;
  for (char c : s.substr(2)) {
    if (!std::isxdigit(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

}  // namespace

std::optional<std::string_view> classify_abort(std::string_view message) {
  std::optional<SecurityCheck> best;
  for (const auto& check : kSecurityChecks) {
    if (message.starts_with(check.message) &&
        (!best || check.message.size() > best->message.size())) {
      best = check;
    }
  }
  if (!best) return std::nullopt;
  return best->id;
}

std::string normalize_abort_message(std::string_view raw) {
  auto s = trim(raw);
  if (s.starts_with("*** Error in `")) {
    if (const auto end = s.find("': "); end != std::string_view::npos) s.remove_prefix(end + 3);
    if (s.ends_with("***")) s = trim(s.substr(0, s.size() - 3));
    if (const auto colon = s.rfind(": "); colon != std::string_view::npos &&
                                          is_hex_address(s.substr(colon + 2))) {
      s = s.substr(0, colon);
    }
  }
  if (s.starts_with("Fatal glibc error: ")) s.remove_prefix(19);
  return std::string(trim(s));
}

}  // namespace heapprobe
