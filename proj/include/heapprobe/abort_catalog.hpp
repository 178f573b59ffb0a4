#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace heapprobe {

struct SecurityCheck {
  std::string_view id;
  std::string_view message;
};

/// ptmalloc security checks and the messages they abort with.
inline constexpr std::array<SecurityCheck, 21> kSecurityChecks = {{
    {"D1", "corrupted double-linked list"},
    {"D2", "corrupted double-linked list (not small)"},
    {"D3", "free(): corrupted unsorted chunks"},
    {"D4", "malloc(): corrupted unsorted chunks 1"},
    {"D5", "malloc(): corrupted unsorted chunks 2"},
    {"D6", "malloc(): smallbin double linked list corrupted"},
    {"S1", "free(): invalid next size (fast)"},
    {"S2", "free(): invalid next size (normal)"},
    {"S3", "free(): invalid size"},
    {"S4", "malloc(): memory corruption"},
    {"F1", "double free or corruption (!prev)"},
    {"F2", "double free or corruption (fasttop)"},
    {"F3", "double free or corruption (top)"},
    {"F4", "double free or corruption (out)"},
    {"U1", "malloc(): memory corruption (fast)"},
    {"U2", "malloc_consolidate(): invalid chunk size"},
    {"SP1", "break adjusted to free malloc space"},
    {"SP2", "corrupted size vs. prev_size"},
    {"SP3", "free(): invalid pointer"},
    {"SP4", "munmap_chunk(): invalid pointer"},
    {"SP5", "invalid fastbin entry (free)"},
}};

/// Check id whose message is the longest prefix of `message`.
std::optional<std::string_view> classify_abort(std::string_view message);

/// Strips the decorations older glibc versions wrap around the check
/// message (`*** Error in `prog': MSG: 0xADDR ***`) and surrounding space.
std::string normalize_abort_message(std::string_view raw);

}  // namespace heapprobe
