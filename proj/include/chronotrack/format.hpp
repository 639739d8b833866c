#pragma once

#include <charconv>
#include <string>
#include <system_error>

namespace chronotrack {

// Shortest text that parses back to the same value.
template <typename F>
std::string format_real(F v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename F>
bool parse_real(const std::string& s, F& out) {
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

}  // namespace chronotrack
