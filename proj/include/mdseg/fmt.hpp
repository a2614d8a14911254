#pragma once

#include <charconv>
#include <string>

namespace mdseg {

/// Locale-independent decimal formatting (always '.'), shortest round-trip
/// when precision < 0, fixed otherwise. Used for every CSV/JSON artifact so
/// identical inputs produce byte-identical files.
inline std::string format_double(double v, int precision = -1) {
  char buf[64];
  const auto res = precision < 0
                       ? std::to_chars(buf, buf + sizeof(buf), v)
                       : std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed,
                                       precision);
  return std::string(buf, res.ptr);
}

}  // namespace mdseg
