#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "raee/error.hpp"

namespace raee::detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

// Flat `key = value` text. '#' starts a comment; blank lines are ignored.
// Duplicate keys are rejected.
inline std::map<std::string, std::string> parse_kv(std::string_view text,
                                                   const std::string& source) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;

    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;

    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw data_error(source + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) {
      throw data_error(source + ":" + std::to_string(line_no) + ": empty key");
    }
    if (!out.emplace(key, value).second) {
      throw data_error(source + ":" + std::to_string(line_no) + ": duplicate key \"" + key + "\"");
    }
  }
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class T>
T parse_number(std::string_view s, const std::string& what) {
  s = trim(s);
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw data_error("invalid value for " + what + ": \"" + std::string(s) + "\"");
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw data_error(what + " must be finite");
  }
  return value;
}

template <class T>
std::vector<T> parse_list(std::string_view s, const std::string& what) {
  std::vector<T> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    const auto item = s.substr(pos, comma == std::string_view::npos ? s.npos : comma - pos);
    out.push_back(parse_number<T>(item, what));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace raee::detail
