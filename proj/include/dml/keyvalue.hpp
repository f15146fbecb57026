#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dml/error.hpp"

namespace dml {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Ordered `key = value` store. Lines starting with '#' are comments.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& origin = "<text>") {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto end = text.find('\n', start);
      const auto line = detail::trim(text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
      ++line_no;
      if (!line.empty() && line.front() != '#') {
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
          throw ConfigError(detail::concat(origin, ":", line_no, ": expected 'key = value'"));
        kv.set(std::string(detail::trim(line.substr(0, eq))), std::string(detail::trim(line.substr(eq + 1))));
      }
      if (end == std::string_view::npos) break;
      start = end + 1;
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }

  // Values of `other` override ours.
  void merge(const KeyValues& other) {
    for (const auto& k : other.order_) set(k, other.get(k));
  }

  const std::vector<std::string>& keys() const { return order_; }

  std::string to_text() const {
    std::string out;
    for (const auto& k : order_) out += k + " = " + values_.at(k) + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

template <typename U>
U parse_number(std::string_view text, std::string_view what) {
  U value{};
  const auto t = detail::trim(text);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), value);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size())
    throw ConfigError(detail::concat("cannot parse ", what, " from '", t, "'"));
  return value;
}

// std::from_chars for double is available from GCC 11 on.
inline double parse_real(std::string_view text, std::string_view what) { return parse_number<double>(text, what); }

inline std::vector<std::size_t> parse_size_list(std::string_view text, std::string_view what) {
  std::vector<std::size_t> out;
  if (detail::trim(text).empty()) return out;
  for (const auto& item : detail::split(text, ',')) out.push_back(parse_number<std::size_t>(item, what));
  return out;
}

inline bool parse_bool(std::string_view text, std::string_view what) {
  const auto t = detail::trim(text);
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw ConfigError(detail::concat("cannot parse ", what, " from '", t, "'"));
}

template <typename U>
std::string join(const std::vector<U>& values, const char* sep = ",") {
  std::ostringstream oss;
  for (std::size_t i = 0; i < values.size(); ++i) oss << (i ? sep : "") << values[i];
  return oss.str();
}

inline std::string format_real(double v) {
  std::ostringstream oss;
  oss.precision(17);
  oss << v;
  return oss.str();
}

}  // namespace dml
