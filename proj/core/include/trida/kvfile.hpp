#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace trida {

/// Ordered `key = value` text: one pair per line, `#` starts a comment,
/// surrounding whitespace is trimmed, later keys override earlier ones.
class KeyValueFile {
 public:
  static KeyValueFile parse(std::istream& in);
  static KeyValueFile read(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;

  const std::vector<std::string>& keys() const { return order_; }

  void write(std::ostream& out) const;
  void write(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

std::string join(const std::vector<std::string>& items, char sep);
std::vector<std::string> split(const std::string& text, char sep);
std::string trim(const std::string& text);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double value);

}  // namespace trida
