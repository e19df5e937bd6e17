#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace vsc {

// `[section] key = value` text config. Lines starting with '#' or ';' are
// comments. Keys may repeat within a section (ordered list semantics).
// Every lookup throws with an origin:section.key diagnostic when missing or
// malformed; nothing defaults silently.
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_string(const std::string& text, const std::string& origin);

  bool has(const std::string& sec, const std::string& key) const;
  // Exactly one occurrence required.
  const std::string& get(const std::string& sec, const std::string& key) const;
  // Zero or more occurrences, file order.
  std::vector<std::string> get_all(const std::string& sec, const std::string& key) const;

  double get_double(const std::string& sec, const std::string& key) const;
  int get_int(const std::string& sec, const std::string& key) const;
  uint64_t get_u64(const std::string& sec, const std::string& key) const;
  bool get_bool(const std::string& sec, const std::string& key) const;  // true|false
  std::vector<double> get_doubles(const std::string& sec, const std::string& key) const;
  std::vector<int> get_ints(const std::string& sec, const std::string& key) const;

  // Every (key, value) pair of a section in file order; free-form sections
  // such as physical-constant tables use this.
  std::vector<std::pair<std::string, std::string>> section_items(const std::string& sec) const;

  double parse_double(const std::string& sec, const std::string& key,
                      const std::string& text) const;
  const std::string& origin() const { return origin_; }

 private:
  struct Entry {
    std::string section, key, value;
    int line;
  };
  std::string origin_;
  std::vector<Entry> entries_;

  [[noreturn]] void fail(const std::string& sec, const std::string& key,
                         const std::string& msg) const;
};

}  // namespace vsc
