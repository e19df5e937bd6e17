#include "vsc/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace vsc {
namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace

void ConfigFile::fail(const std::string& sec, const std::string& key,
                      const std::string& msg) const {
  throw std::invalid_argument(origin_ + ": [" + sec + "] " + key + ": " + msg);
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str(), path);
}

ConfigFile ConfigFile::parse_string(const std::string& text, const std::string& origin) {
  ConfigFile cf;
  cf.origin_ = origin;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3)
        throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                    ": malformed section header '" + t + "'");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + t + "'");
    if (section.empty())
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                  ": key before any [section]");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty key");
    if (value.empty())
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty value for '" +
                                  key + "' (write an explicit value such as 'none')");
    cf.entries_.push_back({section, key, value, lineno});
  }
  return cf;
}

bool ConfigFile::has(const std::string& sec, const std::string& key) const {
  for (const Entry& e : entries_)
    if (e.section == sec && e.key == key) return true;
  return false;
}

const std::string& ConfigFile::get(const std::string& sec, const std::string& key) const {
  const std::string* found = nullptr;
  for (const Entry& e : entries_) {
    if (e.section != sec || e.key != key) continue;
    if (found) fail(sec, key, "key appears more than once but a single value is required");
    found = &e.value;
  }
  if (!found) fail(sec, key, "missing required key");
  return *found;
}

std::vector<std::string> ConfigFile::get_all(const std::string& sec,
                                             const std::string& key) const {
  std::vector<std::string> out;
  for (const Entry& e : entries_)
    if (e.section == sec && e.key == key) out.push_back(e.value);
  return out;
}

std::vector<std::pair<std::string, std::string>> ConfigFile::section_items(
    const std::string& sec) const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const Entry& e : entries_)
    if (e.section == sec) out.emplace_back(e.key, e.value);
  return out;
}

double ConfigFile::parse_double(const std::string& sec, const std::string& key,
                                const std::string& text) const {
  size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    fail(sec, key, "not a number: '" + text + "'");
  }
  if (used != text.size()) fail(sec, key, "trailing characters in number: '" + text + "'");
  return v;
}

double ConfigFile::get_double(const std::string& sec, const std::string& key) const {
  return parse_double(sec, key, get(sec, key));
}

int ConfigFile::get_int(const std::string& sec, const std::string& key) const {
  const std::string& s = get(sec, key);
  size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    fail(sec, key, "not an integer: '" + s + "'");
  }
  if (used != s.size()) fail(sec, key, "trailing characters in integer: '" + s + "'");
  if (v < INT32_MIN || v > INT32_MAX) fail(sec, key, "integer out of range: '" + s + "'");
  return static_cast<int>(v);
}

uint64_t ConfigFile::get_u64(const std::string& sec, const std::string& key) const {
  const std::string& s = get(sec, key);
  size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    fail(sec, key, "not an unsigned integer: '" + s + "'");
  }
  if (used != s.size()) fail(sec, key, "trailing characters in integer: '" + s + "'");
  return v;
}

bool ConfigFile::get_bool(const std::string& sec, const std::string& key) const {
  const std::string& s = get(sec, key);
  if (s == "true") return true;
  if (s == "false") return false;
  fail(sec, key, "expected true or false, got '" + s + "'");
}

std::vector<double> ConfigFile::get_doubles(const std::string& sec,
                                            const std::string& key) const {
  std::vector<double> out;
  for (const std::string& tok : split_ws(get(sec, key)))
    out.push_back(parse_double(sec, key, tok));
  if (out.empty()) fail(sec, key, "expected at least one number");
  return out;
}

std::vector<int> ConfigFile::get_ints(const std::string& sec, const std::string& key) const {
  const std::string& raw = get(sec, key);
  std::vector<int> out;
  if (raw == "none") return out;  // explicit empty list
  for (const std::string& tok : split_ws(raw)) {
    size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(tok, &used);
    } catch (const std::exception&) {
      fail(sec, key, "not an integer: '" + tok + "'");
    }
    if (used != tok.size()) fail(sec, key, "trailing characters in integer: '" + tok + "'");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

}  // namespace vsc
