#include "sedx/kvconfig.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "sedx/binio.hpp"
#include "sedx/errors.hpp"

namespace sedx {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValueFile KeyValueFile::parse(const std::string& text, const std::string& source) {
  KeyValueFile kv;
  kv.source_ = source;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string body = trim(raw.substr(0, raw.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(line) + ": ";
    if (eq == std::string::npos) throw ValidationError(where + "expected 'key = value'");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) throw ValidationError(where + "missing key before '='");
    if (kv.entries_.contains(key)) {
      throw ValidationError(where + "duplicate key '" + key + "' (first set on line " +
                            std::to_string(kv.entries_[key].line) + ")");
    }
    kv.entries_[key] = {value, line};
  }
  return kv;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  try {
    return parse(binio::read_file(path), path.string());
  } catch (const IoError& e) {
    throw ValidationError(e.what());
  }
}

void KeyValueFile::require_known(const std::set<std::string>& known) const {
  const Entry* first = nullptr;
  std::string name;
  for (const auto& [key, entry] : entries_) {
    if (known.contains(key)) continue;
    if (!first || entry.line < first->line) {
      first = &entry;
      name = key;
    }
  }
  if (first) {
    throw ValidationError(source_ + ":" + std::to_string(first->line) + ": unknown key '" + name +
                          "'");
  }
}

void KeyValueFile::fail(const std::string& key, const std::string& expected) const {
  const Entry& e = entries_.at(key);
  throw ValidationError(source_ + ":" + std::to_string(e.line) + ": key '" + key + "' expects " +
                        expected + ", got '" + e.value + "'");
}

std::string KeyValueFile::text(const std::string& key, const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second.value;
}

std::string KeyValueFile::required_text(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ValidationError(source_ + ": missing required key '" + key + "'");
  if (it->second.value.empty()) fail(key, "a non-empty string");
  return it->second.value;
}

double KeyValueFile::real(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second.value;
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    fail(key, "a finite real number");
  }
  return out;
}

std::uint64_t KeyValueFile::count(const std::string& key, std::uint64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second.value;
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) fail(key, "a non-negative integer");
  return out;
}

bool KeyValueFile::flag(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second.value;
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  fail(key, "a boolean (true/false)");
}

}  // namespace sedx
