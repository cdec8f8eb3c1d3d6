#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>

namespace sedx {

/// Flat `key = value` text with `#` comments. Every accessor throws
/// ValidationError naming the key, its line and the expected type.
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::string& text, const std::string& source);
  static KeyValueFile load(const std::filesystem::path& path);

  /// Rejects any key outside `known`, reporting the first one by line.
  void require_known(const std::set<std::string>& known) const;
  bool has(const std::string& key) const { return entries_.contains(key); }

  std::string text(const std::string& key, const std::string& fallback) const;
  std::string required_text(const std::string& key) const;
  double real(const std::string& key, double fallback) const;
  std::uint64_t count(const std::string& key, std::uint64_t fallback) const;
  bool flag(const std::string& key, bool fallback) const;

  const std::string& source() const { return source_; }

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  [[noreturn]] void fail(const std::string& key, const std::string& expected) const;

  std::string source_;
  std::map<std::string, Entry> entries_;
};

}  // namespace sedx
