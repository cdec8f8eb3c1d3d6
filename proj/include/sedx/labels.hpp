#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "sedx/ndarray.hpp"

namespace sedx {

enum class LabelMode : std::uint8_t { kStrong = 0, kWeak = 1, kUnlabeled = 2 };

std::string to_string(LabelMode mode);
/// Accepts "strong", "weak", "unlabeled".
LabelMode parse_label_mode(const std::string& text);

/// Frame-level multi-hot labels, [frames x classes] over {0, 1}.
class LabelGrid {
 public:
  LabelGrid() = default;
  LabelGrid(std::size_t frames, std::size_t classes);
  LabelGrid(std::size_t frames, std::size_t classes, std::vector<std::uint8_t> bits);
  static LabelGrid from_rows(std::initializer_list<std::initializer_list<int>> rows);

  std::size_t frames() const { return frames_; }
  std::size_t classes() const { return classes_; }
  std::uint8_t at(std::size_t t, std::size_t c) const { return bits_[t * classes_ + c]; }
  void set(std::size_t t, std::size_t c, bool on) { bits_[t * classes_ + c] = on ? 1 : 0; }
  std::span<const std::uint8_t> bits() const { return bits_; }

  /// Number of active classes in frame t.
  std::size_t active_in_frame(std::size_t t) const;
  /// Inner product of label rows t and u.
  std::size_t row_dot(std::size_t t, std::size_t u) const;
  std::size_t positives(std::size_t c) const;
  std::vector<std::uint8_t> column(std::size_t c) const;
  /// Column-wise OR.
  std::vector<std::uint8_t> weak() const;
  DenseArray as_array() const;

  bool operator==(const LabelGrid&) const = default;

 private:
  std::size_t frames_ = 0;
  std::size_t classes_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace sedx
