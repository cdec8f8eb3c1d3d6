#include "sedx/labels.hpp"

#include "sedx/errors.hpp"

namespace sedx {

std::string to_string(LabelMode mode) {
  switch (mode) {
    case LabelMode::kStrong:
      return "strong";
    case LabelMode::kWeak:
      return "weak";
    case LabelMode::kUnlabeled:
      return "unlabeled";
  }
  return "?";
}

LabelMode parse_label_mode(const std::string& text) {
  if (text == "strong") return LabelMode::kStrong;
  if (text == "weak") return LabelMode::kWeak;
  if (text == "unlabeled") return LabelMode::kUnlabeled;
  throw ValidationError("unknown label mode '" + text + "'");
}

LabelGrid::LabelGrid(std::size_t frames, std::size_t classes)
    : frames_(frames), classes_(classes), bits_(frames * classes, 0) {}

LabelGrid::LabelGrid(std::size_t frames, std::size_t classes, std::vector<std::uint8_t> bits)
    : frames_(frames), classes_(classes), bits_(std::move(bits)) {
  if (bits_.size() != frames * classes) throw DimensionError("label grid: size mismatch");
  for (std::uint8_t b : bits_) {
    if (b > 1) throw ContractError("label grid: entries must be 0 or 1");
  }
}

LabelGrid LabelGrid::from_rows(std::initializer_list<std::initializer_list<int>> rows) {
  const std::size_t frames = rows.size();
  const std::size_t classes = frames ? rows.begin()->size() : 0;
  std::vector<std::uint8_t> bits;
  for (const auto& r : rows) {
    if (r.size() != classes) throw DimensionError("label grid: ragged rows");
    for (int v : r) bits.push_back(static_cast<std::uint8_t>(v));
  }
  return LabelGrid(frames, classes, std::move(bits));
}

std::size_t LabelGrid::active_in_frame(std::size_t t) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < classes_; ++c) n += at(t, c);
  return n;
}

std::size_t LabelGrid::row_dot(std::size_t t, std::size_t u) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < classes_; ++c) n += at(t, c) * at(u, c);
  return n;
}

std::size_t LabelGrid::positives(std::size_t c) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < frames_; ++t) n += at(t, c);
  return n;
}

std::vector<std::uint8_t> LabelGrid::column(std::size_t c) const {
  std::vector<std::uint8_t> col(frames_);
  for (std::size_t t = 0; t < frames_; ++t) col[t] = at(t, c);
  return col;
}

std::vector<std::uint8_t> LabelGrid::weak() const {
  std::vector<std::uint8_t> w(classes_, 0);
  for (std::size_t t = 0; t < frames_; ++t) {
    for (std::size_t c = 0; c < classes_; ++c) w[c] |= at(t, c);
  }
  return w;
}

DenseArray LabelGrid::as_array() const {
  DenseArray a(Shape{frames_, classes_});
  for (std::size_t i = 0; i < bits_.size(); ++i) a[i] = bits_[i];
  return a;
}

}  // namespace sedx
