#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sedx/labels.hpp"
#include "sedx/ndarray.hpp"

namespace sedx {

/// Spectral and temporal shape of one synthetic event class.
struct EventTemplate {
  std::uint32_t cls = 0;
  std::vector<double> profile;  // [F], non-negative, peak 1
  std::uint32_t min_frames = 8;  // model frames
  std::uint32_t max_frames = 20;
  double min_amplitude = 1.0;
  double max_amplitude = 3.0;
  double attack = 0.1;  // fraction of the event spent ramping up
  double decay = 0.3;   // fraction spent ramping down
};

/// One Gaussian band per class plus a weaker second band half the spectrum
/// away, so that distinct classes share some energy but stay separable.
std::vector<EventTemplate> default_templates(std::uint32_t n_classes, std::uint32_t n_mels);

struct SynthConfig;
/// Templates shaped by the band width and amplitude range of `cfg`.
std::vector<EventTemplate> default_templates(const SynthConfig& cfg);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);
/// Throws ContractError: fewer than two templates, a duration below 4
/// frames, or two profiles with cosine similarity >= 0.8.
void validate_templates(const std::vector<EventTemplate>& templates);

struct SynthConfig {
  std::uint32_t n_classes = 4;
  std::uint32_t n_mels = 24;
  std::uint32_t input_frames = 128;
  std::uint32_t temporal_pool = 2;
  /// Target fraction of active frames carrying two or more classes.
  double overlap = 0.3;
  double noise_max = 0.05;
  /// Gaussian band width as a fraction of the per-class band spacing.
  double band_width = 0.4;
  double min_amplitude = 1.0;
  double max_amplitude = 3.0;
  /// Per (frame, bin) energy factor drawn from [1 - jitter, 1 + jitter].
  double jitter = 0.2;
  std::uint32_t min_gap = 2;
  std::uint32_t max_gap = 10;
  /// Cap on the number of base (non-overlay) events; unset means as many as
  /// fit in the clip.
  std::optional<std::uint32_t> max_events;

  std::uint32_t output_frames() const { return input_frames / temporal_pool; }
  /// Throws ValidationError.
  void validate() const;
};

/// An event instance in model frames, [onset, offset).
struct PlacedEvent {
  std::uint32_t cls = 0;
  std::uint32_t onset = 0;
  std::uint32_t offset = 0;
  double amplitude = 0.0;
};

struct ClipRecord {
  std::string id;
  LabelMode mode = LabelMode::kStrong;
  std::uint32_t n_classes = 0;
  DenseArray features;  // [T0 x F], values exactly representable as f32
  std::optional<LabelGrid> strong;
  std::optional<std::vector<std::uint8_t>> weak;

  std::size_t input_frames() const { return features.dim(0); }
  std::size_t n_mels() const { return features.dim(1); }
};

struct GeneratedClip {
  ClipRecord record;  // strong mode, labels at model frame rate
  std::vector<PlacedEvent> events;
};

/// Places a monophonic track of base events separated by gaps, then gives
/// each base event an overlay of a different class with probability
/// min(1, overlap / 0.75), covering a uniform [0.5, 1] share of its span.
/// features = log(1 + sum of events + noise), rounded to f32.
GeneratedClip generate_clip(const std::vector<EventTemplate>& templates, const SynthConfig& cfg,
                            std::uint64_t seed, const std::string& id = "clip");

/// Returns a copy of `clip` relabelled for `mode`: weak keeps only the
/// column-wise OR, unlabeled keeps no labels.
ClipRecord with_mode(const ClipRecord& clip, LabelMode mode);

/// Frames with >= 2 active classes over frames with >= 1.
struct OverlapStats {
  std::size_t active_frames = 0;
  std::size_t overlapping_frames = 0;
  double fraction() const {
    return active_frames ? static_cast<double>(overlapping_frames) / active_frames : 0.0;
  }
  void add(const LabelGrid& y);
};

/// "SEDC", u32 version, u32 T0, u32 F, u32 C, u8 mode, T0*F little-endian
/// f32 features, then T*C label bytes (strong), C bytes (weak) or nothing.
std::string serialize_clip(const ClipRecord& clip);
ClipRecord parse_clip(std::string_view bytes, const std::string& id);
inline constexpr std::uint32_t kClipVersion = 1;

struct DatasetSpec {
  std::uint32_t strong = 0;
  std::uint32_t weak = 0;
  std::uint32_t unlabeled = 0;
  std::uint64_t seed = 0;
  SynthConfig synth;

  std::size_t total() const { return std::size_t{strong} + weak + unlabeled; }
  /// Keys: strong, weak, unlabeled, seed, overlap, n_classes, n_mels,
  /// input_frames, temporal_pool, noise_max, band_width, min_amplitude,
  /// max_amplitude, jitter. Throws ValidationError.
  static DatasetSpec load(const std::filesystem::path& path);
};

struct DatasetSummary {
  std::size_t clips = 0;
  OverlapStats overlap;  // over every clip, including the withheld labels
};

/// Clip i uses seed derive_seed(spec.seed, i); strong clips come first, then
/// weak, then unlabeled. The result does not depend on `parallel`.
std::vector<GeneratedClip> generate_clips(const DatasetSpec& spec, bool parallel = true);

/// Writes clips/<id>.sedc and manifest.tsv (`id<TAB>mode<TAB>relpath`).
/// Throws IoError naming the path when the directory is not writable.
DatasetSummary generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out,
                                bool parallel = true);

struct ManifestEntry {
  std::string id;
  LabelMode mode = LabelMode::kStrong;
  std::string path;  // relative to the dataset directory
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);

struct Dataset {
  std::filesystem::path root;
  std::vector<ClipRecord> clips;

  std::size_t count(LabelMode mode) const;
};

/// Loads every clip in manifest order. Throws ValidationError when a clip's
/// mode or dimensions disagree with the manifest or with the other clips.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace sedx
