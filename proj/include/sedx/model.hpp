#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sedx/autodiff.hpp"
#include "sedx/ndarray.hpp"

namespace sedx {

/// Which classification head sits on top of the backbone.
enum class HeadKind : std::uint32_t {
  kShared = 0,     // one linear classifier on the frame features (baseline)
  kProjector = 1,  // per-class projector + per-class linear classifier
};

/// Dimensions of the detection network.
///
/// Backbone: two 3x3 conv blocks (tanh, 2x frequency pooling; the second
/// block also pools time by `temporal_pool`), then a bidirectional GRU whose
/// concatenated states are the frame features of width 2 * rnn_hidden.
struct ModelConfig {
  std::uint32_t n_mels = 24;
  std::uint32_t n_classes = 4;
  std::uint32_t input_frames = 128;
  std::uint32_t conv1_channels = 8;
  std::uint32_t conv2_channels = 16;
  std::uint32_t rnn_hidden = 16;
  std::uint32_t temporal_pool = 2;
  HeadKind head = HeadKind::kProjector;

  std::uint32_t backbone_dim() const { return 2 * rnn_hidden; }
  std::uint32_t projector_dim() const { return backbone_dim() / 4; }
  std::uint32_t output_frames() const { return input_frames / temporal_pool; }
  std::uint32_t sequence_width() const { return conv2_channels * (n_mels / 4); }

  /// Throws ContractError describing the first broken invariant.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { kConv, kRecurrent, kProjector, kClassifier };

struct NamedArray {
  std::string name;
  ParamGroup group;
  DenseArray value;
};

/// Every trainable array of the network, in the fixed checkpoint order:
///
///   conv1.weight [C1,1,3,3], conv1.bias [C1], conv2.weight [C2,C1,3,3],
///   conv2.bias [C2], then for dir in (fwd, bwd): gru.<dir>.w_input [In,3H],
///   gru.<dir>.w_hidden [H,3H], gru.<dir>.b_input [3H], gru.<dir>.b_hidden [3H].
///
/// Projector head, for each class c: proj.<c>.weight [D,D/4],
/// cls.<c>.weight [D/4,1], cls.<c>.bias [1].
/// Shared head: cls.weight [D,C], cls.bias [C].
class ModelParams {
 public:
  ModelParams() = default;
  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed);
  static ModelParams zeros(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedArray>& arrays() { return arrays_; }
  const std::vector<NamedArray>& arrays() const { return arrays_; }
  std::size_t size() const { return arrays_.size(); }
  DenseArray& operator[](std::size_t i) { return arrays_[i].value; }
  const DenseArray& operator[](std::size_t i) const { return arrays_[i].value; }

  std::size_t scalar_count() const;
  std::size_t scalar_count(ParamGroup group) const;
  bool all_finite() const;

  /// Index of the first head array; backbone arrays come before it.
  static constexpr std::size_t kHeadOffset = 12;
  std::size_t projector_index(std::size_t c) const;
  std::size_t classifier_weight_index(std::size_t c) const;
  std::size_t classifier_bias_index(std::size_t c) const;

  bool operator==(const ModelParams& other) const;

 private:
  ModelConfig config_;
  std::vector<NamedArray> arrays_;
};

/// Parameters placed on a tape, one Var per array in ModelParams order.
struct BoundParams {
  const ModelConfig* config = nullptr;
  std::vector<Var> vars;
};

/// trainable=false binds constants (no gradient flows into them).
BoundParams bind(Tape& tape, const ModelParams& params, bool trainable);

/// features [T0 x F] -> frame features U [T x D].
Var backbone_forward(const BoundParams& p, Var features);
/// Z^c = tanh(U W^c), [T x D/4]. Class index is zero-based.
Var project(const BoundParams& p, Var frame_features, std::size_t c);
/// probs[t][c] = sigmoid(Z^c_t . v^c + b^c), [T x C].
Var classify(const BoundParams& p, std::span<const Var> projections);
/// Shared-head probabilities from U, [T x C].
Var classify_shared(const BoundParams& p, Var frame_features);
/// Clip-level probabilities: temporal max per class, [C].
Var weak_pool(Var probs);

struct ModelOutputs {
  Var frame_features;
  std::vector<Var> projections;  // empty for the shared head
  Var probs;
};

ModelOutputs forward(const BoundParams& p, Var features);

/// Per-class feature matrices used by diagnostics: Z^c for the projector
/// head, U for every class with the shared head.
std::vector<DenseArray> class_features(const ModelOutputs& out, std::uint32_t n_classes);

/// teacher <- decay * teacher + (1 - decay) * student, per parameter.
void ema_update(const ModelParams& student, ModelParams& teacher, double decay);

/// Student and teacher parameters as stored on disk.
struct Checkpoint {
  ModelParams student;
  ModelParams teacher;
};

/// "SEDM", version u32, ten config u32s (n_mels, n_classes, input_frames,
/// backbone_dim, projector_dim, conv1_channels, conv2_channels, rnn_hidden,
/// temporal_pool, head), set count u32 (= 2), then every array of the
/// student followed by every array of the teacher as little-endian f64.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace sedx
