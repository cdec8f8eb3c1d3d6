#include "sedx/model.hpp"

#include <cmath>

#include "sedx/binio.hpp"
#include "sedx/errors.hpp"
#include "sedx/random.hpp"

namespace sedx {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("model config: " + what); };
  if (n_mels == 0 || n_mels % 4 != 0) fail("n_mels must be a positive multiple of 4");
  if (n_classes == 0) fail("n_classes must be positive");
  if (conv1_channels == 0 || conv2_channels == 0) fail("conv channels must be positive");
  if (rnn_hidden == 0) fail("rnn_hidden must be positive");
  if (backbone_dim() % 4 != 0) fail("backbone_dim must be divisible by 4");
  if (temporal_pool < 1) fail("temporal_pool must be >= 1");
  if (input_frames == 0 || input_frames % temporal_pool != 0) {
    fail("input_frames must be a positive multiple of temporal_pool");
  }
  if (head != HeadKind::kShared && head != HeadKind::kProjector) fail("unknown head kind");
}

namespace {

std::vector<NamedArray> layout(const ModelConfig& c) {
  const std::size_t C1 = c.conv1_channels, C2 = c.conv2_channels, H = c.rnn_hidden;
  const std::size_t In = c.sequence_width(), D = c.backbone_dim(), P = c.projector_dim();
  std::vector<NamedArray> a;
  a.push_back({"conv1.weight", ParamGroup::kConv, DenseArray(Shape{C1, 1, 3, 3})});
  a.push_back({"conv1.bias", ParamGroup::kConv, DenseArray(Shape{C1})});
  a.push_back({"conv2.weight", ParamGroup::kConv, DenseArray(Shape{C2, C1, 3, 3})});
  a.push_back({"conv2.bias", ParamGroup::kConv, DenseArray(Shape{C2})});
  for (const char* dir : {"fwd", "bwd"}) {
    const std::string base = std::string("gru.") + dir + ".";
    a.push_back({base + "w_input", ParamGroup::kRecurrent, DenseArray(Shape{In, 3 * H})});
    a.push_back({base + "w_hidden", ParamGroup::kRecurrent, DenseArray(Shape{H, 3 * H})});
    a.push_back({base + "b_input", ParamGroup::kRecurrent, DenseArray(Shape{3 * H})});
    a.push_back({base + "b_hidden", ParamGroup::kRecurrent, DenseArray(Shape{3 * H})});
  }
  if (c.head == HeadKind::kProjector) {
    for (std::size_t k = 0; k < c.n_classes; ++k) {
      const std::string id = std::to_string(k);
      a.push_back({"proj." + id + ".weight", ParamGroup::kProjector, DenseArray(Shape{D, P})});
      a.push_back({"cls." + id + ".weight", ParamGroup::kClassifier, DenseArray(Shape{P, 1})});
      a.push_back({"cls." + id + ".bias", ParamGroup::kClassifier, DenseArray(Shape{1})});
    }
  } else {
    a.push_back({"cls.weight", ParamGroup::kClassifier, DenseArray(Shape{D, c.n_classes})});
    a.push_back({"cls.bias", ParamGroup::kClassifier, DenseArray(Shape{c.n_classes})});
  }
  return a;
}

// fan_in used for the init bound of each array.
std::size_t fan_in(const ModelConfig& c, const NamedArray& a) {
  switch (a.group) {
    case ParamGroup::kConv:
      return a.name.starts_with("conv1") ? 9 : 9 * c.conv1_channels;
    case ParamGroup::kRecurrent:
      return a.name.ends_with("w_input") ? c.sequence_width() : c.rnn_hidden;
    case ParamGroup::kProjector:
      return c.backbone_dim();
    case ParamGroup::kClassifier:
      return c.head == HeadKind::kProjector ? c.projector_dim() : c.backbone_dim();
  }
  return 1;
}

}  // namespace

ModelParams ModelParams::zeros(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config_ = config;
  p.arrays_ = layout(config);
  return p;
}

ModelParams ModelParams::initialize(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = zeros(config);
  Rng rng(derive_seed(seed, 0x5EDD));
  for (NamedArray& a : p.arrays_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in(config, a)));
    for (double& v : a.value.data()) v = rng.uniform(-bound, bound);
  }
  return p;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& a : arrays_) n += a.value.size();
  return n;
}

std::size_t ModelParams::scalar_count(ParamGroup group) const {
  std::size_t n = 0;
  for (const auto& a : arrays_) {
    if (a.group == group) n += a.value.size();
  }
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& a : arrays_) {
    if (!a.value.all_finite()) return false;
  }
  return true;
}

std::size_t ModelParams::projector_index(std::size_t c) const {
  if (config_.head != HeadKind::kProjector) throw ContractError("model has no projectors");
  if (c >= config_.n_classes) {
    throw ContractError("class index " + std::to_string(c) + " out of range for " +
                        std::to_string(config_.n_classes) + " classes");
  }
  return kHeadOffset + 3 * c;
}

std::size_t ModelParams::classifier_weight_index(std::size_t c) const {
  if (config_.head == HeadKind::kShared) return kHeadOffset;
  return projector_index(c) + 1;
}

std::size_t ModelParams::classifier_bias_index(std::size_t c) const {
  if (config_.head == HeadKind::kShared) return kHeadOffset + 1;
  return projector_index(c) + 2;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (!(config_ == other.config_) || arrays_.size() != other.arrays_.size()) return false;
  for (std::size_t i = 0; i < arrays_.size(); ++i) {
    if (!(arrays_[i].value == other.arrays_[i].value)) return false;
  }
  return true;
}

BoundParams bind(Tape& tape, const ModelParams& params, bool trainable) {
  BoundParams b;
  b.config = &params.config();
  b.vars.reserve(params.size());
  for (const auto& a : params.arrays()) {
    b.vars.push_back(trainable ? tape.parameter(a.value) : tape.constant(a.value));
  }
  return b;
}

Var backbone_forward(const BoundParams& p, Var features) {
  const ModelConfig& c = *p.config;
  const DenseArray& xv = features.value();
  if (xv.rank() != 2 || xv.dim(0) != c.input_frames || xv.dim(1) != c.n_mels) {
    throw DimensionError("backbone_forward: expected features [" + std::to_string(c.input_frames) +
                         "x" + std::to_string(c.n_mels) + "], got " + shape_string(xv.shape()));
  }
  Tape& tape = *features.tape();
  // Rank-3 view of the input as a single channel.
  Var x = tape.record(xv.reshaped(Shape{1, xv.dim(0), xv.dim(1)}), {features},
                      [id = features.id()](const Tape&, std::size_t, const DenseArray& g,
                                           Adjoints& adj) {
                        if (!adj.wants(id)) return;
                        DenseArray& d = adj.at(id);
                        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                      });
  const auto& v = p.vars;
  Var h = avg_pool2d(tanh(conv2d(x, v[0], v[1])), 1, 2);
  h = avg_pool2d(tanh(conv2d(h, v[2], v[3])), c.temporal_pool, 2);
  Var seq = to_sequence(h);
  Var fwd = gru(seq, v[4], v[5], v[6], v[7], false);
  Var bwd = gru(seq, v[8], v[9], v[10], v[11], true);
  const Var parts[] = {fwd, bwd};
  return concat_cols(parts);
}

Var project(const BoundParams& p, Var frame_features, std::size_t c) {
  const ModelConfig& cfg = *p.config;
  if (cfg.head != HeadKind::kProjector) throw ContractError("project: model has no projectors");
  if (c >= cfg.n_classes) {
    throw ContractError("project: class index " + std::to_string(c) + " out of range for " +
                        std::to_string(cfg.n_classes) + " classes");
  }
  return tanh(matmul(frame_features, p.vars[ModelParams::kHeadOffset + 3 * c]));
}

Var classify(const BoundParams& p, std::span<const Var> projections) {
  const ModelConfig& cfg = *p.config;
  if (projections.size() != cfg.n_classes) {
    throw ContractError("classify: expected " + std::to_string(cfg.n_classes) + " projections");
  }
  std::vector<Var> logits;
  logits.reserve(cfg.n_classes);
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    const std::size_t base = ModelParams::kHeadOffset + 3 * c;
    logits.push_back(add_bias(matmul(projections[c], p.vars[base + 1]), p.vars[base + 2]));
  }
  return sigmoid(concat_cols(logits));
}

Var classify_shared(const BoundParams& p, Var frame_features) {
  if (p.config->head != HeadKind::kShared) throw ContractError("classify_shared: projector model");
  return sigmoid(add_bias(matmul(frame_features, p.vars[ModelParams::kHeadOffset]),
                          p.vars[ModelParams::kHeadOffset + 1]));
}

Var weak_pool(Var probs) { return max_over_axis(probs, 0); }

ModelOutputs forward(const BoundParams& p, Var features) {
  ModelOutputs out;
  out.frame_features = backbone_forward(p, features);
  if (p.config->head == HeadKind::kProjector) {
    for (std::size_t c = 0; c < p.config->n_classes; ++c) {
      out.projections.push_back(project(p, out.frame_features, c));
    }
    out.probs = classify(p, out.projections);
  } else {
    out.probs = classify_shared(p, out.frame_features);
  }
  return out;
}

std::vector<DenseArray> class_features(const ModelOutputs& out, std::uint32_t n_classes) {
  std::vector<DenseArray> feats;
  for (std::uint32_t c = 0; c < n_classes; ++c) {
    feats.push_back(out.projections.empty() ? out.frame_features.value()
                                            : out.projections[c].value());
  }
  return feats;
}

void ema_update(const ModelParams& student, ModelParams& teacher, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) {
    throw ContractError("ema_update: decay must lie in [0, 1), got " + std::to_string(decay));
  }
  if (!(student.config() == teacher.config()) || student.size() != teacher.size()) {
    throw ContractError("ema_update: student and teacher layouts differ");
  }
  for (std::size_t i = 0; i < student.size(); ++i) {
    if (student[i].shape() != teacher[i].shape()) {
      throw ContractError("ema_update: shape mismatch for " + student.arrays()[i].name);
    }
    auto s = student[i].data();
    auto t = teacher[i].data();
    for (std::size_t k = 0; k < s.size(); ++k) t[k] = decay * t[k] + (1.0 - decay) * s[k];
  }
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig& c = ckpt.student.config();
  if (!(c == ckpt.teacher.config())) throw ContractError("checkpoint: student/teacher configs differ");
  std::string out = "SEDM";
  binio::put_u32(out, kCheckpointVersion);
  for (std::uint32_t v : {c.n_mels, c.n_classes, c.input_frames, c.backbone_dim(), c.projector_dim(),
                          c.conv1_channels, c.conv2_channels, c.rnn_hidden, c.temporal_pool,
                          static_cast<std::uint32_t>(c.head)}) {
    binio::put_u32(out, v);
  }
  binio::put_u32(out, 2);
  for (const ModelParams* p : {&ckpt.student, &ckpt.teacher}) {
    for (const auto& a : p->arrays()) {
      for (double v : a.value.data()) binio::put_f64(out, v);
    }
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  binio::Reader r(bytes, "checkpoint");
  if (r.take(4) != "SEDM") throw IoError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  ModelConfig c;
  c.n_mels = r.u32();
  c.n_classes = r.u32();
  c.input_frames = r.u32();
  const std::uint32_t backbone_dim = r.u32();
  const std::uint32_t projector_dim = r.u32();
  c.conv1_channels = r.u32();
  c.conv2_channels = r.u32();
  c.rnn_hidden = r.u32();
  c.temporal_pool = r.u32();
  c.head = static_cast<HeadKind>(r.u32());
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
  if (backbone_dim != c.backbone_dim() || projector_dim != c.projector_dim()) {
    throw IoError("checkpoint: inconsistent backbone/projector dimensions");
  }
  if (r.u32() != 2) throw IoError("checkpoint: expected student and teacher parameter sets");
  Checkpoint ckpt{ModelParams::zeros(c), ModelParams::zeros(c)};
  for (ModelParams* p : {&ckpt.student, &ckpt.teacher}) {
    for (auto& a : p->arrays()) {
      for (double& v : a.value.data()) v = r.f64();
    }
  }
  if (r.remaining() != 0) throw IoError("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  binio::write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return parse_checkpoint(binio::read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace sedx
