#include "sedx/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <sstream>

#include "sedx/binio.hpp"
#include "sedx/errors.hpp"
#include "sedx/kvconfig.hpp"
#include "sedx/random.hpp"

namespace sedx {

std::vector<EventTemplate> default_templates(std::uint32_t n_classes, std::uint32_t n_mels) {
  SynthConfig cfg;
  cfg.n_classes = n_classes;
  cfg.n_mels = n_mels;
  return default_templates(cfg);
}

std::vector<EventTemplate> default_templates(const SynthConfig& cfg) {
  const std::uint32_t n_classes = cfg.n_classes, n_mels = cfg.n_mels;
  std::vector<EventTemplate> out;
  const double band = static_cast<double>(n_mels) / n_classes;
  const double sigma = cfg.band_width * band;
  for (std::uint32_t c = 0; c < n_classes; ++c) {
    EventTemplate t;
    t.cls = c;
    t.min_amplitude = cfg.min_amplitude;
    t.max_amplitude = cfg.max_amplitude;
    const double main = (c + 0.5) * band;
    const double second = std::fmod(main + 0.5 * n_mels + 0.5 * band * 0.5, n_mels);
    t.profile.resize(n_mels);
    double peak = 0.0;
    for (std::uint32_t f = 0; f < n_mels; ++f) {
      const double a = (f - main) / sigma;
      const double b = (f - second) / sigma;
      t.profile[f] = std::exp(-0.5 * a * a) + 0.35 * std::exp(-0.5 * b * b);
      peak = std::max(peak, t.profile[f]);
    }
    for (double& v : t.profile) v /= peak;
    out.push_back(std::move(t));
  }
  return out;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

void validate_templates(const std::vector<EventTemplate>& templates) {
  if (templates.size() < 2) throw ContractError("synthgen: need at least two event templates");
  for (std::size_t i = 0; i < templates.size(); ++i) {
    const EventTemplate& t = templates[i];
    if (t.cls != i) throw ContractError("synthgen: template " + std::to_string(i) + " has class " + std::to_string(t.cls));
    if (t.min_frames < 4 || t.max_frames < t.min_frames) {
      throw ContractError("synthgen: template " + std::to_string(i) + " duration range is invalid");
    }
    if (t.profile.size() != templates[0].profile.size()) {
      throw ContractError("synthgen: templates have different profile lengths");
    }
    for (double v : t.profile) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ContractError("synthgen: negative profile energy");
    }
    for (std::size_t j = 0; j < i; ++j) {
      const double cs = cosine_similarity(t.profile, templates[j].profile);
      if (cs >= 0.8) {
        throw ContractError("synthgen: profiles " + std::to_string(j) + " and " + std::to_string(i) +
                            " have cosine similarity " + std::to_string(cs));
      }
    }
  }
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("synth config: " + what); };
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (n_mels == 0) fail("n_mels must be positive");
  if (temporal_pool == 0 || input_frames == 0 || input_frames % temporal_pool != 0) {
    fail("input_frames must be a positive multiple of temporal_pool");
  }
  if (!(overlap >= 0.0 && overlap <= 1.0)) fail("overlap must lie in [0, 1]");
  if (!(noise_max >= 0.0)) fail("noise_max must be >= 0");
  if (!(band_width > 0.0)) fail("band_width must be > 0");
  if (!(min_amplitude > 0.0 && max_amplitude >= min_amplitude)) {
    fail("amplitudes must satisfy 0 < min_amplitude <= max_amplitude");
  }
  if (!(jitter >= 0.0 && jitter < 1.0)) fail("jitter must lie in [0, 1)");
  if (max_gap < min_gap) fail("max_gap must be >= min_gap");
}

namespace {

double envelope(double pos, const EventTemplate& t) {
  constexpr double kFloor = 0.5;
  if (pos < t.attack) return kFloor + (1.0 - kFloor) * pos / t.attack;
  if (pos > 1.0 - t.decay) return kFloor + (1.0 - kFloor) * (1.0 - pos) / t.decay;
  return 1.0;
}

double draw_amplitude(Rng& rng, const EventTemplate& t) {
  return rng.uniform(t.min_amplitude, t.max_amplitude);
}

}  // namespace

GeneratedClip generate_clip(const std::vector<EventTemplate>& templates, const SynthConfig& cfg,
                            std::uint64_t seed, const std::string& id) {
  cfg.validate();
  validate_templates(templates);
  if (templates.size() != cfg.n_classes || templates[0].profile.size() != cfg.n_mels) {
    throw ContractError("synthgen: templates do not match the configured classes and bins");
  }
  Rng rng(seed);
  const std::uint32_t T = cfg.output_frames();
  const std::uint32_t C = cfg.n_classes;
  const double overlay_prob = std::min(1.0, cfg.overlap / 0.75);

  GeneratedClip out;
  std::uint32_t cursor = static_cast<std::uint32_t>(rng.integer(0, cfg.max_gap));
  std::uint32_t base_events = 0;
  while (!cfg.max_events || base_events < *cfg.max_events) {
    const auto cls = static_cast<std::uint32_t>(rng.index(C));
    const EventTemplate& t = templates[cls];
    if (cursor >= T || T - cursor < t.min_frames) break;
    const auto len = std::min<std::uint32_t>(
        static_cast<std::uint32_t>(rng.integer(t.min_frames, t.max_frames)), T - cursor);
    out.events.push_back({cls, cursor, cursor + len, draw_amplitude(rng, t)});
    ++base_events;
    if (rng.bernoulli(overlay_prob)) {
      auto other = static_cast<std::uint32_t>(rng.index(C - 1));
      if (other >= cls) ++other;
      const EventTemplate& o = templates[other];
      const double share = rng.uniform(0.5, 1.0);
      const auto span = std::clamp<std::uint32_t>(
          static_cast<std::uint32_t>(std::lround(share * len)), std::min(4u, len), len);
      const auto start = cursor + static_cast<std::uint32_t>(rng.integer(0, len - span));
      out.events.push_back({other, start, start + span, draw_amplitude(rng, o)});
    }
    cursor += len + static_cast<std::uint32_t>(rng.integer(cfg.min_gap, cfg.max_gap));
  }

  LabelGrid y(T, C);
  const std::uint32_t T0 = cfg.input_frames, F = cfg.n_mels, pool = cfg.temporal_pool;
  DenseArray energy(Shape{T0, F});
  for (const PlacedEvent& e : out.events) {
    for (std::uint32_t t = e.onset; t < e.offset; ++t) y.set(t, e.cls, true);
    const EventTemplate& t = templates[e.cls];
    const std::uint32_t first = e.onset * pool, last = e.offset * pool;
    for (std::uint32_t f0 = first; f0 < last; ++f0) {
      const double pos = (f0 - first + 0.5) / static_cast<double>(last - first);
      const double level = e.amplitude * envelope(pos, t);
      for (std::uint32_t f = 0; f < F; ++f) energy(f0, f) += level * t.profile[f] * rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
    }
  }
  for (double& v : energy.data()) {
    v += rng.uniform(0.0, cfg.noise_max);
    v = static_cast<double>(static_cast<float>(std::log1p(v)));
  }

  out.record.id = id;
  out.record.mode = LabelMode::kStrong;
  out.record.n_classes = C;
  out.record.features = std::move(energy);
  out.record.strong = std::move(y);
  return out;
}

ClipRecord with_mode(const ClipRecord& clip, LabelMode mode) {
  if (!clip.strong) throw ContractError("with_mode: clip has no strong labels to derive from");
  ClipRecord r = clip;
  r.mode = mode;
  if (mode != LabelMode::kStrong) r.strong.reset();
  if (mode == LabelMode::kWeak) r.weak = clip.strong->weak();
  return r;
}

void OverlapStats::add(const LabelGrid& y) {
  for (std::size_t t = 0; t < y.frames(); ++t) {
    const std::size_t n = y.active_in_frame(t);
    active_frames += n >= 1;
    overlapping_frames += n >= 2;
  }
}

std::string serialize_clip(const ClipRecord& clip) {
  const DenseArray& x = clip.features;
  if (x.rank() != 2) throw DimensionError("serialize_clip: features must be [T0 x F]");
  std::string out = "SEDC";
  binio::put_u32(out, kClipVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(x.dim(0)));
  binio::put_u32(out, static_cast<std::uint32_t>(x.dim(1)));
  binio::put_u32(out, clip.n_classes);
  binio::put_u8(out, static_cast<std::uint8_t>(clip.mode));
  for (double v : x.data()) binio::put_f32(out, static_cast<float>(v));
  switch (clip.mode) {
    case LabelMode::kStrong:
      if (!clip.strong || clip.strong->classes() != clip.n_classes) {
        throw ContractError("serialize_clip: strong clip '" + clip.id + "' lacks matching labels");
      }
      for (std::uint8_t b : clip.strong->bits()) binio::put_u8(out, b);
      break;
    case LabelMode::kWeak:
      if (!clip.weak || clip.weak->size() != clip.n_classes) {
        throw ContractError("serialize_clip: weak clip '" + clip.id + "' lacks matching labels");
      }
      for (std::uint8_t b : *clip.weak) binio::put_u8(out, b);
      break;
    case LabelMode::kUnlabeled:
      break;
  }
  return out;
}

ClipRecord parse_clip(std::string_view bytes, const std::string& id) {
  binio::Reader r(bytes, "clip " + id);
  if (r.take(4) != "SEDC") throw IoError("clip " + id + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kClipVersion) {
    throw IoError("clip " + id + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t T0 = r.u32(), F = r.u32(), C = r.u32();
  const std::uint8_t mode = r.u8();
  if (mode > 2) throw IoError("clip " + id + ": unknown label mode " + std::to_string(mode));
  if (T0 == 0 || F == 0 || C == 0) throw IoError("clip " + id + ": zero dimension in header");
  ClipRecord clip;
  clip.id = id;
  clip.mode = static_cast<LabelMode>(mode);
  clip.n_classes = C;
  clip.features = DenseArray(Shape{T0, F});
  for (double& v : clip.features.data()) v = r.f32();
  auto read_bits = [&](std::size_t n) {
    std::vector<std::uint8_t> bits(n);
    for (auto& b : bits) {
      b = r.u8();
      if (b > 1) throw IoError("clip " + id + ": label byte is not 0 or 1");
    }
    return bits;
  };
  switch (clip.mode) {
    case LabelMode::kStrong: {
      const std::size_t rem = r.remaining();
      if (rem == 0 || rem % C != 0) throw IoError("clip " + id + ": strong label block has bad length");
      clip.strong = LabelGrid(rem / C, C, read_bits(rem));
      break;
    }
    case LabelMode::kWeak:
      clip.weak = read_bits(C);
      break;
    case LabelMode::kUnlabeled:
      break;
  }
  if (r.remaining() != 0) throw IoError("clip " + id + ": trailing bytes");
  return clip;
}

DatasetSpec DatasetSpec::load(const std::filesystem::path& path) {
  const KeyValueFile kv = KeyValueFile::load(path);
  kv.require_known({"strong", "weak", "unlabeled", "seed", "overlap", "n_classes", "n_mels",
                    "input_frames", "temporal_pool", "noise_max", "band_width", "min_amplitude",
                    "max_amplitude", "jitter"});
  auto u32 = [&](const std::string& key, std::uint32_t fallback) {
    const std::uint64_t v = kv.count(key, fallback);
    if (v > 0xFFFFFFFFull) throw ValidationError(kv.source() + ": key '" + key + "' is too large");
    return static_cast<std::uint32_t>(v);
  };
  DatasetSpec s;
  s.strong = u32("strong", 0);
  s.weak = u32("weak", 0);
  s.unlabeled = u32("unlabeled", 0);
  s.seed = kv.count("seed", 0);
  s.synth.overlap = kv.real("overlap", s.synth.overlap);
  s.synth.n_classes = u32("n_classes", s.synth.n_classes);
  s.synth.n_mels = u32("n_mels", s.synth.n_mels);
  s.synth.input_frames = u32("input_frames", s.synth.input_frames);
  s.synth.temporal_pool = u32("temporal_pool", s.synth.temporal_pool);
  s.synth.noise_max = kv.real("noise_max", s.synth.noise_max);
  s.synth.band_width = kv.real("band_width", s.synth.band_width);
  s.synth.min_amplitude = kv.real("min_amplitude", s.synth.min_amplitude);
  s.synth.max_amplitude = kv.real("max_amplitude", s.synth.max_amplitude);
  s.synth.jitter = kv.real("jitter", s.synth.jitter);
  s.synth.validate();
  return s;
}

namespace {

std::string clip_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%05zu", i);
  return buf;
}

LabelMode mode_for(const DatasetSpec& spec, std::size_t i) {
  if (i < spec.strong) return LabelMode::kStrong;
  if (i < std::size_t{spec.strong} + spec.weak) return LabelMode::kWeak;
  return LabelMode::kUnlabeled;
}

}  // namespace

std::vector<GeneratedClip> generate_clips(const DatasetSpec& spec, bool parallel) {
  spec.synth.validate();
  const auto templates = default_templates(spec.synth);
  validate_templates(templates);
  const std::size_t n = spec.total();
  std::vector<GeneratedClip> clips(n);
  std::exception_ptr error;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      GeneratedClip g = generate_clip(templates, spec.synth, derive_seed(spec.seed, i), clip_id(i));
      g.record = with_mode(g.record, mode_for(spec, i));
      clips[i] = std::move(g);
    } catch (...) {
#pragma omp critical(sedx_generate_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return clips;
}

DatasetSummary generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out,
                                bool parallel) {
  const auto clips = generate_clips(spec, parallel);
  DatasetSummary summary;
  summary.clips = clips.size();
  for (const auto& g : clips) {
    LabelGrid y(spec.synth.output_frames(), spec.synth.n_classes);
    for (const PlacedEvent& e : g.events) {
      for (std::uint32_t t = e.onset; t < e.offset; ++t) y.set(t, e.cls, true);
    }
    summary.overlap.add(y);
  }

  std::error_code ec;
  std::filesystem::create_directories(out / "clips", ec);
  if (ec) throw IoError(out.string() + ": cannot create dataset directory: " + ec.message());
  std::string manifest;
  for (const auto& g : clips) {
    const std::string rel = "clips/" + g.record.id + ".sedc";
    binio::write_file_atomic(out / rel, serialize_clip(g.record));
    manifest += g.record.id + "\t" + to_string(g.record.mode) + "\t" + rel + "\n";
  }
  binio::write_file_atomic(out / "manifest.tsv", manifest);
  std::ostringstream info;
  info << "clips = " << summary.clips << "\n"
       << "strong = " << spec.strong << "\nweak = " << spec.weak
       << "\nunlabeled = " << spec.unlabeled << "\n"
       << "active_frames = " << summary.overlap.active_frames << "\n"
       << "overlapping_frames = " << summary.overlap.overlapping_frames << "\n"
       << "realized_overlap = " << summary.overlap.fraction() << "\n";
  binio::write_file_atomic(out / "summary.txt", info.str());
  return summary;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  const std::filesystem::path path = dir / "manifest.tsv";
  std::istringstream in(binio::read_file(path));
  std::vector<ManifestEntry> entries;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) {
      fields.push_back(line.substr(start, tab - start));
    }
    fields.push_back(line.substr(start));
    const std::string where = path.string() + ":" + std::to_string(number) + ": ";
    if (fields.size() != 3 || fields[0].empty() || fields[2].empty()) {
      throw ValidationError(where + "expected 'id<TAB>mode<TAB>path'");
    }
    try {
      entries.push_back({fields[0], parse_label_mode(fields[1]), fields[2]});
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  return entries;
}

std::size_t Dataset::count(LabelMode mode) const {
  return static_cast<std::size_t>(
      std::count_if(clips.begin(), clips.end(), [&](const ClipRecord& c) { return c.mode == mode; }));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.root = dir;
  const auto entries = read_manifest(dir);
  for (const ManifestEntry& e : entries) {
    const std::filesystem::path p = dir / e.path;
    ClipRecord clip = parse_clip(binio::read_file(p), e.id);
    if (clip.mode != e.mode) {
      throw ValidationError(p.string() + ": manifest says " + to_string(e.mode) + " but the file holds " +
                            to_string(clip.mode) + " labels");
    }
    if (!ds.clips.empty()) {
      const ClipRecord& ref = ds.clips.front();
      if (clip.input_frames() != ref.input_frames() || clip.n_mels() != ref.n_mels() ||
          clip.n_classes != ref.n_classes) {
        throw ValidationError(p.string() + ": dimensions differ from " + ref.id);
      }
    }
    ds.clips.push_back(std::move(clip));
  }
  const ClipRecord* first_strong = nullptr;
  for (const ClipRecord& c : ds.clips) {
    if (!c.strong) continue;
    if (!first_strong) first_strong = &c;
    if (c.strong->frames() != first_strong->strong->frames()) {
      throw ValidationError("clip " + c.id + ": strong label frames differ from " + first_strong->id);
    }
  }
  return ds;
}

}  // namespace sedx
