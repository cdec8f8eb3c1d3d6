#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "sedx/binio.hpp"
#include "sedx/errors.hpp"
#include "sedx/kvconfig.hpp"
#include "sedx/trainer.hpp"

namespace sedx {

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kBaseline:
      return "baseline";
    case TrainMode::kProjector:
      return "projector";
    case TrainMode::kProjectorFc:
      return "projector+fc";
    case TrainMode::kProjectorFcSc:
      return "projector+fc+sc";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& text) {
  for (TrainMode m : {TrainMode::kBaseline, TrainMode::kProjector, TrainMode::kProjectorFc,
                      TrainMode::kProjectorFcSc}) {
    if (to_string(m) == text) return m;
  }
  throw ValidationError("unknown mode '" + text +
                        "' (expected baseline, projector, projector+fc or projector+fc+sc)");
}

void RunConfig::validate() const {
  schedule.validate();
  if (epochs == 0) throw ValidationError("epochs must be >= 1");
  if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
  if (uses_sc(mode) && unlabeled_batch_size == 0) {
    throw ValidationError("unlabeled_batch_size must be >= 1 for projector+fc+sc");
  }
  if (!(step_size > 0.0)) throw ValidationError("step_size must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ValidationError("ema_decay must lie in [0, 1)");
  if (!(inference.threshold > 0.0 && inference.threshold < 1.0)) {
    throw ValidationError("threshold must lie in (0, 1)");
  }
  if (inference.median_window % 2 == 0) throw ValidationError("median_window must be odd and >= 1");
  if (conv1_channels == 0 || conv2_channels == 0 || rnn_hidden == 0 || rnn_hidden % 2 != 0) {
    throw ValidationError("conv channels must be >= 1 and rnn_hidden a positive even number");
  }
  if (temporal_pool == 0) throw ValidationError("temporal_pool must be >= 1");
}

RunConfig parse_config_text(const std::string& text, const std::string& source,
                            const std::filesystem::path& base_dir) {
  const KeyValueFile kv = KeyValueFile::parse(text, source);
  kv.require_known({"dataset",
                    "mode",
                    "output_dir",
                    "epochs",
                    "batch_size",
                    "unlabeled_batch_size",
                    "step_size",
                    "momentum",
                    "seed",
                    "ema_decay",
                    "checkpoint_every",
                    "lambda1",
                    "tau",
                    "rampup_epochs",
                    "pseudo_threshold",
                    "normalize",
                    "positive_in_denominator",
                    "strong_bce",
                    "weak_bce",
                    "consistency",
                    "threshold",
                    "median_window",
                    "collar",
                    "conv1_channels",
                    "conv2_channels",
                    "rnn_hidden",
                    "temporal_pool",
                    "parallel"});
  auto u32 = [&](const std::string& key, std::uint32_t fallback) {
    const std::uint64_t v = kv.count(key, fallback);
    if (v > 0xFFFFFFFFull) throw ValidationError(source + ": key '" + key + "' is out of range");
    return static_cast<std::uint32_t>(v);
  };
  auto resolve = [&](const std::filesystem::path& p) { return p.is_absolute() ? p : base_dir / p; };

  RunConfig c;
  c.dataset = resolve(kv.required_text("dataset"));
  try {
    c.mode = parse_train_mode(kv.required_text("mode"));
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": key 'mode': " + e.what());
  }
  c.output_dir = resolve(kv.text("output_dir", "run"));
  c.epochs = u32("epochs", c.epochs);
  c.batch_size = u32("batch_size", c.batch_size);
  c.unlabeled_batch_size = u32("unlabeled_batch_size", c.batch_size);
  c.step_size = kv.real("step_size", c.step_size);
  c.momentum = kv.real("momentum", c.momentum);
  c.seed = kv.count("seed", c.seed);
  c.ema_decay = kv.real("ema_decay", c.ema_decay);
  c.checkpoint_every = u32("checkpoint_every", c.checkpoint_every);
  c.schedule.lambda1 = kv.real("lambda1", c.schedule.lambda1);
  c.schedule.tau = kv.real("tau", c.schedule.tau);
  c.schedule.rampup_epochs = kv.real("rampup_epochs", c.schedule.rampup_epochs);
  c.schedule.pseudo_threshold = kv.real("pseudo_threshold", c.schedule.pseudo_threshold);
  c.contrastive.tau = c.schedule.tau;
  c.contrastive.normalize = kv.flag("normalize", c.contrastive.normalize);
  c.contrastive.positive_in_denominator =
      kv.flag("positive_in_denominator", c.contrastive.positive_in_denominator);
  c.sed_terms.strong_bce = kv.flag("strong_bce", c.sed_terms.strong_bce);
  c.sed_terms.weak_bce = kv.flag("weak_bce", c.sed_terms.weak_bce);
  c.sed_terms.consistency = kv.flag("consistency", c.sed_terms.consistency);
  c.inference.threshold = kv.real("threshold", c.inference.threshold);
  c.inference.median_window = u32("median_window", c.inference.median_window);
  c.inference.collar = u32("collar", c.inference.collar);
  c.conv1_channels = u32("conv1_channels", c.conv1_channels);
  c.conv2_channels = u32("conv2_channels", c.conv2_channels);
  c.rnn_hidden = u32("rnn_hidden", c.rnn_hidden);
  c.temporal_pool = u32("temporal_pool", c.temporal_pool);
  c.parallel = kv.flag("parallel", c.parallel);
  c.inference.parallel = c.parallel;
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }

  if (!std::filesystem::exists(c.dataset / "manifest.tsv")) {
    throw ValidationError(source + ": key 'dataset': no manifest.tsv under " + c.dataset.string());
  }
  if (uses_sc(c.mode)) {
    std::size_t unlabeled = 0;
    for (const ManifestEntry& e : read_manifest(c.dataset)) unlabeled += e.mode == LabelMode::kUnlabeled;
    if (unlabeled == 0) {
      throw ValidationError(source + ": mode projector+fc+sc needs unlabeled clips, but " +
                            c.dataset.string() + " lists none");
    }
  }
  return c;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = binio::read_file(path);
  } catch (const IoError& e) {
    throw ValidationError(e.what());
  }
  return parse_config_text(text, path.string(), path.parent_path());
}

namespace {

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string RunLog::csv() const {
  std::string out = std::string(kHeader) + "\n";
  for (const EpochRecord& r : epochs) {
    out += std::to_string(r.epoch) + "," + exact(r.l_sed) + "," + exact(r.l_fc) + "," + exact(r.l_sc) +
           "," + exact(r.lambda1) + "," + exact(r.lambda2) + "," + exact(r.total) + "," +
           exact(r.step_size) + "," + std::to_string(r.batches) + "," + std::to_string(r.fc_clips) +
           "," + std::to_string(r.sc_clips) + "\n";
  }
  return out;
}

std::string RunLog::timing_csv() const {
  std::string out = "epoch,wall_seconds\n";
  for (std::size_t i = 0; i < wall_seconds.size() && i < epochs.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", wall_seconds[i]);
    out += std::to_string(epochs[i].epoch) + "," + buf + "\n";
  }
  return out;
}

RunLog RunLog::parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw ValidationError("run log: unexpected header");
  RunLog log;
  int number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t comma; (comma = line.find(',', start)) != std::string::npos; start = comma + 1) {
      f.push_back(line.substr(start, comma - start));
    }
    f.push_back(line.substr(start));
    const std::string where = "run log line " + std::to_string(number) + ": ";
    if (f.size() != 11) throw ValidationError(where + "expected 11 fields");
    auto real = [&](const std::string& s) {
      double v = 0.0;
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ValidationError(where + "bad number '" + s + "'");
      return v;
    };
    auto whole = [&](const std::string& s) {
      std::uint64_t v = 0;
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ValidationError(where + "bad count '" + s + "'");
      return v;
    };
    EpochRecord r;
    r.epoch = static_cast<std::uint32_t>(whole(f[0]));
    r.l_sed = real(f[1]);
    r.l_fc = real(f[2]);
    r.l_sc = real(f[3]);
    r.lambda1 = real(f[4]);
    r.lambda2 = real(f[5]);
    r.total = real(f[6]);
    r.step_size = real(f[7]);
    r.batches = whole(f[8]);
    r.fc_clips = whole(f[9]);
    r.sc_clips = whole(f[10]);
    if (!log.epochs.empty() && r.epoch <= log.epochs.back().epoch) {
      throw ValidationError(where + "epochs must increase");
    }
    log.epochs.push_back(r);
  }
  return log;
}

}  // namespace sedx
