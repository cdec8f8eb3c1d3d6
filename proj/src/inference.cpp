#include <cmath>
#include <limits>

#include "sedx/binio.hpp"
#include "sedx/errors.hpp"
#include "sedx/trainer.hpp"

namespace sedx {

void check_compatible(const ModelConfig& model, const Dataset& data) {
  if (data.clips.empty()) throw ValidationError(data.root.string() + ": dataset has no clips");
  const ClipRecord& first = data.clips.front();
  std::size_t label_frames = model.output_frames();
  for (const ClipRecord& c : data.clips) {
    if (c.strong) {
      label_frames = c.strong->frames();
      break;
    }
  }
  if (first.n_mels() != model.n_mels || first.input_frames() != model.input_frames ||
      first.n_classes != model.n_classes || label_frames != model.output_frames()) {
    throw ValidationError(
        "model expects [input_frames=" + std::to_string(model.input_frames) +
        ", n_mels=" + std::to_string(model.n_mels) + ", classes=" + std::to_string(model.n_classes) +
        ", frames=" + std::to_string(model.output_frames()) + "] but dataset " + data.root.string() +
        " has [input_frames=" + std::to_string(first.input_frames()) +
        ", n_mels=" + std::to_string(first.n_mels()) + ", classes=" + std::to_string(first.n_classes) +
        ", frames=" + std::to_string(label_frames) + "]");
  }
}

DenseArray infer(const ModelParams& params, const DenseArray& features) {
  Tape tape;
  const BoundParams b = bind(tape, params, false);
  return forward(b, tape.constant(features)).probs.value();
}

namespace {

std::vector<const ClipRecord*> strong_clips(const Dataset& data, const char* what) {
  std::vector<const ClipRecord*> out;
  for (const ClipRecord& c : data.clips) {
    if (c.mode == LabelMode::kStrong) out.push_back(&c);
  }
  if (out.empty()) {
    throw ValidationError(data.root.string() + ": no strongly labelled clips to " + what);
  }
  return out;
}

template <typename Fn>
void parallel_over(std::size_t n, bool parallel, Fn body) {
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) if (parallel)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
#pragma omp critical(sedx_infer_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace

MetricsReport evaluate(const Checkpoint& ckpt, const Dataset& data, const InferenceOptions& opts) {
  const ModelParams& params = opts.use_student ? ckpt.student : ckpt.teacher;
  check_compatible(params.config(), data);
  const auto clips = strong_clips(data, "evaluate");
  std::vector<DenseArray> probs(clips.size());
  parallel_over(clips.size(), opts.parallel,
                [&](std::size_t i) { probs[i] = infer(params, clips[i]->features); });

  MetricsReport report(params.config().n_classes, opts.collar);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const LabelGrid& truth = *clips[i]->strong;
    const LabelGrid pred = median_filter(binarize(probs[i], opts.threshold), opts.median_window);
    report.frame.add(pred, truth);
    report.event.add(extract_events(pred), extract_events(truth));
    ++report.clips;
    report.frames += truth.frames();
    for (std::size_t t = 0; t < truth.frames(); ++t) report.overlapping_frames += truth.active_in_frame(t) >= 2;
  }
  return report;
}

void write_metrics(const std::filesystem::path& dir, const MetricsReport& report) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create output directory: " + ec.message());
  binio::write_file_atomic(dir / "metrics.txt", to_key_value(report));
  binio::write_file_atomic(dir / "metrics.csv", to_csv(report));
}

namespace {

template <typename Pick>
double mean_of(const ProbeReport& r, Pick pick) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < r.classes; ++c) {
    for (std::size_t k = 0; k < r.classes; ++k) {
      const auto v = r.at(c, k);
      if (!v || !pick(c, k)) continue;
      s += *v;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

double ProbeReport::diagonal_mean() const {
  return mean_of(*this, [](std::size_t c, std::size_t k) { return c == k; });
}

double ProbeReport::off_diagonal_mean() const {
  return mean_of(*this, [](std::size_t c, std::size_t k) { return c != k; });
}

double ProbeReport::diagonal_min() const {
  double m = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t c = 0; c < classes; ++c) {
    const auto v = at(c, c);
    if (v && !(*v >= m)) m = *v;
  }
  return m;
}

std::string ProbeReport::leakage_csv() const {
  std::string out = "feature_class,target_class,kind,auc\n";
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t k = 0; k < classes; ++k) {
      char buf[32] = "na";
      if (const auto v = at(c, k)) std::snprintf(buf, sizeof buf, "%.6f", *v);
      out += std::to_string(c) + "," + std::to_string(k) + "," + (c == k ? "self" : "cross") + "," +
             buf + "\n";
    }
  }
  return out;
}

ProbeReport probe(const Checkpoint& ckpt, const Dataset& data, const InferenceOptions& opts,
                  const ProbeOptions& probe_opts) {
  const ModelParams& params = opts.use_student ? ckpt.student : ckpt.teacher;
  check_compatible(params.config(), data);
  const auto clips = strong_clips(data, "probe");
  if (clips.size() < 2) throw ValidationError(data.root.string() + ": probe needs two or more strongly labelled clips");
  const std::size_t C = params.config().n_classes;

  std::vector<std::vector<DenseArray>> feats(clips.size());
  parallel_over(clips.size(), opts.parallel, [&](std::size_t i) {
    Tape tape;
    const BoundParams b = bind(tape, params, false);
    feats[i] = class_features(forward(b, tape.constant(clips[i]->features)), static_cast<std::uint32_t>(C));
  });

  const std::size_t T = clips[0]->strong->frames();
  const std::size_t rows = clips.size() * T;
  const std::size_t split = (clips.size() / 2) * T;
  std::vector<std::vector<std::uint8_t>> truth(C, std::vector<std::uint8_t>(rows));
  for (std::size_t i = 0; i < clips.size(); ++i) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t k = 0; k < C; ++k) truth[k][i * T + t] = clips[i]->strong->at(t, k);
    }
  }

  ProbeReport r;
  r.classes = C;
  r.auc.resize(C * C);
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t D = feats[0][c].cols();
    DenseArray z(Shape{rows, D});
    for (std::size_t i = 0; i < clips.size(); ++i) {
      const auto src = feats[i][c].data();
      std::copy(src.begin(), src.end(), z.data().begin() + static_cast<std::ptrdiff_t>(i * T * D));
    }
    for (std::size_t k = 0; k < C; ++k) r.auc[c * C + k] = leakage_auc(z, truth[k], split, probe_opts);

    const Pca2 pca = pca_top2(z, probe_opts.seed);
    std::vector<PcaRow> out;
    out.reserve(rows);
    for (std::size_t i = 0; i < clips.size(); ++i) {
      for (std::size_t t = 0; t < T; ++t) {
        const auto [a, b] = pca.project(z.data().subspan((i * T + t) * D, D));
        out.push_back({clips[i]->id, t, a, b, truth[c][i * T + t]});
      }
    }
    r.pca.push_back(pca);
    r.pca_rows.push_back(std::move(out));
  }
  return r;
}

void write_probe(const std::filesystem::path& dir, const ProbeReport& report) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create output directory: " + ec.message());
  binio::write_file_atomic(dir / "leakage.csv", report.leakage_csv());
  for (std::size_t c = 0; c < report.classes; ++c) {
    binio::write_file_atomic(dir / ("pca_class" + std::to_string(c) + ".csv"),
                             pca_csv(report.pca_rows[c], report.pca[c].rank_deficient));
  }
}

}  // namespace sedx
