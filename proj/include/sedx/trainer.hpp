#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sedx/eval.hpp"
#include "sedx/losses.hpp"
#include "sedx/model.hpp"
#include "sedx/synthgen.hpp"

namespace sedx {

/// Ablation axis: each mode adds exactly one ingredient to the previous one.
enum class TrainMode { kBaseline, kProjector, kProjectorFc, kProjectorFcSc };

std::string to_string(TrainMode mode);
/// Accepts "baseline", "projector", "projector+fc", "projector+fc+sc".
TrainMode parse_train_mode(const std::string& text);

inline bool uses_projector(TrainMode m) { return m != TrainMode::kBaseline; }
inline bool uses_fc(TrainMode m) { return m == TrainMode::kProjectorFc || m == TrainMode::kProjectorFcSc; }
inline bool uses_sc(TrainMode m) { return m == TrainMode::kProjectorFcSc; }

struct InferenceOptions {
  bool use_student = false;
  double threshold = 0.5;
  std::uint32_t median_window = 3;
  std::uint32_t collar = 2;
  bool parallel = true;
};

/// Everything a training run needs. Defaults are the documented ones; see
/// parse_config for the key names.
struct RunConfig {
  std::filesystem::path dataset;
  TrainMode mode = TrainMode::kProjector;
  std::filesystem::path output_dir;

  ScheduleConfig schedule;
  double step_size = 0.02;
  double momentum = 0.9;
  std::uint32_t batch_size = 8;
  /// Unlabeled clips drawn alongside each labelled batch when they are used.
  std::uint32_t unlabeled_batch_size = 8;
  std::uint32_t epochs = 150;
  std::uint64_t seed = 1;
  double ema_decay = 0.99;
  /// 0 writes the checkpoint and log only at the end.
  std::uint32_t checkpoint_every = 0;

  SedTerms sed_terms;
  ContrastiveOptions contrastive;

  std::uint32_t conv1_channels = 8;
  std::uint32_t conv2_channels = 16;
  std::uint32_t rnn_hidden = 16;
  std::uint32_t temporal_pool = 2;

  InferenceOptions inference;
  bool parallel = true;

  /// Throws ValidationError.
  void validate() const;
};

/// Flat `key = value` file with `#` comments. Relative paths resolve against
/// the file's directory; output_dir defaults to <dir>/run. Checks that the
/// dataset manifest exists and, for projector+fc+sc, that it lists unlabeled
/// clips. Throws ValidationError naming the line and key.
RunConfig parse_config(const std::filesystem::path& path);
RunConfig parse_config_text(const std::string& text, const std::string& source,
                            const std::filesystem::path& base_dir);

/// Model dimensions for a dataset under a run configuration.
ModelConfig model_config_for(const RunConfig& cfg, const Dataset& data);

/// Mean loss terms of one epoch plus which terms were active.
struct EpochRecord {
  std::uint32_t epoch = 0;
  double l_sed = 0.0;
  double l_fc = 0.0;
  double l_sc = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double total = 0.0;
  double step_size = 0.0;
  std::size_t batches = 0;
  /// Clip-level contributions to the contrastive terms over the epoch.
  std::size_t fc_clips = 0;
  std::size_t sc_clips = 0;
};

/// Per-epoch records. The CSV carries only deterministic values so that
/// seeded reruns are byte-identical; wall time lives in a separate sidecar.
struct RunLog {
  std::vector<EpochRecord> epochs;
  std::vector<double> wall_seconds;

  static constexpr const char* kHeader =
      "epoch,l_sed,l_fc,l_sc,lambda1,lambda2,total,step_size,batches,fc_clips,sc_clips";
  std::string csv() const;
  std::string timing_csv() const;
  /// Throws ValidationError on a malformed log.
  static RunLog parse_csv(const std::string& text);
};

/// One optimisation batch: labelled clips followed by unlabeled clips.
struct BatchResult {
  LossReport report;
  std::size_t sed_clips = 0;
  std::size_t fc_clips = 0;
  std::size_t sc_clips = 0;
  /// One array per parameter, ModelParams order; empty without gradients.
  std::vector<DenseArray> grads;
};

/// Loss and gradient of the batch objective
///   mean_sed(L_SED) + lambda1 mean_fc(L_FC) + lambda2(epoch) mean_sc(L_SC),
/// where each mean runs over the clips for which that term is defined.
/// Per-clip tapes run in parallel when `parallel`; gradients are summed in
/// clip order so the result does not depend on threading.
BatchResult batch_gradient(const ModelParams& student, const ModelParams& teacher,
                           std::span<const ClipRecord* const> clips, const RunConfig& cfg,
                           double epoch, bool with_grads, bool parallel);

struct TrainResult {
  Checkpoint checkpoint;
  RunLog log;
  /// Teacher metrics on the strongly labelled training clips, when any.
  std::optional<MetricsReport> final_metrics;
};

/// Runs the whole schedule in memory. When `out_dir` is set, writes
/// checkpoint.sedm and run_log.csv there every checkpoint_every epochs and at
/// the end, plus timing.csv and final_metrics.txt at the end.
/// NaN or infinite batch loss throws NumericError naming epoch and batch.
TrainResult train(const RunConfig& cfg, const Dataset& data,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Loads the dataset named by cfg and writes outputs to cfg.output_dir.
TrainResult train(const RunConfig& cfg);

/// Throws ValidationError naming both shapes when the checkpoint's model
/// does not fit the dataset.
void check_compatible(const ModelConfig& model, const Dataset& data);

/// Frame probabilities [T x C] of one clip.
DenseArray infer(const ModelParams& params, const DenseArray& features);

/// Teacher (or student) inference on every strongly labelled clip, decode,
/// frame metrics with the overlap split and event metrics. Throws
/// ValidationError when the dataset has no strongly labelled clip.
MetricsReport evaluate(const Checkpoint& ckpt, const Dataset& data, const InferenceOptions& opts);

/// Writes metrics.txt and metrics.csv.
void write_metrics(const std::filesystem::path& dir, const MetricsReport& report);

struct ProbeReport {
  std::size_t classes = 0;
  /// auc[c * classes + k]: probe on class-c features predicting class k.
  std::vector<std::optional<double>> auc;
  std::vector<Pca2> pca;
  std::vector<std::vector<PcaRow>> pca_rows;

  std::optional<double> at(std::size_t c, std::size_t k) const { return auc[c * classes + k]; }
  /// Means over the available entries; NaN when none is available.
  double diagonal_mean() const;
  double diagonal_min() const;
  double off_diagonal_mean() const;
  /// Header: feature_class,target_class,kind,auc with kind self or cross.
  std::string leakage_csv() const;
};

/// Leakage probe for every ordered class pair on the strongly labelled
/// clips; the first half of the clips trains each probe and the rest scores
/// it. Also collects per-class PCA projections.
ProbeReport probe(const Checkpoint& ckpt, const Dataset& data, const InferenceOptions& opts,
                  const ProbeOptions& probe_opts = {});

/// Writes leakage.csv and pca_class<c>.csv.
void write_probe(const std::filesystem::path& dir, const ProbeReport& report);

}  // namespace sedx
