#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sedx/autodiff.hpp"
#include "sedx/labels.hpp"

namespace sedx {

/// Anchor, positive and negative frame indices of one class within one clip.
///
/// anchors: frames where the class is active. positives[k] belongs to
/// anchors[k]: frames j != anchor that are also active for the class and
/// whose label row shares exactly one active class with the anchor's row.
/// negatives: frames where the class is inactive; shared by every anchor.
struct SampleSets {
  std::size_t cls = 0;
  std::vector<std::size_t> anchors;
  std::vector<std::vector<std::size_t>> positives;
  std::vector<std::size_t> negatives;
};

SampleSets build_sample_sets(const LabelGrid& y, std::size_t cls);

/// Number of classes with at least one active frame.
std::size_t active_class_count(const LabelGrid& y);

struct ContrastiveOptions {
  double tau = 0.1;
  /// L2-normalise projected frames before taking dot products.
  bool normalize = false;
  /// Also put the positive pair in the denominator (InfoNCE form). Off by
  /// default: the denominator runs over negatives only.
  bool positive_in_denominator = false;
};

/// -log( exp(a.p / tau) / sum_k exp(a.n_k / tau) ) with a max-shifted
/// log-sum-exp. anchor/positive/negatives are vectors of equal length.
Var pair_loss(Var anchor, Var positive, std::span<const Var> negatives,
              const ContrastiveOptions& opts);

/// Frame-wise contrastive loss of one clip. projections[c] is [T x D'].
///
/// Per anchor: mean pair loss over its positives (0 without positives).
/// Per class: mean over anchors when there are at least two anchors and at
/// least one negative, else 0. Clip: sum over classes divided by the number
/// of classes present in y (0 if none).
Var fc_loss(std::span<const Var> projections, const LabelGrid& y, const ContrastiveOptions& opts);

/// Nested-loop reference for fc_loss on plain arrays, kept unoptimised.
double fc_loss_oracle(std::span<const DenseArray> projections, const LabelGrid& y,
                      const ContrastiveOptions& opts);

struct ScheduleConfig {
  double lambda1 = 0.05;
  double tau = 0.1;
  double rampup_epochs = 100.0;
  double pseudo_threshold = 0.5;

  /// Throws ValidationError.
  void validate() const;
};

/// exp(-5 (1 - t/E)^2) below E, 1 from E on.
double ramp_shape(double epoch, double rampup_epochs);
/// Weight of the pseudo-labelled contrastive term at epoch t.
double lambda2(double epoch, const ScheduleConfig& cfg);

/// 1 where prob > threshold (strict).
LabelGrid pseudo_labels(const DenseArray& probs, double threshold);

struct SedTerms {
  bool strong_bce = true;
  bool weak_bce = true;
  bool consistency = true;
  /// Multiplier on the consistency term, already including any ramp.
  double consistency_weight = 1.0;
};

/// What a clip brings to the detection loss.
struct ClipTarget {
  LabelMode mode = LabelMode::kUnlabeled;
  const LabelGrid* strong = nullptr;
  const std::vector<std::uint8_t>* weak = nullptr;
  /// Teacher frame probabilities [T x C]; required when consistency is on.
  const DenseArray* teacher_probs = nullptr;
};

/// Detection loss of one clip: frame BCE (strong clips) + clip BCE on the
/// pooled probabilities (weak clips) + weighted mean squared difference to the
/// teacher's frame probabilities (every clip). Batch loss is the clip mean.
Var sed_loss(Var probs, Var pooled, const ClipTarget& target, const SedTerms& terms);

struct LossReport {
  double l_sed = 0.0;
  double l_fc = 0.0;
  double l_sc = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double total = 0.0;
};

/// total = l_sed + lambda1 l_fc + lambda2(t) l_sc; the last term is dropped
/// when sc_enabled is false.
LossReport total_loss(double l_sed, double l_fc, double l_sc, double epoch,
                      const ScheduleConfig& cfg, bool sc_enabled);

}  // namespace sedx
