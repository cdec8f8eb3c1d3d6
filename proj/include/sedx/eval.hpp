#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sedx/labels.hpp"
#include "sedx/ndarray.hpp"

namespace sedx {

/// Sliding-window median of a binary signal with edge replication.
/// Throws ContractError for an even or zero window.
std::vector<std::uint8_t> median_filter(std::span<const std::uint8_t> x, std::size_t window);
LabelGrid median_filter(const LabelGrid& grid, std::size_t window);

/// 1 where prob > threshold.
LabelGrid binarize(const DenseArray& probs, double threshold);

/// Closed-open frame interval [onset, offset).
struct Interval {
  std::uint32_t onset = 0;
  std::uint32_t offset = 0;
  bool operator==(const Interval&) const = default;
};

struct DecodedEvents {
  std::size_t frames = 0;
  std::vector<std::vector<Interval>> per_class;  // sorted, disjoint
};

/// Maximal runs of ones in every column.
DecodedEvents extract_events(const LabelGrid& grid);
LabelGrid rasterize(const DecodedEvents& events);
/// binarize -> median_filter per class -> extract_events.
DecodedEvents decode(const DenseArray& probs, double threshold, std::size_t window);

/// True/false positive and false negative counts of one class.
struct Confusion {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  /// Truth positives; zero makes every score not-applicable.
  std::size_t positives() const { return tp + fn; }
  bool applicable() const { return positives() > 0; }
  double precision() const;
  double recall() const;
  double f1() const;
  Confusion& operator+=(const Confusion& o);
};

/// Per-class confusions plus unweighted means over applicable classes.
/// Scores of a non-applicable class, and macro scores with no applicable
/// class, are NaN.
struct ScoreSet {
  std::vector<Confusion> per_class;

  double precision(std::size_t c) const;
  double recall(std::size_t c) const;
  double f1(std::size_t c) const;
  double macro_precision() const;
  double macro_recall() const;
  double macro_f1() const;
};

/// Frame-level tallies, with a frame counted as overlapping when its truth
/// row has two or more active classes.
struct FrameTally {
  ScoreSet all;
  ScoreSet overlapping;
  ScoreSet non_overlapping;

  explicit FrameTally(std::size_t classes = 0);
  /// Throws DimensionError on mismatched shapes.
  void add(const LabelGrid& pred, const LabelGrid& truth);
};

/// Greedy onset-order matching: each prediction takes the earliest unmatched
/// truth event of its class with both onset and offset within `collar`.
std::size_t match_events(const std::vector<Interval>& pred, const std::vector<Interval>& truth,
                         std::uint32_t collar);

struct EventTally {
  ScoreSet scores;
  std::uint32_t collar = 2;

  EventTally(std::size_t classes, std::uint32_t collar);
  void add(const DecodedEvents& pred, const DecodedEvents& truth);
};

struct MetricsReport {
  FrameTally frame;
  EventTally event;
  std::size_t clips = 0;
  std::size_t frames = 0;
  std::size_t overlapping_frames = 0;

  MetricsReport(std::size_t classes, std::uint32_t collar) : frame(classes), event(classes, collar) {}
  std::size_t classes() const { return frame.all.per_class.size(); }
};

/// One `metric.name = value` per line; "na" for not-applicable values.
std::string to_key_value(const MetricsReport& report);
/// Header: scope,subset,class,precision,recall,f1,tp,fp,fn
std::string to_csv(const MetricsReport& report);

/// Top two principal directions of the rows of X.
struct Pca2 {
  std::vector<double> mean;
  std::vector<double> q1;
  std::vector<double> q2;
  double var1 = 0.0;
  double var2 = 0.0;
  double total_var = 0.0;
  /// Fewer than two non-zero singular values; q2 and pc2 are zero.
  bool rank_deficient = false;

  std::pair<double, double> project(std::span<const double> row) const;
};

/// Power iteration with deflation on the covariance of X [N x D], seeded
/// start vector, tolerance 1e-8. Throws ContractError for fewer than 3 rows.
Pca2 pca_top2(const DenseArray& x, std::uint64_t seed = 1);

struct PcaRow {
  std::string clip_id;
  std::size_t frame = 0;
  double pc1 = 0.0;
  double pc2 = 0.0;
  std::uint8_t truth = 0;
};

/// Header: clip_id,frame,pc1,pc2,truth,rank_deficient
std::string pca_csv(const std::vector<PcaRow>& rows, bool rank_deficient);

struct ProbeOptions {
  std::size_t steps = 200;
  double step_size = 0.1;
  double l2 = 1e-3;
  std::uint64_t seed = 1;
};

/// Logistic regression on standardised features.
struct LogisticProbe {
  std::vector<double> mean;
  std::vector<double> scale;  // 1/std, 0 for constant features
  std::vector<double> weights;
  double bias = 0.0;

  double score(std::span<const double> row) const;
};

/// Full-batch gradient descent; standardisation statistics come from x.
LogisticProbe fit_logistic(const DenseArray& x, std::span<const std::uint8_t> y,
                           const ProbeOptions& opts);

/// Mann-Whitney ranking AUC with ties counted as one half. NaN when one
/// class is absent.
double ranking_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Fits on rows [0, split) and returns the AUC on rows [split, N). Empty
/// when either half holds a single label value.
std::optional<double> leakage_auc(const DenseArray& x, std::span<const std::uint8_t> y,
                                  std::size_t split, const ProbeOptions& opts);

}  // namespace sedx
