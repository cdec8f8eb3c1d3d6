#include "sedx/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "sedx/errors.hpp"
#include "sedx/random.hpp"

namespace sedx {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::vector<std::uint8_t> median_filter(std::span<const std::uint8_t> x, std::size_t window) {
  if (window == 0 || window % 2 == 0) {
    throw ContractError("median_filter: window must be odd and positive, got " + std::to_string(window));
  }
  const std::size_t n = x.size();
  const auto half = static_cast<std::ptrdiff_t>(window / 2);
  std::vector<std::uint8_t> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    std::size_t ones = 0;
    for (std::ptrdiff_t k = -half; k <= half; ++k) {
      const auto at = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(t) + k, 0,
                                                 static_cast<std::ptrdiff_t>(n) - 1);
      ones += x[static_cast<std::size_t>(at)] ? 1 : 0;
    }
    out[t] = 2 * ones > window ? 1 : 0;
  }
  return out;
}

LabelGrid median_filter(const LabelGrid& grid, std::size_t window) {
  LabelGrid out(grid.frames(), grid.classes());
  for (std::size_t c = 0; c < grid.classes(); ++c) {
    const auto col = median_filter(grid.column(c), window);
    for (std::size_t t = 0; t < grid.frames(); ++t) out.set(t, c, col[t]);
  }
  return out;
}

LabelGrid binarize(const DenseArray& probs, double threshold) {
  if (probs.rank() != 2) throw DimensionError("binarize: expected [T x C], got " + shape_string(probs.shape()));
  LabelGrid g(probs.rows(), probs.cols());
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    for (std::size_t c = 0; c < probs.cols(); ++c) g.set(t, c, probs(t, c) > threshold);
  }
  return g;
}

DecodedEvents extract_events(const LabelGrid& grid) {
  DecodedEvents ev;
  ev.frames = grid.frames();
  ev.per_class.resize(grid.classes());
  for (std::size_t c = 0; c < grid.classes(); ++c) {
    std::size_t t = 0;
    while (t < grid.frames()) {
      if (!grid.at(t, c)) {
        ++t;
        continue;
      }
      const std::size_t start = t;
      while (t < grid.frames() && grid.at(t, c)) ++t;
      ev.per_class[c].push_back({static_cast<std::uint32_t>(start), static_cast<std::uint32_t>(t)});
    }
  }
  return ev;
}

LabelGrid rasterize(const DecodedEvents& events) {
  LabelGrid g(events.frames, events.per_class.size());
  for (std::size_t c = 0; c < events.per_class.size(); ++c) {
    for (const Interval& iv : events.per_class[c]) {
      if (iv.onset >= iv.offset || iv.offset > events.frames) {
        throw ContractError("rasterize: interval out of range");
      }
      for (std::uint32_t t = iv.onset; t < iv.offset; ++t) g.set(t, c, true);
    }
  }
  return g;
}

DecodedEvents decode(const DenseArray& probs, double threshold, std::size_t window) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("decode: threshold must lie in (0, 1)");
  return extract_events(median_filter(binarize(probs, threshold), window));
}

double Confusion::precision() const {
  if (!applicable()) return kNaN;
  return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
}

double Confusion::recall() const {
  if (!applicable()) return kNaN;
  return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

double Confusion::f1() const {
  if (!applicable()) return kNaN;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

Confusion& Confusion::operator+=(const Confusion& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

double ScoreSet::precision(std::size_t c) const { return per_class.at(c).precision(); }
double ScoreSet::recall(std::size_t c) const { return per_class.at(c).recall(); }
double ScoreSet::f1(std::size_t c) const { return per_class.at(c).f1(); }

namespace {

template <typename Fn>
double macro(const std::vector<Confusion>& per_class, Fn score) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Confusion& c : per_class) {
    if (!c.applicable()) continue;
    sum += score(c);
    ++n;
  }
  return n ? sum / static_cast<double>(n) : kNaN;
}

}  // namespace

double ScoreSet::macro_precision() const {
  return macro(per_class, [](const Confusion& c) { return c.precision(); });
}
double ScoreSet::macro_recall() const {
  return macro(per_class, [](const Confusion& c) { return c.recall(); });
}
double ScoreSet::macro_f1() const {
  return macro(per_class, [](const Confusion& c) { return c.f1(); });
}

FrameTally::FrameTally(std::size_t classes) {
  all.per_class.resize(classes);
  overlapping.per_class.resize(classes);
  non_overlapping.per_class.resize(classes);
}

void FrameTally::add(const LabelGrid& pred, const LabelGrid& truth) {
  if (pred.frames() != truth.frames() || pred.classes() != truth.classes() ||
      truth.classes() != all.per_class.size()) {
    throw DimensionError("frame metrics: prediction [" + std::to_string(pred.frames()) + "x" +
                         std::to_string(pred.classes()) + "] vs truth [" +
                         std::to_string(truth.frames()) + "x" + std::to_string(truth.classes()) + "]");
  }
  for (std::size_t t = 0; t < truth.frames(); ++t) {
    ScoreSet& subset = truth.active_in_frame(t) >= 2 ? overlapping : non_overlapping;
    for (std::size_t c = 0; c < truth.classes(); ++c) {
      const bool p = pred.at(t, c), y = truth.at(t, c);
      Confusion d;
      d.tp = p && y;
      d.fp = p && !y;
      d.fn = !p && y;
      all.per_class[c] += d;
      subset.per_class[c] += d;
    }
  }
}

std::size_t match_events(const std::vector<Interval>& pred, const std::vector<Interval>& truth,
                         std::uint32_t collar) {
  std::vector<std::size_t> order(pred.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pred[a].onset < pred[b].onset; });
  std::vector<std::size_t> truth_order(truth.size());
  std::iota(truth_order.begin(), truth_order.end(), 0);
  std::stable_sort(truth_order.begin(), truth_order.end(),
                   [&](std::size_t a, std::size_t b) { return truth[a].onset < truth[b].onset; });
  auto near = [collar](std::uint32_t a, std::uint32_t b) { return (a > b ? a - b : b - a) <= collar; };
  std::vector<bool> used(truth.size(), false);
  std::size_t matches = 0;
  for (std::size_t i : order) {
    for (std::size_t j : truth_order) {
      if (used[j] || !near(pred[i].onset, truth[j].onset) || !near(pred[i].offset, truth[j].offset)) {
        continue;
      }
      used[j] = true;
      ++matches;
      break;
    }
  }
  return matches;
}

EventTally::EventTally(std::size_t classes, std::uint32_t collar_frames) : collar(collar_frames) {
  scores.per_class.resize(classes);
}

void EventTally::add(const DecodedEvents& pred, const DecodedEvents& truth) {
  if (pred.per_class.size() != scores.per_class.size() ||
      truth.per_class.size() != scores.per_class.size()) {
    throw DimensionError("event metrics: class count mismatch");
  }
  for (std::size_t c = 0; c < scores.per_class.size(); ++c) {
    const std::size_t m = match_events(pred.per_class[c], truth.per_class[c], collar);
    Confusion d;
    d.tp = m;
    d.fp = pred.per_class[c].size() - m;
    d.fn = truth.per_class[c].size() - m;
    scores.per_class[c] += d;
  }
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "na";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void emit_scores(std::string& out, const std::string& prefix, const ScoreSet& s) {
  out += prefix + ".macro.precision = " + fmt(s.macro_precision()) + "\n";
  out += prefix + ".macro.recall = " + fmt(s.macro_recall()) + "\n";
  out += prefix + ".macro.f1 = " + fmt(s.macro_f1()) + "\n";
  for (std::size_t c = 0; c < s.per_class.size(); ++c) {
    const std::string p = prefix + ".class" + std::to_string(c);
    out += p + ".precision = " + fmt(s.precision(c)) + "\n";
    out += p + ".recall = " + fmt(s.recall(c)) + "\n";
    out += p + ".f1 = " + fmt(s.f1(c)) + "\n";
  }
}

void emit_csv(std::string& out, const std::string& scope, const std::string& subset, const ScoreSet& s) {
  Confusion total;
  for (std::size_t c = 0; c < s.per_class.size(); ++c) {
    const Confusion& k = s.per_class[c];
    total += k;
    out += scope + "," + subset + "," + std::to_string(c) + "," + fmt(k.precision()) + "," +
           fmt(k.recall()) + "," + fmt(k.f1()) + "," + std::to_string(k.tp) + "," +
           std::to_string(k.fp) + "," + std::to_string(k.fn) + "\n";
  }
  out += scope + "," + subset + ",macro," + fmt(s.macro_precision()) + "," + fmt(s.macro_recall()) +
         "," + fmt(s.macro_f1()) + "," + std::to_string(total.tp) + "," + std::to_string(total.fp) +
         "," + std::to_string(total.fn) + "\n";
}

}  // namespace

std::string to_key_value(const MetricsReport& r) {
  std::string out;
  out += "clips = " + std::to_string(r.clips) + "\n";
  out += "frames = " + std::to_string(r.frames) + "\n";
  out += "overlapping_frames = " + std::to_string(r.overlapping_frames) + "\n";
  emit_scores(out, "frame.all", r.frame.all);
  emit_scores(out, "frame.overlapping", r.frame.overlapping);
  emit_scores(out, "frame.non_overlapping", r.frame.non_overlapping);
  out += "event.collar = " + std::to_string(r.event.collar) + "\n";
  emit_scores(out, "event", r.event.scores);
  return out;
}

std::string to_csv(const MetricsReport& r) {
  std::string out = "scope,subset,class,precision,recall,f1,tp,fp,fn\n";
  emit_csv(out, "frame", "all", r.frame.all);
  emit_csv(out, "frame", "overlapping", r.frame.overlapping);
  emit_csv(out, "frame", "non_overlapping", r.frame.non_overlapping);
  emit_csv(out, "event", "all", r.event.scores);
  return out;
}

std::pair<double, double> Pca2::project(std::span<const double> row) const {
  double a = 0.0, b = 0.0;
  for (std::size_t d = 0; d < mean.size(); ++d) {
    const double v = row[d] - mean[d];
    a += v * q1[d];
    b += v * q2[d];
  }
  return {a, b};
}

namespace {

using Matrix = std::vector<double>;  // square, row-major

std::vector<double> mat_vec(const Matrix& m, const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i] += m[i * n + j] * v[j];
  }
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

bool normalize(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  if (n == 0.0) return false;
  for (double& e : v) e /= n;
  return true;
}

void remove_component(std::vector<double>& v, const std::vector<double>& q) {
  const double p = dot(v, q);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * q[i];
}

// Leading eigenpair of a symmetric PSD matrix, restricted to the complement
// of `avoid` when it is non-empty. Returns eigenvalue 0 and a zero vector
// when the matrix vanishes on that subspace.
std::pair<double, std::vector<double>> power_iteration(const Matrix& m, std::size_t n, Rng& rng,
                                                       const std::vector<double>& avoid) {
  constexpr double kTol = 1e-8;
  constexpr int kMaxIter = 100000;
  std::vector<double> v(n);
  for (double& e : v) e = rng.uniform(-1.0, 1.0);
  if (!avoid.empty()) remove_component(v, avoid);
  if (!normalize(v)) return {0.0, std::vector<double>(n, 0.0)};
  for (int it = 0; it < kMaxIter; ++it) {
    std::vector<double> w = mat_vec(m, v);
    if (!avoid.empty()) remove_component(w, avoid);
    if (!normalize(w)) return {0.0, std::vector<double>(n, 0.0)};
    double diff = 0.0;
    for (std::size_t i = 0; i < n; ++i) diff = std::max(diff, std::abs(w[i] - v[i]));
    v = std::move(w);
    if (diff < kTol) break;
  }
  return {dot(v, mat_vec(m, v)), v};
}

}  // namespace

Pca2 pca_top2(const DenseArray& x, std::uint64_t seed) {
  if (x.rank() != 2) throw DimensionError("pca: expected [N x D], got " + shape_string(x.shape()));
  const std::size_t N = x.rows(), D = x.cols();
  if (N < 3) throw ContractError("pca: need at least 3 rows, got " + std::to_string(N));
  Pca2 p;
  p.mean.assign(D, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t d = 0; d < D; ++d) p.mean[d] += x(i, d);
  }
  for (double& m : p.mean) m /= static_cast<double>(N);
  Matrix cov(D * D, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t a = 0; a < D; ++a) {
      const double va = x(i, a) - p.mean[a];
      for (std::size_t b = 0; b < D; ++b) cov[a * D + b] += va * (x(i, b) - p.mean[b]);
    }
  }
  for (double& v : cov) v /= static_cast<double>(N);
  for (std::size_t d = 0; d < D; ++d) p.total_var += cov[d * D + d];

  Rng rng(seed);
  const double floor = 1e-12 * std::max(p.total_var, 1e-300);
  auto [l1, q1] = power_iteration(cov, D, rng, {});
  if (!(l1 > floor)) {
    p.q1.assign(D, 0.0);
    p.q2.assign(D, 0.0);
    p.rank_deficient = true;
    return p;
  }
  // Deflate: C - l1 q1 q1^T, iterated on the complement of q1.
  Matrix deflated = cov;
  for (std::size_t a = 0; a < D; ++a) {
    for (std::size_t b = 0; b < D; ++b) deflated[a * D + b] -= l1 * q1[a] * q1[b];
  }
  auto [l2, q2] = power_iteration(deflated, D, rng, q1);
  p.q1 = q1;
  p.var1 = l1;
  if (l2 > floor && D >= 2) {
    remove_component(q2, q1);
    normalize(q2);
    p.q2 = q2;
    p.var2 = l2;
  } else {
    p.q2.assign(D, 0.0);
    p.rank_deficient = true;
  }
  return p;
}

std::string pca_csv(const std::vector<PcaRow>& rows, bool rank_deficient) {
  std::string out = "clip_id,frame,pc1,pc2,truth,rank_deficient\n";
  char buf[96];
  for (const PcaRow& r : rows) {
    std::snprintf(buf, sizeof buf, ",%zu,%.9g,%.9g,%u,%d\n", r.frame, r.pc1, r.pc2,
                  static_cast<unsigned>(r.truth), rank_deficient ? 1 : 0);
    out += r.clip_id;
    out += buf;
  }
  return out;
}

double LogisticProbe::score(std::span<const double> row) const {
  double s = bias;
  for (std::size_t d = 0; d < weights.size(); ++d) s += weights[d] * (row[d] - mean[d]) * scale[d];
  return s;
}

LogisticProbe fit_logistic(const DenseArray& x, std::span<const std::uint8_t> y,
                           const ProbeOptions& opts) {
  if (x.rank() != 2 || x.rows() != y.size()) throw DimensionError("fit_logistic: rows and labels differ");
  const std::size_t N = x.rows(), D = x.cols();
  if (N == 0) throw ContractError("fit_logistic: no rows");
  LogisticProbe p;
  p.mean.assign(D, 0.0);
  p.scale.assign(D, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t d = 0; d < D; ++d) p.mean[d] += x(i, d);
  }
  for (double& m : p.mean) m /= static_cast<double>(N);
  for (std::size_t d = 0; d < D; ++d) {
    double var = 0.0;
    for (std::size_t i = 0; i < N; ++i) var += (x(i, d) - p.mean[d]) * (x(i, d) - p.mean[d]);
    const double sd = std::sqrt(var / static_cast<double>(N));
    p.scale[d] = sd > 1e-12 ? 1.0 / sd : 0.0;
  }
  DenseArray z(Shape{N, D});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t d = 0; d < D; ++d) z(i, d) = (x(i, d) - p.mean[d]) * p.scale[d];
  }
  Rng rng(opts.seed);
  p.weights.resize(D);
  for (double& w : p.weights) w = rng.uniform(-0.01, 0.01);
  std::vector<double> grad(D);
  for (std::size_t step = 0; step < opts.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double grad_b = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double s = p.bias;
      for (std::size_t d = 0; d < D; ++d) s += p.weights[d] * z(i, d);
      const double r = 1.0 / (1.0 + std::exp(-s)) - y[i];
      for (std::size_t d = 0; d < D; ++d) grad[d] += r * z(i, d);
      grad_b += r;
    }
    for (std::size_t d = 0; d < D; ++d) {
      p.weights[d] -= opts.step_size * (grad[d] / static_cast<double>(N) + opts.l2 * p.weights[d]);
    }
    p.bias -= opts.step_size * grad_b / static_cast<double>(N);
  }
  return p;
}

double ranking_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw DimensionError("ranking_auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        pos_rank_sum += avg_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return kNaN;
  const double p = static_cast<double>(pos);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

std::optional<double> leakage_auc(const DenseArray& x, std::span<const std::uint8_t> y,
                                  std::size_t split, const ProbeOptions& opts) {
  if (x.rank() != 2 || x.rows() != y.size()) throw DimensionError("leakage_auc: rows and labels differ");
  if (split == 0 || split >= y.size()) return std::nullopt;
  auto both = [](std::span<const std::uint8_t> s) {
    const auto ones = std::count(s.begin(), s.end(), std::uint8_t{1});
    return ones > 0 && static_cast<std::size_t>(ones) < s.size();
  };
  if (!both(y.first(split)) || !both(y.subspan(split))) return std::nullopt;
  const std::size_t D = x.cols();
  DenseArray train(Shape{split, D});
  std::copy(x.data().begin(), x.data().begin() + static_cast<std::ptrdiff_t>(split * D), train.data().begin());
  const LogisticProbe probe = fit_logistic(train, y.first(split), opts);
  std::vector<double> scores;
  for (std::size_t i = split; i < x.rows(); ++i) scores.push_back(probe.score(x.data().subspan(i * D, D)));
  return ranking_auc(scores, y.subspan(split));
}

}  // namespace sedx
