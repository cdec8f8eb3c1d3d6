#include "sedx/losses.hpp"

#include <cmath>

#include "sedx/errors.hpp"

namespace sedx {

SampleSets build_sample_sets(const LabelGrid& y, std::size_t cls) {
  if (cls >= y.classes()) {
    throw ContractError("build_sample_sets: class " + std::to_string(cls) + " out of range");
  }
  SampleSets s;
  s.cls = cls;
  for (std::size_t t = 0; t < y.frames(); ++t) {
    if (!y.at(t, cls)) s.negatives.push_back(t);
  }
  for (std::size_t i = 0; i < y.frames(); ++i) {
    if (!y.at(i, cls)) continue;
    s.anchors.push_back(i);
    std::vector<std::size_t> pos;
    for (std::size_t j = 0; j < y.frames(); ++j) {
      if (j != i && y.at(j, cls) && y.row_dot(i, j) == 1) pos.push_back(j);
    }
    s.positives.push_back(std::move(pos));
  }
  return s;
}

std::size_t active_class_count(const LabelGrid& y) {
  std::size_t n = 0;
  for (std::size_t c = 0; c < y.classes(); ++c) n += y.positives(c) > 0 ? 1 : 0;
  return n;
}

namespace {

Var zero_on(Tape& tape) { return tape.constant(DenseArray::scalar(0.0)); }

Var similarity(Var rows, const ContrastiveOptions& opts) {
  Var z = opts.normalize ? normalize_rows(rows) : rows;
  return scale(matmul(z, transpose(z)), 1.0 / opts.tau);
}

void check_tau(double tau) {
  if (!(tau > 0.0)) throw ContractError("temperature must be positive");
}

}  // namespace

Var pair_loss(Var anchor, Var positive, std::span<const Var> negatives,
              const ContrastiveOptions& opts) {
  check_tau(opts.tau);
  if (negatives.empty()) throw ContractError("pair_loss: empty negative set");
  std::vector<Var> rows{anchor, positive};
  rows.insert(rows.end(), negatives.begin(), negatives.end());
  Var stacked = concat_rows(rows);
  std::vector<std::size_t> neg(negatives.size());
  for (std::size_t k = 0; k < neg.size(); ++k) neg[k] = k + 2;
  const ContrastivePair pair{0, 1, 1.0};
  return contrastive_sum(similarity(stacked, opts), std::span(&pair, 1), neg,
                         opts.positive_in_denominator);
}

Var fc_loss(std::span<const Var> projections, const LabelGrid& y, const ContrastiveOptions& opts) {
  check_tau(opts.tau);
  if (projections.empty()) throw ContractError("fc_loss: no projections");
  if (projections.size() != y.classes()) {
    throw ContractError("fc_loss: " + std::to_string(projections.size()) +
                        " projections for " + std::to_string(y.classes()) + " label classes");
  }
  for (const Var& z : projections) {
    if (z.value().rank() != 2 || z.value().rows() != y.frames()) {
      throw ContractError("fc_loss: projection " + shape_string(z.shape()) + " does not match " +
                          std::to_string(y.frames()) + " label frames");
    }
  }
  Tape& tape = *projections[0].tape();
  const std::size_t present = active_class_count(y);
  if (present == 0) return zero_on(tape);

  std::vector<Var> class_terms;
  for (std::size_t c = 0; c < y.classes(); ++c) {
    const SampleSets s = build_sample_sets(y, c);
    if (s.anchors.size() <= 1 || s.negatives.empty()) continue;
    const double per_anchor = 1.0 / (static_cast<double>(s.anchors.size()) * present);
    std::vector<ContrastivePair> pairs;
    for (std::size_t k = 0; k < s.anchors.size(); ++k) {
      const auto& pos = s.positives[k];
      const double w = per_anchor / static_cast<double>(pos.size());
      for (std::size_t j : pos) pairs.push_back({s.anchors[k], j, w});
    }
    if (pairs.empty()) continue;
    class_terms.push_back(contrastive_sum(similarity(projections[c], opts), pairs, s.negatives,
                                          opts.positive_in_denominator));
  }
  if (class_terms.empty()) return zero_on(tape);
  Var total = class_terms[0];
  for (std::size_t k = 1; k < class_terms.size(); ++k) total = add(total, class_terms[k]);
  return total;
}

double fc_loss_oracle(std::span<const DenseArray> projections, const LabelGrid& y,
                      const ContrastiveOptions& opts) {
  check_tau(opts.tau);
  if (projections.size() != y.classes()) throw ContractError("fc_loss_oracle: class count mismatch");
  const std::size_t T = y.frames();
  const std::size_t C = y.classes();

  auto feature = [&](std::size_t c, std::size_t t) {
    const DenseArray& z = projections[c];
    std::vector<double> v(z.cols());
    double norm = 0.0;
    for (std::size_t d = 0; d < v.size(); ++d) {
      v[d] = z(t, d);
      norm += v[d] * v[d];
    }
    if (opts.normalize) {
      norm = std::sqrt(norm) + 1e-12;
      for (double& e : v) e /= norm;
    }
    return v;
  };
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) s += a[d] * b[d];
    return s;
  };

  std::size_t c_plus = 0;
  for (std::size_t c = 0; c < C; ++c) {
    bool any = false;
    for (std::size_t t = 0; t < T; ++t) any = any || y.at(t, c) == 1;
    if (any) ++c_plus;
  }
  if (c_plus == 0) return 0.0;

  double sum_over_classes = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::size_t> negatives;
    for (std::size_t t = 0; t < T; ++t) {
      if (y.at(t, c) == 0) negatives.push_back(t);
    }
    double class_sum = 0.0;
    std::size_t anchors = 0;
    for (std::size_t i = 0; i < T; ++i) {
      if (y.at(i, c) == 0) continue;
      ++anchors;
      std::vector<std::size_t> positives;
      for (std::size_t j = 0; j < T; ++j) {
        std::size_t p = 0;
        for (std::size_t k = 0; k < C; ++k) p += y.at(i, k) * y.at(j, k);
        if (j != i && p == 1 && y.at(j, c) == 1) positives.push_back(j);
      }
      if (positives.empty() || negatives.empty()) continue;
      const auto zi = feature(c, i);
      double anchor_sum = 0.0;
      for (std::size_t j : positives) {
        const double numerator = std::exp(dot(zi, feature(c, j)) / opts.tau);
        double denominator = opts.positive_in_denominator ? numerator : 0.0;
        for (std::size_t k : negatives) denominator += std::exp(dot(zi, feature(c, k)) / opts.tau);
        anchor_sum += -std::log(numerator / denominator);
      }
      class_sum += anchor_sum / static_cast<double>(positives.size());
    }
    if (anchors > 1 && !negatives.empty()) sum_over_classes += class_sum / static_cast<double>(anchors);
  }
  return sum_over_classes / static_cast<double>(c_plus);
}

void ScheduleConfig::validate() const {
  if (!(lambda1 > 0.0)) throw ValidationError("lambda1 must be > 0");
  if (!(tau > 0.0)) throw ValidationError("tau must be > 0");
  if (!(rampup_epochs >= 1.0)) throw ValidationError("rampup_epochs must be >= 1");
  if (!(pseudo_threshold > 0.0 && pseudo_threshold < 1.0)) {
    throw ValidationError("pseudo_threshold must lie in (0, 1)");
  }
}

double ramp_shape(double epoch, double rampup_epochs) {
  if (epoch < 0.0) throw ContractError("ramp: epoch must be >= 0");
  if (epoch >= rampup_epochs) return 1.0;
  const double r = 1.0 - epoch / rampup_epochs;
  return std::exp(-5.0 * r * r);
}

double lambda2(double epoch, const ScheduleConfig& cfg) {
  return cfg.lambda1 * ramp_shape(epoch, cfg.rampup_epochs);
}

LabelGrid pseudo_labels(const DenseArray& probs, double threshold) {
  if (probs.rank() != 2) throw DimensionError("pseudo_labels: expected [T x C] probabilities");
  LabelGrid g(probs.rows(), probs.cols());
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    for (std::size_t c = 0; c < probs.cols(); ++c) g.set(t, c, probs(t, c) > threshold);
  }
  return g;
}

Var sed_loss(Var probs, Var pooled, const ClipTarget& target, const SedTerms& terms) {
  switch (target.mode) {
    case LabelMode::kStrong:
      if (!target.strong || target.weak) {
        throw ContractError("sed_loss: strong clip needs strong labels and no weak labels");
      }
      break;
    case LabelMode::kWeak:
      if (!target.weak || target.strong) {
        throw ContractError("sed_loss: weak clip needs weak labels and no strong labels");
      }
      break;
    case LabelMode::kUnlabeled:
      if (target.weak || target.strong) throw ContractError("sed_loss: unlabeled clip carries labels");
      break;
  }
  Tape& tape = *probs.tape();
  std::vector<Var> parts;
  if (terms.strong_bce && target.mode == LabelMode::kStrong) {
    parts.push_back(binary_cross_entropy(probs, target.strong->as_array()));
  }
  if (terms.weak_bce && target.mode == LabelMode::kWeak) {
    DenseArray w(pooled.shape());
    if (w.size() != target.weak->size()) throw DimensionError("sed_loss: weak label size mismatch");
    for (std::size_t c = 0; c < w.size(); ++c) w[c] = (*target.weak)[c];
    parts.push_back(binary_cross_entropy(pooled, w));
  }
  if (terms.consistency && terms.consistency_weight != 0.0) {
    if (!target.teacher_probs) throw ContractError("sed_loss: consistency needs teacher probabilities");
    Var diff = sub(probs, tape.constant(*target.teacher_probs));
    parts.push_back(scale(mean(mul(diff, diff)), terms.consistency_weight));
  }
  if (parts.empty()) return tape.constant(DenseArray::scalar(0.0));
  Var total = parts[0];
  for (std::size_t k = 1; k < parts.size(); ++k) total = add(total, parts[k]);
  return total;
}

LossReport total_loss(double l_sed, double l_fc, double l_sc, double epoch,
                      const ScheduleConfig& cfg, bool sc_enabled) {
  LossReport r;
  r.l_sed = l_sed;
  r.l_fc = l_fc;
  r.l_sc = sc_enabled ? l_sc : 0.0;
  r.lambda1 = cfg.lambda1;
  r.lambda2 = lambda2(epoch, cfg);
  r.total = l_sed + cfg.lambda1 * l_fc + (sc_enabled ? r.lambda2 * l_sc : 0.0);
  return r;
}

}  // namespace sedx
