#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "sedx/errors.hpp"
#include "sedx/eval.hpp"
#include "sedx/random.hpp"

using namespace sedx;

namespace {

std::vector<std::uint8_t> bits(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

LabelGrid random_grid(Rng& rng, std::size_t T, std::size_t C, double p = 0.4) {
  LabelGrid g(T, C);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) g.set(t, c, rng.bernoulli(p));
  }
  return g;
}

// Maximum matching by trying every assignment.
std::size_t exhaustive_matches(const std::vector<Interval>& pred, const std::vector<Interval>& truth,
                               std::uint32_t collar) {
  auto ok = [&](const Interval& a, const Interval& b) {
    auto d = [](std::uint32_t x, std::uint32_t y) { return x > y ? x - y : y - x; };
    return d(a.onset, b.onset) <= collar && d(a.offset, b.offset) <= collar;
  };
  std::vector<bool> used(truth.size(), false);
  std::function<std::size_t(std::size_t)> go = [&](std::size_t i) -> std::size_t {
    if (i == pred.size()) return 0;
    std::size_t best = go(i + 1);
    for (std::size_t j = 0; j < truth.size(); ++j) {
      if (used[j] || !ok(pred[i], truth[j])) continue;
      used[j] = true;
      best = std::max(best, 1 + go(i + 1));
      used[j] = false;
    }
    return best;
  };
  return go(0);
}

std::vector<Interval> random_runs(Rng& rng, std::size_t T, std::size_t max_events) {
  std::vector<std::uint8_t> col(T, 0);
  for (std::size_t k = 0; k < max_events; ++k) {
    const auto on = rng.index(T - 1);
    const auto len = 1 + rng.index(4);
    for (std::size_t t = on; t < std::min(T, on + len); ++t) col[t] = 1;
  }
  LabelGrid g(T, 1);
  for (std::size_t t = 0; t < T; ++t) g.set(t, 0, col[t]);
  return extract_events(g).per_class[0];
}

}  // namespace

TEST(MedianFilter, HandCases) {
  EXPECT_EQ(median_filter(bits({0, 1, 0, 1, 1}), 3), bits({0, 0, 1, 1, 1}));
  EXPECT_EQ(median_filter(bits({0, 1, 0, 1, 1}), 1), bits({0, 1, 0, 1, 1}));
  EXPECT_EQ(median_filter(bits({1, 1, 1, 1}), 5), bits({1, 1, 1, 1}));
  EXPECT_EQ(median_filter(bits({1, 0, 0, 0, 0}), 3), bits({1, 0, 0, 0, 0}));
  EXPECT_EQ(median_filter(bits({}), 3), bits({}));
}

TEST(MedianFilter, EvenOrZeroWindowIsContractError) {
  EXPECT_THROW(median_filter(bits({0, 1}), 2), ContractError);
  EXPECT_THROW(median_filter(bits({0, 1}), 0), ContractError);
}

// One pass is not always a fixed point: alternating runs shift inward.
TEST(MedianFilter, SecondPassCanStillChangeAlternatingInput) {
  const auto once = median_filter(bits({0, 1, 0, 1, 0, 1}), 3);
  EXPECT_EQ(once, bits({0, 0, 1, 0, 1, 1}));
  EXPECT_EQ(median_filter(once, 3), bits({0, 0, 0, 1, 1, 1}));
}

TEST(MedianFilter, IdempotentOnSignalsWithoutIsolatedRuns) {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::uint8_t> x;
    const std::size_t target = 3 + rng.index(20);
    std::uint8_t v = rng.bernoulli(0.5);
    while (x.size() < target) {
      x.insert(x.end(), 2 + rng.index(4), v);
      v = !v;
    }
    const auto once = median_filter(x, 3);
    EXPECT_EQ(once, x);
    EXPECT_EQ(median_filter(once, 3), once);
  }
}

TEST(MedianFilter, RepeatedPassesReachAFixedPoint) {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::uint8_t> x(3 + rng.index(20));
    for (auto& b : x) b = rng.bernoulli(0.5);
    for (std::size_t pass = 0; pass < x.size(); ++pass) x = median_filter(x, 3);
    EXPECT_EQ(median_filter(x, 3), x);
  }
}

TEST(Decode, AllBelowThresholdIsEmpty) {
  DenseArray p(Shape{6, 2}, 0.3);
  const auto ev = decode(p, 0.5, 3);
  EXPECT_EQ(ev.frames, 6u);
  for (const auto& c : ev.per_class) EXPECT_TRUE(c.empty());
}

TEST(Decode, RunExtraction) {
  const DenseArray p = DenseArray::matrix({{0.1}, {0.9}, {0.8}, {0.7}, {0.2}});
  const auto ev = decode(p, 0.5, 1);
  ASSERT_EQ(ev.per_class[0].size(), 1u);
  EXPECT_EQ(ev.per_class[0][0], (Interval{1, 4}));
}

TEST(Decode, IsolatedSpikeRemoved) {
  const DenseArray p = DenseArray::matrix({{0.1}, {0.1}, {0.9}, {0.1}, {0.1}});
  EXPECT_TRUE(decode(p, 0.5, 3).per_class[0].empty());
  EXPECT_EQ(decode(p, 0.5, 1).per_class[0].size(), 1u);
}

TEST(Decode, ThresholdIsStrictAndBounded) {
  const DenseArray p = DenseArray::matrix({{0.5}, {0.5}});
  EXPECT_TRUE(decode(p, 0.5, 1).per_class[0].empty());
  EXPECT_THROW(decode(p, 0.0, 1), ContractError);
  EXPECT_THROW(decode(p, 1.0, 1), ContractError);
}

TEST(Decode, RasterizeReproducesFilteredGrid) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 3 + rng.index(30), C = 1 + rng.index(4);
    DenseArray p(Shape{T, C});
    for (double& v : p.data()) v = rng.uniform();
    const LabelGrid filtered = median_filter(binarize(p, 0.5), 3);
    const DecodedEvents ev = decode(p, 0.5, 3);
    EXPECT_EQ(rasterize(ev), filtered);
    for (const auto& runs : ev.per_class) {
      for (std::size_t k = 0; k < runs.size(); ++k) {
        EXPECT_LT(runs[k].onset, runs[k].offset);
        if (k) {
          EXPECT_LT(runs[k - 1].offset, runs[k].onset);
        }
      }
    }
  }
}

TEST(FrameMetrics, PerfectAndInverted) {
  const LabelGrid y = LabelGrid::from_rows({{1, 0}, {0, 1}, {1, 1}, {0, 0}});
  FrameTally same(2);
  same.add(y, y);
  EXPECT_DOUBLE_EQ(same.all.macro_f1(), 1.0);
  LabelGrid inv(4, 2);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 2; ++c) inv.set(t, c, !y.at(t, c));
  }
  FrameTally flipped(2);
  flipped.add(inv, y);
  EXPECT_DOUBLE_EQ(flipped.all.f1(0), 0.0);
  EXPECT_DOUBLE_EQ(flipped.all.f1(1), 0.0);
}

TEST(FrameMetrics, CountingOracleSixByTwo) {
  // truth and prediction, hand counted:
  //   class 0: tp at t=0,3; fp at t=1; fn at t=4 -> P 2/3, R 2/3, F1 2/3
  //   class 1: tp at t=2;   fp at t=5; fn at t=1,3 -> P 1/2, R 1/3, F1 2/5
  const LabelGrid truth = LabelGrid::from_rows({{1, 0}, {0, 1}, {0, 1}, {1, 1}, {1, 0}, {0, 0}});
  const LabelGrid pred = LabelGrid::from_rows({{1, 0}, {1, 0}, {0, 1}, {1, 0}, {0, 0}, {0, 1}});
  FrameTally t(2);
  t.add(pred, truth);
  const Confusion& a = t.all.per_class[0];
  const Confusion& b = t.all.per_class[1];
  EXPECT_EQ(a.tp, 2u);
  EXPECT_EQ(a.fp, 1u);
  EXPECT_EQ(a.fn, 1u);
  EXPECT_EQ(b.tp, 1u);
  EXPECT_EQ(b.fp, 1u);
  EXPECT_EQ(b.fn, 2u);
  EXPECT_NEAR(t.all.precision(0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(t.all.recall(1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(t.all.f1(1), 0.4, 1e-15);
  EXPECT_NEAR(t.all.macro_f1(), (2.0 / 3.0 + 0.4) / 2.0, 1e-15);
  // Only t=3 has two active truth classes.
  EXPECT_EQ(t.overlapping.per_class[0].tp, 1u);
  EXPECT_EQ(t.overlapping.per_class[1].fn, 1u);
  EXPECT_EQ(t.overlapping.per_class[1].tp, 0u);
}

TEST(FrameMetrics, RandomAgainstBruteForce) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const LabelGrid truth = random_grid(rng, 6, 2), pred = random_grid(rng, 6, 2);
    FrameTally t(2);
    t.add(pred, truth);
    for (std::size_t c = 0; c < 2; ++c) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t f = 0; f < 6; ++f) {
        tp += pred.at(f, c) == 1 && truth.at(f, c) == 1;
        fp += pred.at(f, c) == 1 && truth.at(f, c) == 0;
        fn += pred.at(f, c) == 0 && truth.at(f, c) == 1;
      }
      EXPECT_EQ(t.all.per_class[c].tp, tp);
      EXPECT_EQ(t.all.per_class[c].fp, fp);
      EXPECT_EQ(t.all.per_class[c].fn, fn);
      if (tp + fn == 0) {
        EXPECT_TRUE(std::isnan(t.all.f1(c)));
      } else {
        EXPECT_NEAR(t.all.f1(c), 2.0 * tp / (2.0 * tp + fp + fn), 1e-15);
      }
    }
  }
}

TEST(FrameMetrics, AbsentClassIsExcludedFromMacro) {
  const LabelGrid truth = LabelGrid::from_rows({{1, 0}, {1, 0}, {0, 0}});
  const LabelGrid pred = LabelGrid::from_rows({{1, 1}, {0, 0}, {0, 0}});
  FrameTally t(2);
  t.add(pred, truth);
  EXPECT_TRUE(std::isnan(t.all.f1(1)));
  EXPECT_NEAR(t.all.macro_f1(), 2.0 / 3.0, 1e-15);
  EXPECT_TRUE(std::isnan(t.overlapping.macro_f1()));
}

TEST(FrameMetrics, MacroInvariantUnderClassPermutation) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t C = 4;
    const LabelGrid truth = random_grid(rng, 10, C), pred = random_grid(rng, 10, C);
    std::vector<std::size_t> perm(C);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    LabelGrid pt(10, C), pp(10, C);
    for (std::size_t t = 0; t < 10; ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        pt.set(t, perm[c], truth.at(t, c));
        pp.set(t, perm[c], pred.at(t, c));
      }
    }
    FrameTally a(C), b(C);
    a.add(pred, truth);
    b.add(pp, pt);
    EXPECT_NEAR(a.all.macro_f1(), b.all.macro_f1(), 1e-12);
    EXPECT_NEAR(a.overlapping.macro_f1(), b.overlapping.macro_f1(), 1e-12);
  }
}

TEST(FrameMetrics, OverlapSplitPartitionsCounts) {
  Rng rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    const LabelGrid truth = random_grid(rng, 16, 3), pred = random_grid(rng, 16, 3);
    FrameTally t(3);
    t.add(pred, truth);
    for (std::size_t c = 0; c < 3; ++c) {
      const Confusion& a = t.all.per_class[c];
      const Confusion& o = t.overlapping.per_class[c];
      const Confusion& n = t.non_overlapping.per_class[c];
      EXPECT_EQ(a.tp, o.tp + n.tp);
      EXPECT_EQ(a.fp, o.fp + n.fp);
      EXPECT_EQ(a.fn, o.fn + n.fn);
    }
  }
}

TEST(FrameMetrics, ShapeMismatchThrows) {
  FrameTally t(2);
  EXPECT_THROW(t.add(LabelGrid(3, 2), LabelGrid(4, 2)), DimensionError);
}

TEST(EventMetrics, IdenticalListsScoreOne) {
  DecodedEvents e{20, {{{1, 5}, {8, 12}}, {{3, 9}}}};
  EventTally t(2, 2);
  t.add(e, e);
  EXPECT_DOUBLE_EQ(t.scores.macro_f1(), 1.0);
}

TEST(EventMetrics, CollarBoundary) {
  const std::vector<Interval> truth{{10, 20}};
  EXPECT_EQ(match_events({{12, 20}}, truth, 2), 1u);
  EXPECT_EQ(match_events({{13, 20}}, truth, 2), 0u);
  EXPECT_EQ(match_events({{10, 23}}, truth, 2), 0u);
  EXPECT_EQ(match_events({{8, 18}}, truth, 2), 1u);
}

TEST(EventMetrics, ThreeEventHandInstance) {
  // One boundary-exact match (|d| = collar), one clear match, one miss.
  const std::vector<Interval> truth{{0, 6}, {10, 16}, {20, 28}};
  const std::vector<Interval> pred{{2, 8}, {10, 15}, {24, 30}};
  EXPECT_EQ(match_events(pred, truth, 2), 2u);
  EXPECT_EQ(exhaustive_matches(pred, truth, 2), 2u);
}

TEST(EventMetrics, GreedyMatchesExhaustiveOnDecodedRuns) {
  Rng rng(77);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t T = 8 + rng.index(24);
    auto pred = random_runs(rng, T, 1 + rng.index(5));
    auto truth = random_runs(rng, T, 1 + rng.index(5));
    if (pred.size() > 5) pred.resize(5);
    if (truth.size() > 5) truth.resize(5);
    const auto collar = static_cast<std::uint32_t>(rng.index(4));
    EXPECT_EQ(match_events(pred, truth, collar), exhaustive_matches(pred, truth, collar));
  }
}

TEST(Reports, KeysCoverClassesSubsetsAndMacro) {
  MetricsReport r(3, 2);
  const LabelGrid y = LabelGrid::from_rows({{1, 1, 0}, {0, 1, 0}, {0, 0, 1}});
  r.frame.add(y, y);
  r.event.add(extract_events(y), extract_events(y));
  const std::string kv = to_key_value(r);
  for (const char* subset : {"frame.all", "frame.overlapping", "frame.non_overlapping", "event"}) {
    for (const char* m : {"precision", "recall", "f1"}) {
      EXPECT_NE(kv.find(std::string(subset) + ".macro." + m + " = "), std::string::npos) << subset;
      for (int c = 0; c < 3; ++c) {
        EXPECT_NE(kv.find(std::string(subset) + ".class" + std::to_string(c) + "." + m + " = "),
                  std::string::npos);
      }
    }
  }
  EXPECT_NE(kv.find("frame.overlapping.class2.f1 = na"), std::string::npos);
  const std::string csv = to_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "scope,subset,class,precision,recall,f1,tp,fp,fn");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4 * 4);
}

TEST(Pca, AxisAlignedData) {
  Rng rng(5);
  DenseArray x(Shape{400, 3});
  for (std::size_t i = 0; i < 400; ++i) {
    x(i, 0) = rng.uniform(-1, 1) * 1.0;
    x(i, 1) = rng.uniform(-1, 1) * 3.0;
    x(i, 2) = 0.0;
  }
  // Exact diagonal covariance is not guaranteed by sampling; decorrelate.
  for (std::size_t i = 0; i < 400; i += 2) {
    x(i + 1, 0) = -x(i, 0);
    x(i + 1, 1) = x(i, 1);
  }
  const Pca2 p = pca_top2(x, 3);
  EXPECT_NEAR(std::abs(p.q1[1]), 1.0, 1e-6);
  EXPECT_NEAR(std::abs(p.q2[0]), 1.0, 1e-6);
  EXPECT_GT(p.var1, p.var2);
  EXPECT_FALSE(p.rank_deficient);
}

TEST(Pca, MeanProjectsToOrigin) {
  Rng rng(6);
  DenseArray x(Shape{50, 5});
  for (double& v : x.data()) v = rng.uniform(-2, 2);
  const Pca2 p = pca_top2(x);
  const auto [a, b] = p.project(p.mean);
  EXPECT_NEAR(a, 0.0, 1e-12);
  EXPECT_NEAR(b, 0.0, 1e-12);
}

TEST(Pca, RankTwoDataIsFullyExplained) {
  Rng rng(7);
  const std::size_t D = 8;
  std::vector<double> u(D), v(D);
  for (auto& e : u) e = rng.uniform(-1, 1);
  for (auto& e : v) e = rng.uniform(-1, 1);
  DenseArray x(Shape{200, D});
  for (std::size_t i = 0; i < 200; ++i) {
    const double a = rng.uniform(-3, 3), b = rng.uniform(-1, 1);
    for (std::size_t d = 0; d < D; ++d) x(i, d) = 0.5 + a * u[d] + b * v[d];
  }
  const Pca2 p = pca_top2(x);
  EXPECT_GT((p.var1 + p.var2) / p.total_var, 0.999);
}

TEST(Pca, DirectionsAreOrthonormal) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t D = 2 + rng.index(8);
    DenseArray x(Shape{30, D});
    for (double& e : x.data()) e = rng.uniform(-1, 1);
    const Pca2 p = pca_top2(x, trial);
    double n1 = 0, n2 = 0, d = 0;
    for (std::size_t k = 0; k < D; ++k) {
      n1 += p.q1[k] * p.q1[k];
      n2 += p.q2[k] * p.q2[k];
      d += p.q1[k] * p.q2[k];
    }
    EXPECT_NEAR(std::sqrt(n1), 1.0, 1e-6);
    EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-6);
    EXPECT_LT(std::abs(d), 1e-6);
  }
}

TEST(Pca, RankDeficientSetsFlagAndZeroSecondComponent) {
  DenseArray x(Shape{10, 3});
  for (std::size_t i = 0; i < 10; ++i) {
    x(i, 0) = i;
    x(i, 1) = 2.0 * i;
    x(i, 2) = -1.0 * i;
  }
  const Pca2 p = pca_top2(x);
  EXPECT_TRUE(p.rank_deficient);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_NEAR(p.project(x.data().subspan(i * 3, 3)).second, 0.0, 1e-12);
  }
  const std::string csv = pca_csv({{"c", 0, 1.0, 0.0, 1}}, true);
  EXPECT_EQ(csv, "clip_id,frame,pc1,pc2,truth,rank_deficient\nc,0,1,0,1,1\n");
}

TEST(Pca, TooFewRowsIsContractError) {
  EXPECT_THROW(pca_top2(DenseArray(Shape{2, 3})), ContractError);
}

TEST(Auc, TiesAndPerfectOrdering) {
  const std::vector<double> s{0.1, 0.2, 0.3, 0.4};
  EXPECT_DOUBLE_EQ(ranking_auc(s, bits({0, 0, 1, 1})), 1.0);
  EXPECT_DOUBLE_EQ(ranking_auc(s, bits({1, 1, 0, 0})), 0.0);
  const std::vector<double> flat(4, 1.0);
  EXPECT_DOUBLE_EQ(ranking_auc(flat, bits({0, 1, 0, 1})), 0.5);
  EXPECT_TRUE(std::isnan(ranking_auc(s, bits({1, 1, 1, 1}))));
}

TEST(Auc, MatchesPairCounting) {
  Rng rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.index(30);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.index(5));
      y[i] = rng.bernoulli(0.5);
    }
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (!y[i] || y[j]) continue;
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
    }
    const double auc = ranking_auc(s, y);
    if (pairs == 0) {
      EXPECT_TRUE(std::isnan(auc));
    } else {
      EXPECT_NEAR(auc, wins / pairs, 1e-12);
    }
  }
}

TEST(Probe, ShuffledLabelsGiveChance) {
  Rng rng(10);
  DenseArray x(Shape{2000, 6});
  for (double& v : x.data()) v = rng.uniform(-1, 1);
  std::vector<std::uint8_t> y(2000);
  for (auto& b : y) b = rng.bernoulli(0.3);
  const auto auc = leakage_auc(x, y, 1000, ProbeOptions{});
  ASSERT_TRUE(auc.has_value());
  EXPECT_NEAR(*auc, 0.5, 0.1);
}

TEST(Probe, ConstantFeaturesGiveExactlyHalf) {
  DenseArray x(Shape{40, 3}, 0.7);
  std::vector<std::uint8_t> y(40);
  for (std::size_t i = 0; i < 40; ++i) y[i] = i % 3 == 0;
  const auto auc = leakage_auc(x, y, 20, ProbeOptions{});
  ASSERT_TRUE(auc.has_value());
  EXPECT_EQ(*auc, 0.5);
}

TEST(Probe, InformativeFeatureIsRecovered) {
  Rng rng(11);
  DenseArray x(Shape{400, 4});
  std::vector<std::uint8_t> y(400);
  for (std::size_t i = 0; i < 400; ++i) {
    y[i] = rng.bernoulli(0.5);
    for (std::size_t d = 0; d < 4; ++d) x(i, d) = rng.uniform(-1, 1);
    x(i, 2) += y[i] ? 1.5 : -1.5;
  }
  const auto auc = leakage_auc(x, y, 200, ProbeOptions{});
  ASSERT_TRUE(auc.has_value());
  EXPECT_GT(*auc, 0.95);
}

TEST(Probe, SingleClassHalfIsNotApplicable) {
  DenseArray x(Shape{10, 2}, 1.0);
  const auto y = bits({0, 0, 0, 0, 0, 1, 0, 1, 0, 1});
  EXPECT_FALSE(leakage_auc(x, y, 5, ProbeOptions{}).has_value());
  EXPECT_FALSE(leakage_auc(x, std::vector<std::uint8_t>(10, 1), 5, ProbeOptions{}).has_value());
}

TEST(Probe, SeededFitIsDeterministic) {
  Rng rng(1);
  DenseArray x(Shape{60, 3});
  for (double& v : x.data()) v = rng.uniform(-1, 1);
  std::vector<std::uint8_t> y(60);
  for (auto& b : y) b = rng.bernoulli(0.5);
  const auto a = fit_logistic(x, y, ProbeOptions{});
  const auto b = fit_logistic(x, y, ProbeOptions{});
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.bias, b.bias);
}
