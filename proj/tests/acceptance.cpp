// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any of them fails.
//
//   acceptance [--only 1,4,8] [--eval-suite path/to/test_eval]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "sedx/binio.hpp"
#include "sedx/random.hpp"
#include "sedx/trainer.hpp"

using namespace sedx;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

LabelGrid random_grid(std::size_t T, std::size_t C, Rng& rng, double p) {
  LabelGrid y(T, C);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) y.set(t, c, rng.bernoulli(p));
  }
  return y;
}

DenseArray random_array(const Shape& shape, Rng& rng, double lo, double hi) {
  DenseArray a(shape);
  for (double& v : a.data()) v = rng.uniform(lo, hi);
  return a;
}

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t T = 1 + rng.index(12), C = 1 + rng.index(4), D = 1 + rng.index(8);
    const LabelGrid y = random_grid(T, C, rng, rng.uniform(0.2, 0.7));
    std::vector<DenseArray> z;
    for (std::size_t c = 0; c < C; ++c) z.push_back(random_array({T, D}, rng, -1.0, 1.0));
    ContrastiveOptions opts;
    opts.tau = rng.uniform(0.05, 1.0);
    Tape tape;
    std::vector<Var> vars;
    for (const auto& a : z) vars.push_back(tape.constant(a));
    const double fast = fc_loss(vars, y, opts).value().item();
    worst = std::max(worst, std::abs(fast - fc_loss_oracle(z, y, opts)));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 10.0,
          "max |fc_loss - oracle| " + fmt("%.3g", worst) + " over 1000 instances in " + fmt("%.2f s", secs)};
}

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kConv:
      return "conv";
    case ParamGroup::kRecurrent:
      return "recurrent";
    case ParamGroup::kProjector:
      return "projector";
    case ParamGroup::kClassifier:
      return "classifier";
  }
  return "?";
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  DatasetSpec spec;
  spec.strong = 1;
  spec.unlabeled = 1;
  spec.seed = 77;
  Dataset data;
  data.root = "micro-batch";
  for (const GeneratedClip& g : generate_clips(spec, false)) data.clips.push_back(g.record);

  // Every term is live: frame BCE, consistency, L_FC on the strong clip and
  // L_SC on the pseudo-labelled one.
  RunConfig cfg;
  cfg.mode = TrainMode::kProjectorFcSc;
  const ModelConfig mc = model_config_for(cfg, data);
  const ModelParams teacher = ModelParams::initialize(mc, 5);
  ModelParams student = ModelParams::initialize(mc, 6);
  std::vector<const ClipRecord*> clips = {&data.clips[0], &data.clips[1]};
  const double epoch = 30.0;

  const BatchResult analytic = batch_gradient(student, teacher, clips, cfg, epoch, true, true);
  if (analytic.fc_clips != 1 || analytic.sc_clips != 1) {
    return {false, "micro-batch does not exercise both contrastive terms"};
  }
  auto loss = [&] { return batch_gradient(student, teacher, clips, cfg, epoch, false, true).report.total; };

  constexpr double kStep = 1e-5, kFloor = 1e-4;
  constexpr std::size_t kProbesPerArray = 12;
  Rng rng(99);
  double worst = 0.0;
  std::size_t probes = 0;
  std::set<ParamGroup> groups;
  std::string worst_at;
  for (std::size_t a = 0; a < student.size(); ++a) {
    auto w = student[a].data();
    std::vector<std::size_t> coords(w.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(std::min(coords.size(), kProbesPerArray));
    for (std::size_t i : coords) {
      const double orig = w[i];
      w[i] = orig + kStep;
      const double up = loss();
      w[i] = orig - kStep;
      const double down = loss();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * kStep);
      const double g = analytic.grads[a][i];
      const double rel = std::abs(g - numeric) / std::max({std::abs(g), std::abs(numeric), kFloor});
      if (rel > worst) {
        worst = rel;
        worst_at = student.arrays()[a].name;
      }
      ++probes;
    }
    groups.insert(student.arrays()[a].group);
  }
  const double secs = seconds_since(t0);
  std::string covered;
  for (ParamGroup g : groups) covered += std::string(covered.empty() ? "" : ",") + group_name(g);
  return {worst < 1e-5 && groups.size() == 4 && secs < 60.0,
          "max relative error " + fmt("%.3g", worst) + " (" + worst_at + ") over " +
              std::to_string(probes) + " probes, groups " + covered + ", " + fmt("%.1f s", secs)};
}

Outcome set_construction() {
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const char* what) {
    if (!ok) failed.push_back(what);
  };
  using Idx = std::vector<std::size_t>;
  const LabelGrid y = LabelGrid::from_rows({{1, 0}, {1, 1}, {0, 1}});
  const SampleSets s0 = build_sample_sets(y, 0);
  expect(s0.anchors == Idx{0, 1}, "class 0 anchors {0,1}");
  expect(s0.negatives == Idx{2}, "class 0 negatives {2}");
  expect(s0.positives.size() == 2 && s0.positives[0] == Idx{1}, "positives of anchor 0 are {1}");
  expect(s0.positives.size() == 2 && s0.positives[1] == Idx{0}, "positives of anchor 1 are {0}");
  const SampleSets s1 = build_sample_sets(y, 1);
  expect(s1.anchors == Idx{1, 2} && s1.negatives == Idx{0}, "class 1 anchors {1,2}, negatives {0}");
  for (const SampleSets* s : {&s0, &s1}) {
    for (std::size_t k = 0; k < s->anchors.size(); ++k) {
      const auto& pos = s->positives[k];
      expect(std::find(pos.begin(), pos.end(), s->anchors[k]) == pos.end(), "no anchor is its own positive");
    }
  }
  const LabelGrid zero(5, 2);
  for (std::size_t c = 0; c < 2; ++c) {
    const SampleSets s = build_sample_sets(zero, c);
    expect(s.anchors.empty() && s.negatives == Idx{0, 1, 2, 3, 4}, "all-zero grid: no anchors, all negatives");
  }

  Rng rng(3);
  std::vector<DenseArray> z;
  for (int c = 0; c < 2; ++c) z.push_back(random_array({4, 3}, rng, -1.0, 1.0));
  auto value = [&](const LabelGrid& g) {
    Tape tape;
    std::vector<Var> v;
    for (const auto& a : z) v.push_back(tape.constant(a));
    return fc_loss(v, g, {}).value().item();
  };
  expect(value(LabelGrid::from_rows({{1, 0}, {1, 0}, {1, 0}, {1, 0}})) == 0.0, "empty negative set gives 0");
  expect(value(LabelGrid::from_rows({{1, 1}, {1, 1}, {0, 0}, {0, 0}})) == 0.0, "empty positive sets give 0");
  expect(value(LabelGrid(4, 2)) == 0.0, "C+ = 0 gives 0");
  expect(active_class_count(LabelGrid(4, 2)) == 0, "C+ of an all-zero grid is 0");

  // Same grid, tau = 1, one negative per class so each pair loss is
  // z_i.z_k - z_i.z_j. Class 0: ((0 - 0.5) + (0.5 - 0.5)) / 2 = -0.25.
  // Class 1: ((0.02 + 0.1) + (0.3 + 0.1)) / 2 = 0.26. Mean over C+ = 2.
  const std::vector<DenseArray> hz = {DenseArray::matrix({{1, 0}, {0.5, 0.5}, {0, 1}}),
                                      DenseArray::matrix({{0.2, 0.1}, {0.3, -0.4}, {1, 1}})};
  ContrastiveOptions unit;
  unit.tau = 1.0;
  const double expected = 0.005;
  expect(std::abs(fc_loss_oracle(hz, y, unit) - expected) < 1e-14, "hand-traced L_FC value");

  std::string detail = "hand traces, self-pair exclusion and the three empty-set gates";
  if (!failed.empty()) {
    detail = "failed:";
    for (const auto& f : failed) detail += " [" + f + "]";
  }
  return {failed.empty(), detail};
}

Outcome schedule() {
  std::vector<std::string> failed;
  for (double E : {1.0, 20.0, 100.0}) {
    ScheduleConfig cfg;
    cfg.rampup_epochs = E;
    const std::string tag = "E=" + fmt("%.0f", E);
    if (std::abs(lambda2(0, cfg) - 0.05 * std::exp(-5.0)) > 1e-15) failed.push_back(tag + " start");
    if (lambda2(E, cfg) != 0.05) failed.push_back(tag + " end");
    if (std::abs(lambda2(E - 1e-9, cfg) - lambda2(E, cfg)) > 1e-9) failed.push_back(tag + " continuity");
    double prev = 0.0;
    for (int k = 0; k <= 400; ++k) {
      const double v = lambda2(E * k / 200.0, cfg);
      if (v < prev) {
        failed.push_back(tag + " monotone");
        break;
      }
      prev = v;
    }
  }
  std::string detail = "lambda2(0) = 0.05 e^-5, lambda2(E) = 0.05, monotone and continuous for E in {1, 20, 100}";
  if (!failed.empty()) {
    detail = "failed:";
    for (const auto& f : failed) detail += " " + f;
  }
  return {failed.empty(), detail};
}

// ---------------------------------------------------------------- ablation

struct ModeStats {
  std::vector<double> f1, overlap_f1, non_overlap_f1, cross_auc, self_min;
  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
  }
};

constexpr TrainMode kModes[] = {TrainMode::kBaseline, TrainMode::kProjector, TrainMode::kProjectorFc,
                                TrainMode::kProjectorFcSc};

struct Ablation {
  ModeStats stats[4];
  double cpu_seconds = 0.0;
  const ModeStats& of(TrainMode m) const { return stats[static_cast<int>(m)]; }
};

SynthConfig ablation_synth() {
  SynthConfig s;
  s.band_width = 0.6;
  s.min_amplitude = 0.05;
  s.max_amplitude = 5.0;
  s.jitter = 0.5;
  s.overlap = 0.3;
  return s;
}

RunConfig ablation_run(TrainMode mode, std::uint64_t seed) {
  RunConfig c;
  c.mode = mode;
  c.seed = seed;
  c.epochs = 8;
  c.step_size = 0.05;
  c.schedule.lambda1 = 0.01;
  c.schedule.rampup_epochs = 8;
  c.sed_terms.consistency = false;
  return c;
}

Dataset in_memory(const DatasetSpec& spec, const std::string& name) {
  Dataset d;
  d.root = name;
  for (const GeneratedClip& g : generate_clips(spec)) d.clips.push_back(g.record);
  return d;
}

Ablation run_ablation() {
  Ablation a;
  const std::clock_t c0 = std::clock();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    DatasetSpec train_spec;
    train_spec.strong = 400;
    train_spec.weak = 100;
    train_spec.unlabeled = 400;
    train_spec.seed = seed;
    train_spec.synth = ablation_synth();
    DatasetSpec test_spec;
    test_spec.strong = 200;
    test_spec.seed = 1000 + seed;
    test_spec.synth = ablation_synth();
    const Dataset train_set = in_memory(train_spec, "train");
    const Dataset test_set = in_memory(test_spec, "test");
    for (TrainMode mode : kModes) {
      const RunConfig cfg = ablation_run(mode, seed);
      const TrainResult r = train(cfg, train_set);
      const MetricsReport m = evaluate(r.checkpoint, test_set, cfg.inference);
      const ProbeReport p = probe(r.checkpoint, test_set, cfg.inference);
      ModeStats& s = a.stats[static_cast<int>(mode)];
      s.f1.push_back(m.frame.all.macro_f1());
      s.overlap_f1.push_back(m.frame.overlapping.macro_f1());
      s.non_overlap_f1.push_back(m.frame.non_overlapping.macro_f1());
      s.cross_auc.push_back(p.off_diagonal_mean());
      s.self_min.push_back(p.diagonal_min());
      std::printf("  seed %llu %-16s F1 %.4f  overlap %.4f  non-overlap %.4f  self-min %.3f  cross %.3f\n",
                  static_cast<unsigned long long>(seed), to_string(mode).c_str(), s.f1.back(),
                  s.overlap_f1.back(), s.non_overlap_f1.back(), s.self_min.back(), s.cross_auc.back());
      std::fflush(stdout);
    }
  }
  a.cpu_seconds = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
  std::printf("  ablation CPU time %.1f s\n", a.cpu_seconds);
  return a;
}

Outcome ablation_story(const Ablation& a) {
  const double proj = ModeStats::mean(a.of(TrainMode::kProjector).f1);
  const double fc = ModeStats::mean(a.of(TrainMode::kProjectorFc).f1);
  const double sc = ModeStats::mean(a.of(TrainMode::kProjectorFcSc).f1);
  const bool ok = fc >= proj && sc >= fc - 0.01 && a.cpu_seconds <= 600.0;
  return {ok, "mean frame F1 projector " + fmt("%.4f", proj) + ", +fc " + fmt("%.4f", fc) + ", +fc+sc " +
                  fmt("%.4f", sc) + "; CPU " + fmt("%.0f s", a.cpu_seconds) + " of 600"};
}

Outcome overlap_claim(const Ablation& a) {
  const double proj = ModeStats::mean(a.of(TrainMode::kProjector).overlap_f1);
  const double fc = ModeStats::mean(a.of(TrainMode::kProjectorFc).overlap_f1);
  bool harder = true;
  std::string split;
  for (TrainMode m : kModes) {
    const double ov = ModeStats::mean(a.of(m).overlap_f1);
    const double non = ModeStats::mean(a.of(m).non_overlap_f1);
    harder = harder && ov < non;
    split += " " + to_string(m) + " " + fmt("%.4f", ov) + "/" + fmt("%.4f", non) + ";";
  }
  return {fc - proj >= 0.02 && harder,
          "overlap F1 gain of +fc over projector " + fmt("%+.4f", fc - proj) + " (need +0.02); overlap/non-overlap:" +
              split};
}

Outcome disentanglement(const Ablation& a) {
  const double proj = ModeStats::mean(a.of(TrainMode::kProjector).cross_auc);
  const double fc = ModeStats::mean(a.of(TrainMode::kProjectorFc).cross_auc);
  const auto& self = a.of(TrainMode::kProjectorFc).self_min;
  const double self_min = *std::min_element(self.begin(), self.end());
  return {fc <= proj - 0.03 && self_min > 0.9,
          "mean cross AUC projector " + fmt("%.4f", proj) + ", +fc " + fmt("%.4f", fc) +
              "; lowest +fc self AUC " + fmt("%.4f", self_min)};
}

// ------------------------------------------------------------- determinism

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "sedx_acceptance_determinism";
  fs::remove_all(root);
  DatasetSpec spec;
  spec.strong = 6;
  spec.weak = 2;
  spec.unlabeled = 6;
  spec.seed = 8;
  generate_dataset(spec, root / "data");
  std::vector<std::string> failed;

  auto run = [&](const std::string& name) {
    RunConfig cfg;
    cfg.mode = TrainMode::kProjectorFcSc;
    cfg.dataset = root / "data";
    cfg.output_dir = root / name;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.schedule.rampup_epochs = 2;
    train(cfg);
    return std::make_pair(binio::read_file(cfg.output_dir / "checkpoint.sedm"),
                          binio::read_file(cfg.output_dir / "run_log.csv"));
  };
  const auto a = run("run_a");
  const auto b = run("run_b");
  if (a.first != b.first) failed.push_back("checkpoints differ");
  if (a.second != b.second) failed.push_back("run logs differ");

  const fs::path ck = root / "run_a" / "checkpoint.sedm";
  save_checkpoint(root / "again.sedm", load_checkpoint(ck));
  if (binio::read_file(root / "again.sedm") != binio::read_file(ck)) failed.push_back("checkpoint round-trip");

  for (const ManifestEntry& e : read_manifest(root / "data")) {
    const std::string bytes = binio::read_file(root / "data" / e.path);
    if (serialize_clip(parse_clip(bytes, e.id)) != bytes) {
      failed.push_back("clip round-trip " + e.id);
      break;
    }
  }
  std::string detail = "two seeded runs byte-identical (" + std::to_string(a.first.size()) +
                       "-byte checkpoint); clip and checkpoint round-trips exact";
  if (!failed.empty()) {
    detail = "failed:";
    for (const auto& f : failed) detail += " [" + f + "]";
  }
  fs::remove_all(root);
  return {failed.empty(), detail};
}

Outcome eval_suites(const std::string& binary) {
  if (binary.empty() || !fs::exists(binary)) return {false, "eval unit suite binary not found: '" + binary + "'"};
  const auto t0 = std::chrono::steady_clock::now();
  const std::string cmd = "\"" + binary + "\" --gtest_brief=1 > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  const double secs = seconds_since(t0);
  return {status == 0 && secs < 10.0,
          std::string(status == 0 ? "all eval suites pass" : "eval suites FAILED") + " in " + fmt("%.2f s", secs)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-9"};
  std::vector<int> only;
  std::string eval_binary;
  app.add_option("--only", only, "Criteria to run")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--eval-suite", eval_binary, "Path of the eval unit-test binary");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  int failures = 0;
  auto report = [&](int n, const Outcome& o) {
    std::printf("criterion %d %s: %s\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };
  auto guarded = [&](int n, const std::function<Outcome()>& fn) {
    if (!wanted(n)) return;
    try {
      report(n, fn());
    } catch (const std::exception& e) {
      report(n, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded(1, oracle_equivalence);
  guarded(2, gradient_suite);
  guarded(3, set_construction);
  guarded(4, schedule);
  if (wanted(5) || wanted(6) || wanted(7)) {
    try {
      const Ablation a = run_ablation();
      if (wanted(5)) report(5, ablation_story(a));
      if (wanted(6)) report(6, overlap_claim(a));
      if (wanted(7)) report(7, disentanglement(a));
    } catch (const std::exception& e) {
      for (int n : {5, 6, 7}) {
        if (wanted(n)) report(n, {false, std::string("exception: ") + e.what()});
      }
    }
  }
  guarded(8, determinism);
  guarded(9, [&] { return eval_suites(eval_binary); });
  return failures == 0 ? 0 : 1;
}
