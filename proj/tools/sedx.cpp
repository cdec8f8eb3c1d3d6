// sedx: generate synthetic data, train, evaluate and probe.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
// numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>

#include "sedx/errors.hpp"
#include "sedx/synthgen.hpp"
#include "sedx/trainer.hpp"

namespace fs = std::filesystem;
using namespace sedx;

namespace {

int run_generate(const fs::path& spec_path, const fs::path& out, bool serial) {
  const DatasetSpec spec = DatasetSpec::load(spec_path);
  const DatasetSummary s = generate_dataset(spec, out, !serial);
  std::printf("wrote %zu clips to %s (strong %u, weak %u, unlabeled %u)\n", s.clips, out.c_str(),
              spec.strong, spec.weak, spec.unlabeled);
  std::printf("realized overlapping-frame fraction: %.4f (%zu of %zu active frames)\n",
              s.overlap.fraction(), s.overlap.overlapping_frames, s.overlap.active_frames);
  return 0;
}

void print_scores(const char* label, const ScoreSet& s) {
  std::printf("  %-16s P %.4f  R %.4f  F1 %.4f\n", label, s.macro_precision(), s.macro_recall(),
              s.macro_f1());
}

void print_report(const MetricsReport& r) {
  std::printf("clips %zu, frames %zu, overlapping frames %zu\n", r.clips, r.frames, r.overlapping_frames);
  print_scores("frame", r.frame.all);
  print_scores("frame overlap", r.frame.overlapping);
  print_scores("frame no-overlap", r.frame.non_overlapping);
  print_scores("event", r.event.scores);
}

int run_train(const fs::path& config_path) {
  const RunConfig cfg = parse_config(config_path);
  std::printf("training %s for %u epochs on %s\n", to_string(cfg.mode).c_str(), cfg.epochs,
              cfg.dataset.c_str());
  const TrainResult r = train(cfg);
  const EpochRecord& last = r.log.epochs.back();
  std::printf("epoch %u: total %.5f  L_SED %.5f  L_FC %.5f  L_SC %.5f  lambda2 %.3g\n", last.epoch,
              last.total, last.l_sed, last.l_fc, last.l_sc, last.lambda2);
  if (r.final_metrics) print_report(*r.final_metrics);
  std::printf("outputs in %s\n", cfg.output_dir.c_str());
  return 0;
}

int run_eval(const fs::path& ckpt_path, const fs::path& dataset, const fs::path& out,
             const InferenceOptions& opts) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const MetricsReport r = evaluate(ckpt, load_dataset(dataset), opts);
  write_metrics(out, r);
  std::printf("%s model\n", opts.use_student ? "student" : "teacher");
  print_report(r);
  std::printf("wrote %s and %s\n", (out / "metrics.txt").c_str(), (out / "metrics.csv").c_str());
  return 0;
}

int run_probe(const fs::path& ckpt_path, const fs::path& dataset, const fs::path& out,
              const InferenceOptions& opts) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ProbeReport r = probe(ckpt, load_dataset(dataset), opts);
  write_probe(out, r);
  std::printf("leakage AUC (rows: feature class, columns: target class)\n");
  for (std::size_t c = 0; c < r.classes; ++c) {
    for (std::size_t k = 0; k < r.classes; ++k) {
      const auto v = r.at(c, k);
      if (v) {
        std::printf(" %6.3f%s", *v, c == k ? "*" : " ");
      } else {
        std::printf("     na ");
      }
    }
    std::printf("\n");
  }
  std::printf("self mean %.4f, cross mean %.4f\n", r.diagonal_mean(), r.off_diagonal_mean());
  std::printf("wrote leakage.csv and pca_class*.csv to %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disentangled-feature sound event detection on synthetic data"};
  app.require_subcommand(1);

  fs::path spec, out;
  bool serial = false;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  gen->add_option("--spec", spec, "Dataset spec file")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_flag("--serial", serial, "Generate on one thread");

  fs::path config;
  auto* tr = app.add_subcommand("train", "Train a model from a config file");
  tr->add_option("--config", config, "Run config file")->required();

  fs::path ckpt, dataset, report_dir;
  InferenceOptions opts;
  auto add_inference = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
    sub->add_option("--dataset", dataset, "Dataset directory")->required();
    sub->add_option("--out", report_dir, "Report directory (default: the checkpoint's)");
    sub->add_flag("--use-student", opts.use_student, "Use the student instead of the teacher");
    sub->add_option("--threshold", opts.threshold, "Decision threshold")->check(CLI::Range(0.0, 1.0));
    sub->add_option("--median-window", opts.median_window, "Odd median filter window");
  };
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  add_inference(ev);
  ev->add_option("--collar", opts.collar, "Event collar in frames");
  auto* pr = app.add_subcommand("probe", "Leakage probe and PCA export");
  add_inference(pr);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (report_dir.empty()) report_dir = ckpt.parent_path().empty() ? fs::path(".") : ckpt.parent_path();
    if (*gen) return run_generate(spec, out, serial);
    if (*tr) return run_train(config);
    if (opts.median_window % 2 == 0 || !(opts.threshold > 0.0 && opts.threshold < 1.0)) {
      throw ValidationError("--median-window must be odd and --threshold must lie in (0, 1)");
    }
    if (*ev) return run_eval(ckpt, dataset, report_dir, opts);
    if (*pr) return run_probe(ckpt, dataset, report_dir, opts);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
