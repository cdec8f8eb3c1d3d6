#include "sedx/trainer.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>

#include "sedx/binio.hpp"
#include "sedx/errors.hpp"
#include "sedx/random.hpp"

namespace sedx {

ModelConfig model_config_for(const RunConfig& cfg, const Dataset& data) {
  if (data.clips.empty()) throw ValidationError(data.root.string() + ": dataset has no clips");
  const ClipRecord& first = data.clips.front();
  ModelConfig m;
  m.n_mels = static_cast<std::uint32_t>(first.n_mels());
  m.n_classes = first.n_classes;
  m.input_frames = static_cast<std::uint32_t>(first.input_frames());
  m.conv1_channels = cfg.conv1_channels;
  m.conv2_channels = cfg.conv2_channels;
  m.rnn_hidden = cfg.rnn_hidden;
  m.temporal_pool = cfg.temporal_pool;
  m.head = uses_projector(cfg.mode) ? HeadKind::kProjector : HeadKind::kShared;
  try {
    m.validate();
  } catch (const ContractError& e) {
    throw ValidationError(data.root.string() + ": " + e.what());
  }
  check_compatible(m, data);
  return m;
}

namespace {

struct ClipPlan {
  bool sed = false;
  bool fc = false;
  bool sc = false;
  DenseArray teacher_probs;
  LabelGrid pseudo;
};

bool has_sed_term(const ClipRecord& clip, const SedTerms& terms) {
  if (terms.consistency) return true;
  if (clip.mode == LabelMode::kStrong) return terms.strong_bce;
  if (clip.mode == LabelMode::kWeak) return terms.weak_bce;
  return false;
}

// Runs `body(i)` for i in [0, n), in parallel when asked, and rethrows the
// first exception.
template <typename Fn>
void for_each_clip(std::size_t n, bool parallel, Fn body) {
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) if (parallel)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
#pragma omp critical(sedx_clip_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace

BatchResult batch_gradient(const ModelParams& student, const ModelParams& teacher,
                           std::span<const ClipRecord* const> clips, const RunConfig& cfg,
                           double epoch, bool with_grads, bool parallel) {
  const std::size_t n = clips.size();
  std::vector<ClipPlan> plan(n);
  for_each_clip(n, parallel, [&](std::size_t i) {
    const ClipRecord& clip = *clips[i];
    ClipPlan& p = plan[i];
    p.sed = has_sed_term(clip, cfg.sed_terms);
    p.fc = uses_fc(cfg.mode) && clip.mode == LabelMode::kStrong && active_class_count(*clip.strong) > 0;
    const bool sc_clip = uses_sc(cfg.mode) && clip.mode == LabelMode::kUnlabeled;
    if (cfg.sed_terms.consistency || sc_clip) p.teacher_probs = infer(teacher, clip.features);
    if (sc_clip) {
      p.pseudo = pseudo_labels(p.teacher_probs, cfg.schedule.pseudo_threshold);
      p.sc = active_class_count(p.pseudo) > 0;
    }
  });

  BatchResult r;
  for (const ClipPlan& p : plan) {
    r.sed_clips += p.sed;
    r.fc_clips += p.fc;
    r.sc_clips += p.sc;
  }
  const double l2 = lambda2(epoch, cfg.schedule);
  const double w_sed = r.sed_clips ? 1.0 / static_cast<double>(r.sed_clips) : 0.0;
  const double w_fc = r.fc_clips ? cfg.schedule.lambda1 / static_cast<double>(r.fc_clips) : 0.0;
  const double w_sc = r.sc_clips ? l2 / static_cast<double>(r.sc_clips) : 0.0;
  SedTerms terms = cfg.sed_terms;
  terms.consistency_weight = ramp_shape(epoch, cfg.schedule.rampup_epochs);

  struct ClipOut {
    double sed = 0.0, fc = 0.0, sc = 0.0;
    std::vector<DenseArray> grads;
  };
  std::vector<ClipOut> outs(n);
  for_each_clip(n, parallel, [&](std::size_t i) {
    const ClipRecord& clip = *clips[i];
    const ClipPlan& p = plan[i];
    if (!p.sed && !p.fc && !p.sc) return;
    Tape tape;
    const BoundParams b = bind(tape, student, true);
    const ModelOutputs out = forward(b, tape.constant(clip.features));
    std::vector<Var> parts;
    if (p.sed) {
      const ClipTarget target{clip.mode, clip.strong ? &*clip.strong : nullptr,
                              clip.weak ? &*clip.weak : nullptr,
                              cfg.sed_terms.consistency ? &p.teacher_probs : nullptr};
      Var s = sed_loss(out.probs, weak_pool(out.probs), target, terms);
      outs[i].sed = s.value().item();
      parts.push_back(scale(s, w_sed));
    }
    if (p.fc) {
      Var f = fc_loss(out.projections, *clip.strong, cfg.contrastive);
      outs[i].fc = f.value().item();
      parts.push_back(scale(f, w_fc));
    }
    if (p.sc) {
      Var s = fc_loss(out.projections, p.pseudo, cfg.contrastive);
      outs[i].sc = s.value().item();
      parts.push_back(scale(s, w_sc));
    }
    if (!with_grads) return;
    Var total = parts[0];
    for (std::size_t k = 1; k < parts.size(); ++k) total = add(total, parts[k]);
    tape.backward(total);
    outs[i].grads.reserve(b.vars.size());
    for (const Var& v : b.vars) outs[i].grads.push_back(v.grad());
  });

  // Ordered reduction: identical sums whatever the thread schedule.
  double sed = 0.0, fc = 0.0, sc = 0.0;
  if (with_grads) {
    for (const auto& a : student.arrays()) r.grads.emplace_back(a.value.shape(), 0.0);
  }
  for (const ClipOut& o : outs) {
    sed += o.sed;
    fc += o.fc;
    sc += o.sc;
    for (std::size_t k = 0; k < o.grads.size(); ++k) {
      auto dst = r.grads[k].data();
      auto src = o.grads[k].data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  r.report = total_loss(sed * w_sed, r.fc_clips ? fc / static_cast<double>(r.fc_clips) : 0.0,
                        r.sc_clips ? sc / static_cast<double>(r.sc_clips) : 0.0, epoch, cfg.schedule,
                        uses_sc(cfg.mode));
  return r;
}

namespace {

void write_outputs(const std::filesystem::path& dir, const Checkpoint& ckpt, const RunLog& log) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create output directory: " + ec.message());
  save_checkpoint(dir / "checkpoint.sedm", ckpt);
  binio::write_file_atomic(dir / "run_log.csv", log.csv());
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& data,
                  const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  const ModelConfig mc = model_config_for(cfg, data);

  std::vector<std::size_t> labelled, unlabeled;
  for (std::size_t i = 0; i < data.clips.size(); ++i) {
    (data.clips[i].mode == LabelMode::kUnlabeled ? unlabeled : labelled).push_back(i);
  }
  if (labelled.empty()) throw ValidationError(data.root.string() + ": dataset has no labelled clips");
  const bool draw_unlabeled =
      !unlabeled.empty() && (cfg.sed_terms.consistency || uses_sc(cfg.mode));

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.student = ModelParams::initialize(mc, derive_seed(cfg.seed, 1));
  ck.teacher = ck.student;
  std::vector<DenseArray> velocity;
  for (const auto& a : ck.student.arrays()) velocity.emplace_back(a.value.shape(), 0.0);

  // Separate streams keep the labelled batch sequence identical across modes.
  Rng unlabeled_rng(derive_seed(cfg.seed, 3));
  std::vector<std::size_t> unlabeled_queue;
  std::size_t unlabeled_pos = 0;

  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    Rng order_rng(derive_seed(cfg.seed, 1000 + epoch));
    std::vector<std::size_t> order = labelled;
    order_rng.shuffle(order.begin(), order.end());

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step_size = cfg.step_size;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      std::vector<const ClipRecord*> clips;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        clips.push_back(&data.clips[order[k]]);
      }
      if (draw_unlabeled) {
        for (std::uint32_t k = 0; k < cfg.unlabeled_batch_size; ++k) {
          if (unlabeled_pos == unlabeled_queue.size()) {
            unlabeled_queue = unlabeled;
            unlabeled_rng.shuffle(unlabeled_queue.begin(), unlabeled_queue.end());
            unlabeled_pos = 0;
          }
          clips.push_back(&data.clips[unlabeled_queue[unlabeled_pos++]]);
        }
      }
      const BatchResult br = batch_gradient(ck.student, ck.teacher, clips, cfg, epoch, true, cfg.parallel);
      if (!std::isfinite(br.report.total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch));
      }
      for (std::size_t i = 0; i < ck.student.size(); ++i) {
        auto w = ck.student[i].data();
        auto v = velocity[i].data();
        auto g = br.grads[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
          v[j] = cfg.momentum * v[j] + g[j];
          w[j] -= cfg.step_size * v[j];
        }
      }
      ema_update(ck.student, ck.teacher, cfg.ema_decay);

      rec.l_sed += br.report.l_sed;
      rec.l_fc += br.report.l_fc;
      rec.l_sc += br.report.l_sc;
      rec.total += br.report.total;
      rec.fc_clips += br.fc_clips;
      rec.sc_clips += br.sc_clips;
      ++rec.batches;
    }
    const double nb = static_cast<double>(rec.batches);
    rec.l_sed /= nb;
    rec.l_fc /= nb;
    rec.l_sc /= nb;
    rec.total /= nb;
    rec.lambda1 = cfg.schedule.lambda1;
    rec.lambda2 = lambda2(epoch, cfg.schedule);
    result.log.epochs.push_back(rec);
    result.log.wall_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());

    if (out_dir && cfg.checkpoint_every && (epoch + 1) % cfg.checkpoint_every == 0) {
      write_outputs(*out_dir, ck, result.log);
    }
  }

  if (data.count(LabelMode::kStrong) > 0) {
    result.final_metrics = evaluate(ck, data, cfg.inference);
  }
  if (out_dir) {
    write_outputs(*out_dir, ck, result.log);
    binio::write_file_atomic(*out_dir / "timing.csv", result.log.timing_csv());
    if (result.final_metrics) {
      binio::write_file_atomic(*out_dir / "final_metrics.txt", to_key_value(*result.final_metrics));
    }
  }
  return result;
}

TrainResult train(const RunConfig& cfg) {
  const Dataset data = load_dataset(cfg.dataset);
  return train(cfg, data, cfg.output_dir);
}

}  // namespace sedx
