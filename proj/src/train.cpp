#include "emib/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "emib/eval.hpp"
#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace emib {

using nn::Graph;
using nn::Var;

const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Emib: return "emib";
    case TrainMode::Ae: return "ae";
    case TrainMode::Mae: return "mae";
    case TrainMode::MaeSingle: return "mae-single";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& s) {
  if (s == "emib") return TrainMode::Emib;
  if (s == "ae") return TrainMode::Ae;
  if (s == "mae") return TrainMode::Mae;
  if (s == "mae-single") return TrainMode::MaeSingle;
  throw ConfigError("unknown mode: " + s + " (expected emib|ae|mae|mae-single)");
}

void TrainConfig::validate() const {
  loss.validate();
  if (steps <= 0 || batch <= 0) throw ConfigError("train: steps and batch must be positive");
  if (train_until < 0 || train_until > steps)
    throw ConfigError("train: train_until must lie in [0, steps]");
  if (mask_ratio < 0 || mask_ratio > 1) throw ConfigError("train: mask ratio out of [0,1]");
  if (mode == TrainMode::Ae && mask_ratio != 1.0)
    throw ConfigError("train: ae mode requires mask ratio 1.0");
  if (!injection_enabled() && loss.lambda_contr > 0)
    throw ConfigError("train: the contrastive term needs the injection branch (emib/ae)");
  if (lr <= 0) throw ConfigError("train: lr must be positive");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["steps"] = steps;
  j["batch"] = batch;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["warmup_frac"] = warmup_frac;
  j["seed"] = seed;
  j["mode"] = train_mode_name(mode);
  j["mask_ratio"] = mask_ratio;
  j["lambda_contr"] = loss.lambda_contr;
  j["error_mode"] = loss.error_mode == ErrorMode::Absolute ? "absolute" : "squared";
  j["distill_w_start"] = loss.distill.start;
  j["distill_w_end"] = loss.distill.end;
  j["distill_w_steps"] = loss.distill.steps;
  j["cosine_decay"] = cosine_decay;
  j["eval_every"] = eval_every;
  return j.dump();
}

namespace {

struct SampleWork {
  Matrix tokens;
  MaskPlan recon;
  MaskPlan inj;
  std::vector<int> loss_patches;
  EyeRegion eyes;
};

SampleWork make_sample_work(const Dataset& data, int id, const ModelConfig& mcfg,
                            const TrainConfig& cfg, int step, int slot) {
  SampleWork w;
  w.tokens = patchify(data.image_ptr(id), mcfg.grid);
  w.eyes = sample_eye_region(mcfg, data.corners(id));
  const Rng base(cfg.seed);
  Rng recon_rng = base.stream(rng_stream::kReconMask, static_cast<uint64_t>(step),
                              static_cast<uint64_t>(slot));
  switch (cfg.mode) {
    case TrainMode::Emib:
      w.recon = make_reconstruction_mask(w.eyes, cfg.mask_ratio, mcfg.grid, recon_rng);
      w.loss_patches = w.recon.eye;
      break;
    case TrainMode::Ae:
      w.recon = make_reconstruction_mask(w.eyes, 1.0, mcfg.grid, recon_rng);
      w.loss_patches = w.recon.eye;
      break;
    case TrainMode::Mae:
      w.recon = make_random_mask(cfg.mask_ratio, mcfg.grid, recon_rng);
      w.loss_patches = w.recon.masked;
      break;
    case TrainMode::MaeSingle:
      w.recon = make_single_eye_mask(w.eyes, cfg.mask_ratio, mcfg.grid, recon_rng);
      w.loss_patches = w.recon.masked;
      break;
  }
  if (cfg.mode == TrainMode::Ae && !w.recon.visible.empty())
    throw NumericalError("ae mode produced a non-total mask");
  if (cfg.injection_enabled()) {
    Rng inj_rng = base.stream(rng_stream::kInjMask, static_cast<uint64_t>(step),
                              static_cast<uint64_t>(slot));
    w.inj = make_injection_mask(w.eyes, mcfg.grid, inj_rng);
  }
  return w;
}

struct SampleLoss {
  Var total;
  double l_rec = 0;
  double l_contr = 0;
};

SampleLoss build_sample_loss(Graph& g, const EmibModel& model, const SampleWork& w,
                             const TrainConfig& cfg, int step, int slot,
                             ForwardOptions opt) {
  SampleLoss out;
  opt.use_injection = cfg.injection_enabled();
  ForwardOutput fwd = forward_emib(g, model, w.tokens, w.recon, w.inj, opt);
  Var l_rec = reconstruction_loss_node(g, fwd.pred_pixels, w.tokens, w.loss_patches,
                                       cfg.loss.error_mode);
  out.l_rec = g.scalar(l_rec);
  out.total = l_rec;
  if (cfg.loss.lambda_contr > 0 && cfg.mode == TrainMode::Emib) {
    Rng neg_rng = Rng(cfg.seed).stream(rng_stream::kNegSample,
                                       static_cast<uint64_t>(step),
                                       static_cast<uint64_t>(slot));
    ContrastiveErrors errs = contrastive_forward(
        g, model, w.tokens, w.recon, w.eyes, fwd.inj_token, cfg.loss.error_mode,
        neg_rng, opt.stopgrad_recon_encoder);
    Var hinge = g.relu(g.sub(errs.err_pos, errs.err_neg));
    out.l_contr = g.scalar(hinge);
    out.total = g.add_scaled(l_rec, hinge, cfg.loss.lambda_contr);
  }
  return out;
}

std::vector<int> draw_batch(const Dataset& data, const TrainConfig& cfg, int step) {
  const std::vector<int>& train = data.train_ids();
  if (static_cast<int>(train.size()) < cfg.batch)
    throw ConfigError("train: batch larger than the train split");
  std::vector<int> pool = train;
  Rng rng = Rng(cfg.seed).stream(rng_stream::kBatch, static_cast<uint64_t>(step));
  std::vector<int> out;
  out.reserve(static_cast<size_t>(cfg.batch));
  for (int i = 0; i < cfg.batch; ++i) {
    const size_t j =
        static_cast<size_t>(i) + static_cast<size_t>(rng.uniform_int(pool.size() - i));
    std::swap(pool[static_cast<size_t>(i)], pool[j]);
    out.push_back(pool[static_cast<size_t>(i)]);
  }
  return out;
}

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void append_jsonl(std::ofstream& out, const StepLog& lg) {
  nlohmann::json j;
  j["step"] = lg.step;
  j["l_rec"] = lg.l_rec;
  j["l_contr"] = lg.l_contr;
  j["lr"] = lg.lr;
  if (lg.probe_error_deg) j["probe_error_deg"] = *lg.probe_error_deg;
  out << j.dump() << "\n";
}

double quick_probe_error(const EmibModel& model, const Dataset& data) {
  const int k = std::min<int>(500, static_cast<int>(data.train_ids().size()));
  const EvalReport r = few_shot_protocol(model, data, k, 1, false,
                                         FeatureMode::Bottleneck, 1e-3, 0);
  return r.mean_deg;
}

}  // namespace

TrainResult pretrain(const Dataset& data, const ModelConfig& model_cfg,
                     const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  model_cfg.validate();
  if (data.image_size() != model_cfg.grid.image_size)
    throw ConfigError("pretrain: dataset image size does not match the model grid");

  std::filesystem::create_directories(out_dir);
  std::ofstream log_out(out_dir / "train_log.jsonl", std::ios::trunc);
  if (!log_out) throw IoError("cannot write training log in " + out_dir.string());

  TrainResult result;
  result.model = std::make_unique<EmibModel>(model_cfg);
  EmibModel& model = *result.model;

  nn::AdamWConfig adam_cfg;
  adam_cfg.weight_decay = cfg.weight_decay;
  nn::AdamW adam(model.params(), adam_cfg);

  int start_step = 0;
  if (cfg.init_from) {
    TrainProgress progress;
    bool has_progress = true;
    std::unique_ptr<EmibModel> loaded;
    try {
      loaded = load_checkpoint(*cfg.init_from, &progress);
    } catch (const IoError&) {
      loaded = load_checkpoint(*cfg.init_from, nullptr);
      has_progress = false;
    }
    if (!(loaded->config() == model_cfg))
      throw ConfigError("pretrain: init checkpoint config does not match");
    std::copy(loaded->params().flat().begin(), loaded->params().flat().end(),
              model.params().flat().begin());
    if (has_progress) {
      if (progress.seed != cfg.seed || progress.total_steps != cfg.steps)
        throw ConfigError("pretrain: resume requires the original seed and step count");
      adam.restore(progress.adam_m, progress.adam_v, progress.adam_t);
      start_step = progress.step;
    }
  } else {
    model.init_params(cfg.seed);
  }

  const size_t n_params = model.params().total_size();
  std::vector<std::vector<float>> sinks(static_cast<size_t>(cfg.batch));
  for (auto& s : sinks) s.assign(n_params, 0.0f);
  std::vector<float> grad(n_params, 0.0f);

  const int nt = thread_count();
  std::vector<Graph> graphs;
  graphs.reserve(static_cast<size_t>(nt));
  for (int t = 0; t < nt; ++t) graphs.emplace_back(&model.params());

  // rolling snapshot for the divergence guard
  std::vector<float> snap_params(model.params().flat().begin(),
                                 model.params().flat().end());
  std::vector<float> snap_m(adam.moment1().begin(), adam.moment1().end());
  std::vector<float> snap_v(adam.moment2().begin(), adam.moment2().end());
  int64_t snap_t = adam.steps_taken();
  int snap_step = start_step;
  const int snap_every = std::max(1, cfg.steps / 10);

  auto write_ckpt = [&](int done_steps) {
    TrainProgress progress;
    progress.adam_m.assign(adam.moment1().begin(), adam.moment1().end());
    progress.adam_v.assign(adam.moment2().begin(), adam.moment2().end());
    progress.adam_t = adam.steps_taken();
    progress.step = done_steps;
    progress.total_steps = cfg.steps;
    progress.seed = cfg.seed;
    progress.train_config_json = cfg.to_json();
    result.checkpoint_dir = out_dir / "checkpoint";
    save_checkpoint(model, result.checkpoint_dir, &progress);
  };

  std::vector<double> rec_losses(static_cast<size_t>(cfg.batch));
  std::vector<double> contr_losses(static_cast<size_t>(cfg.batch));

  const int end_step = cfg.train_until > 0 ? cfg.train_until : cfg.steps;
  for (int step = start_step; step < end_step; ++step) {
    const std::vector<int> batch = draw_batch(data, cfg, step);
    const float lr = nn::lr_schedule(step, cfg.steps, cfg.lr,
                                     static_cast<float>(cfg.warmup_frac),
                                     cfg.cosine_decay);

    std::exception_ptr batch_error;
#pragma omp parallel for schedule(static, 1)
    for (int slot = 0; slot < cfg.batch; ++slot) {
      try {
#ifdef _OPENMP
        Graph& g = graphs[static_cast<size_t>(omp_get_thread_num())];
#else
        Graph& g = graphs[0];
#endif
        g.reset();
        std::fill(sinks[static_cast<size_t>(slot)].begin(),
                  sinks[static_cast<size_t>(slot)].end(), 0.0f);
        const SampleWork w = make_sample_work(data, batch[static_cast<size_t>(slot)],
                                              model_cfg, cfg, step, slot);
        const SampleLoss sl = build_sample_loss(g, model, w, cfg, step, slot, {});
        g.backward(sl.total, sinks[static_cast<size_t>(slot)]);
        rec_losses[static_cast<size_t>(slot)] = sl.l_rec;
        contr_losses[static_cast<size_t>(slot)] = sl.l_contr;
      } catch (...) {
#pragma omp critical
        if (!batch_error) batch_error = std::current_exception();
      }
    }
    if (batch_error) std::rethrow_exception(batch_error);

    // deterministic reduction in slot order, batch-mean scaling
    std::fill(grad.begin(), grad.end(), 0.0f);
    for (int slot = 0; slot < cfg.batch; ++slot) {
      const float* s = sinks[static_cast<size_t>(slot)].data();
      for (size_t i = 0; i < n_params; ++i) grad[i] += s[i];
    }
    const float inv_b = 1.0f / static_cast<float>(cfg.batch);
    for (size_t i = 0; i < n_params; ++i) grad[i] *= inv_b;

    double mean_rec = 0, mean_contr = 0;
    for (int slot = 0; slot < cfg.batch; ++slot) {
      mean_rec += rec_losses[static_cast<size_t>(slot)];
      mean_contr += contr_losses[static_cast<size_t>(slot)];
    }
    mean_rec /= cfg.batch;
    mean_contr /= cfg.batch;

    if (!std::isfinite(mean_rec) || !std::isfinite(mean_contr)) {
      // restore the last good snapshot and stop
      std::copy(snap_params.begin(), snap_params.end(), model.params().flat().begin());
      adam.restore(snap_m, snap_v, snap_t);
      result.diverged = true;
      result.final_step = snap_step;
      write_ckpt(snap_step);
      return result;
    }

    adam.step(model.params(), grad, lr);

    StepLog lg;
    lg.step = step + 1;
    lg.l_rec = mean_rec;
    lg.l_contr = mean_contr;
    lg.lr = lr;
    const bool want_eval = cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 ||
                                                  step + 1 == cfg.steps);
    if (want_eval) lg.probe_error_deg = quick_probe_error(model, data);
    if ((step + 1) % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps ||
        want_eval) {
      append_jsonl(log_out, lg);
      result.log.push_back(lg);
    }

    if ((step + 1) % snap_every == 0) {
      std::copy(model.params().flat().begin(), model.params().flat().end(),
                snap_params.begin());
      std::copy(adam.moment1().begin(), adam.moment1().end(), snap_m.begin());
      std::copy(adam.moment2().begin(), adam.moment2().end(), snap_v.begin());
      snap_t = adam.steps_taken();
      snap_step = step + 1;
    }
  }

  result.final_step = end_step;
  write_ckpt(end_step);
  return result;
}

GradientAuditReport gradient_audit(const EmibModel& model, const Dataset& data,
                                   std::span<const int> sample_ids,
                                   const TrainConfig& cfg) {
  cfg.validate();
  const ModelConfig& mcfg = model.config();
  const size_t n_params = model.params().total_size();
  std::vector<float> combined(n_params, 0.0f), rec_only(n_params, 0.0f),
      inj_only(n_params, 0.0f);
  std::vector<float> sink(n_params, 0.0f);

  Graph g(&model.params());
  auto run_pass = [&](const ForwardOptions& opt, std::vector<float>& acc) {
    for (size_t s = 0; s < sample_ids.size(); ++s) {
      g.reset();
      std::fill(sink.begin(), sink.end(), 0.0f);
      const SampleWork w = make_sample_work(data, sample_ids[s], mcfg, cfg, 0,
                                            static_cast<int>(s));
      const SampleLoss sl =
          build_sample_loss(g, model, w, cfg, 0, static_cast<int>(s), opt);
      g.backward(sl.total, sink);
      for (size_t i = 0; i < n_params; ++i) acc[i] += sink[i];
    }
  };

  ForwardOptions opt_all;
  run_pass(opt_all, combined);
  ForwardOptions opt_rec;  // freeze the injection encoder output -> g_rec
  opt_rec.stopgrad_injection_encoder = true;
  run_pass(opt_rec, rec_only);
  ForwardOptions opt_inj;  // freeze the reconstruction encoder output(s) -> g_inj
  opt_inj.stopgrad_recon_encoder = true;
  run_pass(opt_inj, inj_only);

  GradientAuditReport report;
  const nn::ParamStore& ps = model.params();
  double scale = 0;
  for (int id = 0; id < ps.count(); ++id) {
    if (ps.info(id).group != nn::ParamGroup::Encoder) continue;
    const auto& info = ps.info(id);
    for (size_t i = info.offset; i < info.offset + static_cast<size_t>(info.rows) * info.cols; ++i)
      scale = std::max(scale, std::fabs(static_cast<double>(combined[i])));
  }
  report.grad_scale = scale;
  const double denom = scale > 0 ? scale : 1.0;
  for (int id = 0; id < ps.count(); ++id) {
    const auto& info = ps.info(id);
    if (info.group != nn::ParamGroup::Encoder) continue;
    double dev = 0;
    for (size_t i = info.offset;
         i < info.offset + static_cast<size_t>(info.rows) * info.cols; ++i) {
      const double d = static_cast<double>(combined[i]) -
                       (static_cast<double>(rec_only[i]) + inj_only[i]);
      dev = std::max(dev, std::fabs(d));
    }
    report.groups.push_back({info.name, dev / denom});
    report.max_rel_deviation = std::max(report.max_rel_deviation, dev / denom);
  }
  return report;
}

std::string GradientAuditReport::to_json() const {
  nlohmann::json j;
  j["max_rel_deviation"] = max_rel_deviation;
  j["grad_scale"] = grad_scale;
  j["groups"] = nlohmann::json::array();
  for (const auto& grp : groups)
    j["groups"].push_back({{"name", grp.name}, {"rel_deviation", grp.rel_deviation}});
  return j.dump(2);
}

DistillResult distill_train(const EmibModel& teacher, const StudentConfig& student_cfg,
                            const Dataset& data, const TrainConfig& cfg,
                            const std::filesystem::path& out_dir) {
  cfg.validate();
  student_cfg.validate();
  const ModelConfig& mcfg = teacher.config();
  if (student_cfg.z_dim != mcfg.bottleneck.z_dim)
    throw ConfigError("distill: student z_dim must equal the teacher bottleneck dim");
  if (data.image_size() != mcfg.grid.image_size)
    throw ConfigError("distill: dataset image size does not match the teacher grid");

  std::filesystem::create_directories(out_dir);
  std::ofstream log_out(out_dir / "train_log.jsonl", std::ios::trunc);
  if (!log_out) throw IoError("cannot write training log in " + out_dir.string());

  // fine-tuned copy of the teacher's EM-AE stack; the frozen original keeps
  // providing the distillation targets
  EmibModel engine(mcfg);
  std::copy(teacher.params().flat().begin(), teacher.params().flat().end(),
            engine.params().flat().begin());

  DistillResult result;
  result.student = std::make_unique<StudentModel>(student_cfg, mcfg.grid.image_size);
  StudentModel& student = *result.student;
  student.init_params(cfg.seed + 1);

  nn::AdamWConfig adam_cfg;
  adam_cfg.weight_decay = cfg.weight_decay;
  nn::AdamW adam_engine(engine.params(), adam_cfg);
  nn::AdamW adam_student(student.params(), adam_cfg);

  const size_t np_engine = engine.params().total_size();
  const size_t np_student = student.params().total_size();
  std::vector<std::vector<float>> sinks_e(static_cast<size_t>(cfg.batch));
  std::vector<std::vector<float>> sinks_s(static_cast<size_t>(cfg.batch));
  for (auto& s : sinks_e) s.assign(np_engine, 0.0f);
  for (auto& s : sinks_s) s.assign(np_student, 0.0f);
  std::vector<float> grad_e(np_engine), grad_s(np_student);

  const int nt = thread_count();
  std::vector<Graph> g_teacher, g_engine, g_student;
  for (int t = 0; t < nt; ++t) {
    g_teacher.emplace_back(&teacher.params());
    g_engine.emplace_back(&engine.params());
    g_student.emplace_back(&student.params());
  }

  const MaskPlan full = make_full_visible_plan(mcfg.grid);
  std::vector<double> rec_losses(static_cast<size_t>(cfg.batch));
  std::vector<double> dist_losses(static_cast<size_t>(cfg.batch));

  for (int step = 0; step < cfg.steps; ++step) {
    const std::vector<int> batch = draw_batch(data, cfg, step);
    const float lr = nn::lr_schedule(step, cfg.steps, cfg.lr,
                                     static_cast<float>(cfg.warmup_frac),
                                     cfg.cosine_decay);
    const float w_dist = cfg.loss.distill.at(step);

    std::exception_ptr batch_error;
#pragma omp parallel for schedule(static, 1)
    for (int slot = 0; slot < cfg.batch; ++slot) {
      try {
#ifdef _OPENMP
      const int tid = omp_get_thread_num();
#else
      const int tid = 0;
#endif
      Graph& gt = g_teacher[static_cast<size_t>(tid)];
      Graph& ge = g_engine[static_cast<size_t>(tid)];
      Graph& gs = g_student[static_cast<size_t>(tid)];
      gt.reset();
      ge.reset();
      gs.reset();
      std::fill(sinks_e[static_cast<size_t>(slot)].begin(),
                sinks_e[static_cast<size_t>(slot)].end(), 0.0f);
      std::fill(sinks_s[static_cast<size_t>(slot)].begin(),
                sinks_s[static_cast<size_t>(slot)].end(), 0.0f);

      const int id = batch[static_cast<size_t>(slot)];
      const Matrix image = data.image(id);
      const Matrix tokens = patchify(image, mcfg.grid);

      // frozen teacher target from the fully visible face
      Var t_in = gt.const_view(tokens.rows, tokens.cols, tokens.data.data());
      Var t_lat = teacher.encode(gt, t_in, full.visible);
      auto [t_zb, t_inj] = teacher.bottleneck_inject(gt, t_lat);
      (void)t_inj;
      const Matrix z_t = gt.value_matrix(t_zb);

      // student embedding
      const Matrix chw = hwc_to_chw(image);
      Var s_in = gs.constant(chw);
      Var z_s = student.forward(gs, s_in);
      const Matrix z_s_val = gs.value_matrix(z_s);

      // reconstruction branch with the student as injection source
      const Rng base(cfg.seed);
      Rng recon_rng = base.stream(rng_stream::kReconMask, static_cast<uint64_t>(step),
                                  static_cast<uint64_t>(slot));
      const EyeRegion eyes = sample_eye_region(mcfg, data.corners(id));
      const MaskPlan recon =
          make_reconstruction_mask(eyes, cfg.mask_ratio, mcfg.grid, recon_rng);
      const Matrix vis_tokens = gather_rows(tokens, recon.visible);
      Var e_in = ge.constant(vis_tokens);
      Var e_lat = engine.encode(ge, e_in, recon.visible);
      Var zc = ge.constant(z_s_val);  // boundary leaf carrying the student output
      Var inj = ge.matmul(zc, ge.param(engine.bottleneck_up_param()));
      Var pred = engine.decode(ge, e_lat, recon.visible, recon.masked, inj);
      Var l_rec = reconstruction_loss_node(ge, pred, tokens, recon.eye,
                                           cfg.loss.error_mode);
      rec_losses[static_cast<size_t>(slot)] = ge.scalar(l_rec);
      ge.backward(l_rec, sinks_e[static_cast<size_t>(slot)]);

      // student gradient: distillation term plus the chained reconstruction term
      Var l_dist = gs.mse(z_s, z_t.data.data());
      dist_losses[static_cast<size_t>(slot)] = gs.scalar(l_dist);
      Var l_dist_w = gs.scale(l_dist, w_dist);
      gs.backward(l_dist_w, sinks_s[static_cast<size_t>(slot)]);
      gs.backward_seeded(z_s, ge.grad(zc), sinks_s[static_cast<size_t>(slot)]);
      } catch (...) {
#pragma omp critical
        if (!batch_error) batch_error = std::current_exception();
      }
    }
    if (batch_error) std::rethrow_exception(batch_error);

    std::fill(grad_e.begin(), grad_e.end(), 0.0f);
    std::fill(grad_s.begin(), grad_s.end(), 0.0f);
    for (int slot = 0; slot < cfg.batch; ++slot) {
      for (size_t i = 0; i < np_engine; ++i)
        grad_e[i] += sinks_e[static_cast<size_t>(slot)][i];
      for (size_t i = 0; i < np_student; ++i)
        grad_s[i] += sinks_s[static_cast<size_t>(slot)][i];
    }
    const float inv_b = 1.0f / static_cast<float>(cfg.batch);
    for (float& v : grad_e) v *= inv_b;
    for (float& v : grad_s) v *= inv_b;

    double mean_rec = 0, mean_dist = 0;
    for (int slot = 0; slot < cfg.batch; ++slot) {
      mean_rec += rec_losses[static_cast<size_t>(slot)];
      mean_dist += dist_losses[static_cast<size_t>(slot)];
    }
    mean_rec /= cfg.batch;
    mean_dist /= cfg.batch;
    if (!std::isfinite(mean_rec) || !std::isfinite(mean_dist)) {
      result.diverged = true;
      break;
    }

    adam_engine.step(engine.params(), grad_e, lr);
    adam_student.step(student.params(), grad_s, lr);

    if ((step + 1) % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps) {
      StepLog lg;
      lg.step = step + 1;
      lg.l_rec = mean_rec;
      lg.l_contr = mean_dist;  // distillation loss in the auxiliary slot
      lg.lr = lr;
      append_jsonl(log_out, lg);
      result.log.push_back(lg);
    }
  }

  TrainProgress progress;
  progress.adam_m.assign(adam_student.moment1().begin(), adam_student.moment1().end());
  progress.adam_v.assign(adam_student.moment2().begin(), adam_student.moment2().end());
  progress.adam_t = adam_student.steps_taken();
  progress.step = cfg.steps;
  progress.total_steps = cfg.steps;
  progress.seed = cfg.seed;
  progress.train_config_json = cfg.to_json();
  result.checkpoint_dir = out_dir / "checkpoint";
  save_student_checkpoint(*result.student, result.checkpoint_dir, &progress);
  return result;
}

}  // namespace emib
