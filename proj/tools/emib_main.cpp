// emib: synthetic face-gaze data generation, dual-branch masked-autoencoder
// pre-training, linear probing, distillation, gaze redirection and the
// gradient-sharing audit, from one binary.
//
// Exit codes: 0 ok, 2 usage/config error, 3 I/O failure, 4 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "emib/blob_io.hpp"
#include "emib/checkpoint.hpp"
#include "emib/dataset.hpp"
#include "emib/eval.hpp"
#include "emib/png.hpp"
#include "emib/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;

json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw emib::IoError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw emib::ConfigError("config file parse error: " + std::string(e.what()));
  }
  return j;
}

// precedence: built-in defaults < config file < command-line flags
template <typename T>
void apply_config(const json& cfg, const CLI::App& app, const std::string& flag,
                  const std::string& key, T& value) {
  const CLI::Option* opt = app.get_option_no_throw(flag);
  const bool user_set = opt != nullptr && opt->count() > 0;
  if (!user_set && cfg.contains(key)) value = cfg.at(key).get<T>();
}

fs::path resolve_out_dir(const CLI::App& app, const std::string& flag,
                         std::string out_flag_value, const std::string& command) {
  if (app.count(flag) > 0 && !out_flag_value.empty()) return out_flag_value;
  if (const char* root = std::getenv("EMIB_RUN_DIR"))
    return fs::path(root) / command;
  if (!out_flag_value.empty()) return out_flag_value;
  throw emib::ConfigError("--out is required (or set EMIB_RUN_DIR)");
}

void echo_resolved_config(const fs::path& dir, const json& resolved) {
  fs::create_directories(dir);
  std::ofstream out(dir / "resolved_config.json", std::ios::trunc);
  if (!out) throw emib::IoError("cannot write resolved_config.json in " + dir.string());
  out << resolved.dump(2) << "\n";
}

emib::ModelConfig model_config_from_json(const json& cfg) {
  emib::ModelConfig m = emib::desk_config();
  if (cfg.contains("model")) {
    const json& j = cfg.at("model");
    if (j.contains("preset")) {
      const std::string p = j.at("preset").get<std::string>();
      if (p == "desk")
        m = emib::desk_config();
      else if (p == "vit-tiny")
        m = emib::vit_tiny_config();
      else if (p == "vit-base")
        m = emib::vit_base_config();
      else
        throw emib::ConfigError("unknown model preset: " + p);
    }
    if (j.contains("image_size")) m.grid.image_size = j.at("image_size").get<int>();
    if (j.contains("patch_size")) m.grid.patch_size = j.at("patch_size").get<int>();
    if (j.contains("enc_depth")) m.encoder.depth = j.at("enc_depth").get<int>();
    if (j.contains("enc_dim")) m.encoder.dim = j.at("enc_dim").get<int>();
    if (j.contains("enc_heads")) m.encoder.heads = j.at("enc_heads").get<int>();
    if (j.contains("dec_depth")) m.decoder.depth = j.at("dec_depth").get<int>();
    if (j.contains("dec_dim")) m.decoder.dim = j.at("dec_dim").get<int>();
    if (j.contains("dec_heads")) m.decoder.heads = j.at("dec_heads").get<int>();
    if (j.contains("z_dim")) m.bottleneck.z_dim = j.at("z_dim").get<int>();
    if (j.contains("eye_window_rows")) m.eye_window_rows = j.at("eye_window_rows").get<int>();
    if (j.contains("eye_window_cols")) m.eye_window_cols = j.at("eye_window_cols").get<int>();
  }
  return m;
}

json model_config_to_json(const emib::ModelConfig& m) {
  return json{{"image_size", m.grid.image_size},
              {"patch_size", m.grid.patch_size},
              {"enc_depth", m.encoder.depth},
              {"enc_dim", m.encoder.dim},
              {"enc_heads", m.encoder.heads},
              {"dec_depth", m.decoder.depth},
              {"dec_dim", m.decoder.dim},
              {"dec_heads", m.decoder.heads},
              {"z_dim", m.bottleneck.z_dim},
              {"eye_window_rows", m.eye_window_rows},
              {"eye_window_cols", m.eye_window_cols}};
}

int cmd_synth(CLI::App& app, int& count, std::string& out, uint64_t& seed,
              int& image_size, int& subjects, double& train_fraction,
              std::string& config_path) {
  json cfg = config_path.empty() ? json::object() : load_config_file(config_path);
  apply_config(cfg, app, "--count", "count", count);
  apply_config(cfg, app, "--seed", "seed", seed);
  apply_config(cfg, app, "--image-size", "image_size", image_size);
  apply_config(cfg, app, "--subjects", "subjects", subjects);
  apply_config(cfg, app, "--train-fraction", "train_fraction", train_fraction);

  emib::SynthParams params;
  params.image_size = image_size;
  params.n_subjects = subjects;
  params.train_fraction = train_fraction;
  const fs::path dir = resolve_out_dir(app, "--out", out, "synth");
  const emib::DatasetManifest m = emib::generate_dataset(count, params, seed, dir);
  echo_resolved_config(dir, json{{"command", "synth"},
                                 {"count", count},
                                 {"seed", seed},
                                 {"image_size", image_size},
                                 {"subjects", subjects},
                                 {"train_fraction", train_fraction}});
  size_t bytes = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) bytes += e.file_size();
  std::cout << "wrote " << m.count << " samples to " << dir.string() << " ("
            << m.train_ids.size() << " train / " << m.test_ids.size() << " test, "
            << bytes << " bytes)\n";
  return kExitOk;
}

struct PretrainFlags {
  std::string data, out, config_path, mode = "emib", init_from;
  int steps = 2000, batch = 16, eval_every = 0;
  uint64_t seed = 0;
  double lr = 1.5e-4, mask_ratio = 0.75, lambda_contr = -1.0;
  bool constant_lr = false;
};

emib::TrainConfig build_train_config(const CLI::App& app, const json& cfg,
                                     PretrainFlags& f) {
  apply_config(cfg, app, "--mode", "mode", f.mode);
  apply_config(cfg, app, "--steps", "steps", f.steps);
  apply_config(cfg, app, "--batch", "batch", f.batch);
  apply_config(cfg, app, "--seed", "seed", f.seed);
  apply_config(cfg, app, "--lr", "lr", f.lr);
  apply_config(cfg, app, "--mask-ratio", "mask_ratio", f.mask_ratio);
  apply_config(cfg, app, "--lambda", "lambda_contr", f.lambda_contr);
  apply_config(cfg, app, "--eval-every", "eval_every", f.eval_every);
  apply_config(cfg, app, "--constant-lr", "constant_lr", f.constant_lr);

  emib::TrainConfig t;
  t.mode = emib::parse_train_mode(f.mode);
  t.steps = f.steps;
  t.batch = f.batch;
  t.seed = f.seed;
  t.lr = static_cast<float>(f.lr);
  t.mask_ratio = t.mode == emib::TrainMode::Ae ? 1.0 : f.mask_ratio;
  t.eval_every = f.eval_every;
  t.cosine_decay = !f.constant_lr;
  // baselines train with the plain reconstruction objective; the contrastive
  // term defaults on for emib only
  if (f.lambda_contr >= 0)
    t.loss.lambda_contr = static_cast<float>(f.lambda_contr);
  else
    t.loss.lambda_contr = t.mode == emib::TrainMode::Emib ? 0.01f : 0.0f;
  if (!f.init_from.empty()) t.init_from = fs::path(f.init_from);
  return t;
}

int cmd_pretrain(CLI::App& app, PretrainFlags& f) {
  json cfg = f.config_path.empty() ? json::object() : load_config_file(f.config_path);
  const emib::TrainConfig t = build_train_config(app, cfg, f);
  const emib::ModelConfig m = model_config_from_json(cfg);
  const fs::path dir = resolve_out_dir(app, "--out", f.out, "pretrain");
  const emib::Dataset data = emib::Dataset::load(fs::path(f.data) / "manifest.json");

  json resolved = json::parse(t.to_json());
  resolved["command"] = "pretrain";
  resolved["data"] = f.data;
  resolved["model"] = model_config_to_json(m);
  echo_resolved_config(dir, resolved);

  const emib::TrainResult r = emib::pretrain(data, m, t, dir);
  if (r.diverged) {
    std::cerr << "training diverged at step " << r.final_step
              << "; last good checkpoint written to " << r.checkpoint_dir.string()
              << "\n";
    return kExitNumerical;
  }
  std::cout << "checkpoint written to " << r.checkpoint_dir.string() << " after "
            << r.final_step << " steps\n";
  if (!r.log.empty()) {
    const auto& last = r.log.back();
    std::cout << "final l_rec=" << last.l_rec << " l_contr=" << last.l_contr;
    if (last.probe_error_deg) std::cout << " probe_error_deg=" << *last.probe_error_deg;
    std::cout << "\n";
  }
  return kExitOk;
}

int cmd_probe(CLI::App& app, std::string& ckpt, std::string& data_path,
              std::string& shots, int& repeats, bool head_pose, std::string& feature,
              double& ridge, uint64_t& seed, std::string& out,
              std::string& config_path, std::string& probe_out) {
  json cfg = config_path.empty() ? json::object() : load_config_file(config_path);
  apply_config(cfg, app, "--shots", "shots", shots);
  apply_config(cfg, app, "--repeats", "repeats", repeats);
  apply_config(cfg, app, "--feature", "feature", feature);
  apply_config(cfg, app, "--ridge", "ridge", ridge);
  apply_config(cfg, app, "--seed", "seed", seed);

  const emib::Dataset data = emib::Dataset::load(fs::path(data_path) / "manifest.json");
  const emib::FeatureMode mode = emib::parse_feature_mode(feature);
  int k = 0;
  if (shots != "all") {
    try {
      k = std::stoi(shots);
    } catch (...) {
      throw emib::ConfigError("--shots must be an integer or 'all'");
    }
    if (k <= 0) throw emib::ConfigError("--shots must be positive or 'all'");
  }

  emib::EvalReport report;
  const std::string kind = emib::checkpoint_kind(ckpt);
  if (kind == "student") {
    auto student = emib::load_student_checkpoint(ckpt);
    report = emib::few_shot_protocol_student(*student, data, k, repeats, head_pose,
                                             ridge, seed);
  } else {
    auto model = emib::load_checkpoint(ckpt);
    report = emib::few_shot_protocol(*model, data, k, repeats, head_pose, mode, ridge,
                                     seed);
    if (!probe_out.empty()) {
      // fit once on the configured shot budget and save the probe weights
      std::vector<int> ids = data.train_ids();
      if (k > 0) {
        emib::Rng rng = emib::Rng(seed).stream(emib::rng_stream::kFewShot, 0);
        std::vector<int> pool = ids;
        ids.clear();
        for (int i = 0; i < k; ++i) {
          const size_t j = static_cast<size_t>(i) +
                           static_cast<size_t>(rng.uniform_int(pool.size() - i));
          std::swap(pool[static_cast<size_t>(i)], pool[j]);
          ids.push_back(pool[static_cast<size_t>(i)]);
        }
      }
      const emib::Matrix x = emib::extract_features(*model, data, ids, mode);
      emib::Matrix y(static_cast<int>(ids.size()), 2);
      for (size_t i = 0; i < ids.size(); ++i) {
        y.at(static_cast<int>(i), 0) = static_cast<float>(data.gaze(ids[i]).pitch);
        y.at(static_cast<int>(i), 1) = static_cast<float>(data.gaze(ids[i]).yaw);
      }
      emib::ProbeWeights probe = emib::fit_linear_probe(x, y, nullptr, ridge);
      probe.mode = mode;
      emib::save_probe(probe, probe_out);
    }
  }

  const std::string text = report.to_json();
  if (!out.empty()) {
    const fs::path parent = fs::path(out).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    std::ofstream o(out, std::ios::trunc);
    if (!o) throw emib::IoError("cannot write report: " + out);
    o << text << "\n";
  }
  std::cout << text << "\n";
  return kExitOk;
}

int cmd_distill(CLI::App& app, std::string& teacher, std::string& student_cfg_path,
                std::string& out, std::string& config_path, PretrainFlags& f) {
  json cfg = config_path.empty() ? json::object() : load_config_file(config_path);
  emib::TrainConfig t = build_train_config(app, cfg, f);
  t.loss.lambda_contr = 0.0f;  // distillation replaces the contrastive term
  if (cfg.contains("distill")) {
    const json& d = cfg.at("distill");
    if (d.contains("w_start")) t.loss.distill.start = d.at("w_start").get<float>();
    if (d.contains("w_end")) t.loss.distill.end = d.at("w_end").get<float>();
    if (d.contains("w_steps")) t.loss.distill.steps = d.at("w_steps").get<int>();
  }
  if (t.loss.distill.steps <= 0) t.loss.distill.steps = t.steps;

  emib::StudentConfig sc;
  if (!student_cfg_path.empty()) {
    const json j = load_config_file(student_cfg_path);
    if (j.contains("stage_widths"))
      sc.stage_widths = j.at("stage_widths").get<std::vector<int>>();
    if (j.contains("blocks_per_stage"))
      sc.blocks_per_stage = j.at("blocks_per_stage").get<std::vector<int>>();
    if (j.contains("groups")) sc.groups = j.at("groups").get<int>();
    if (j.contains("z_dim")) sc.z_dim = j.at("z_dim").get<int>();
  }

  const fs::path dir = resolve_out_dir(app, "--out", out, "distill");
  const emib::Dataset data = emib::Dataset::load(fs::path(f.data) / "manifest.json");
  auto model = emib::load_checkpoint(teacher);

  json resolved = json::parse(t.to_json());
  resolved["command"] = "distill";
  resolved["teacher"] = teacher;
  resolved["student"] = {{"stage_widths", sc.stage_widths},
                         {"blocks_per_stage", sc.blocks_per_stage},
                         {"groups", sc.groups},
                         {"z_dim", sc.z_dim}};
  echo_resolved_config(dir, resolved);

  const emib::DistillResult r = emib::distill_train(*model, sc, data, t, dir);
  if (r.diverged) {
    std::cerr << "distillation diverged\n";
    return kExitNumerical;
  }
  std::cout << "student checkpoint written to " << r.checkpoint_dir.string() << "\n";
  if (!r.log.empty())
    std::cout << "final l_rec=" << r.log.back().l_rec
              << " l_distill=" << r.log.back().l_contr << "\n";
  return kExitOk;
}

int cmd_redirect(std::string& ckpt, std::string& probe_path, std::string& data_path,
                 int image_idx, double delta_pitch, double delta_yaw,
                 std::string& out) {
  auto model = emib::load_checkpoint(ckpt);
  const emib::ProbeWeights probe = emib::load_probe(probe_path);
  const emib::Dataset data = emib::Dataset::load(fs::path(data_path) / "manifest.json");
  if (image_idx < 0 || image_idx >= data.count())
    throw emib::ConfigError("--image-idx out of range");
  const emib::FaceSample sample = data.sample(image_idx);
  const emib::EyeRegion eyes = emib::sample_eye_region(*model, sample);

  const emib::Matrix redirected =
      emib::redirect_gaze(*model, probe, sample, eyes, {delta_pitch, delta_yaw});
  const emib::Matrix reconstructed =
      emib::redirect_gaze(*model, probe, sample, eyes, {0.0, 0.0});

  const fs::path dir = out;
  fs::create_directories(dir);
  echo_resolved_config(dir, json{{"command", "redirect"},
                                 {"ckpt", ckpt},
                                 {"probe", probe_path},
                                 {"image_idx", image_idx},
                                 {"delta_pitch", delta_pitch},
                                 {"delta_yaw", delta_yaw}});
  emib::write_png(dir / "redirected.png", redirected, 3);
  emib::write_png(dir / "panel.png",
                  emib::make_panel({sample.image, reconstructed, redirected}), 3);
  std::cout << "wrote " << (dir / "panel.png").string() << "\n";
  return kExitOk;
}

int cmd_audit(std::string& ckpt, std::string& data_path, int batch,
              std::string& mode, double lambda_contr) {
  auto model = emib::load_checkpoint(ckpt);
  const emib::Dataset data = emib::Dataset::load(fs::path(data_path) / "manifest.json");
  emib::TrainConfig t;
  t.mode = emib::parse_train_mode(mode);
  t.mask_ratio = t.mode == emib::TrainMode::Ae ? 1.0 : 0.75;
  t.loss.lambda_contr =
      lambda_contr >= 0 ? static_cast<float>(lambda_contr)
                        : (t.mode == emib::TrainMode::Emib ? 0.01f : 0.0f);
  t.batch = batch;
  std::vector<int> ids(
      data.train_ids().begin(),
      data.train_ids().begin() +
          std::min<size_t>(static_cast<size_t>(batch), data.train_ids().size()));
  const emib::GradientAuditReport report = emib::gradient_audit(*model, data, ids, t);
  std::cout << report.to_json() << "\n";
  return report.max_rel_deviation > 1e-3 ? kExitNumerical : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"eye-mask driven information-bottleneck gaze pipeline"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic face-gaze dataset");
  int sy_count = 1000, sy_image = 64, sy_subjects = 10;
  uint64_t sy_seed = 0;
  double sy_frac = 0.8;
  std::string sy_out, sy_cfg;
  synth->add_option("--count", sy_count, "number of samples");
  synth->add_option("--out", sy_out, "output directory");
  synth->add_option("--seed", sy_seed, "generator seed");
  synth->add_option("--image-size", sy_image, "square image size in px");
  synth->add_option("--subjects", sy_subjects, "number of synthetic subjects");
  synth->add_option("--train-fraction", sy_frac, "train split fraction (by subject)");
  synth->add_option("--config", sy_cfg, "JSON config file");

  auto* pre = app.add_subcommand("pretrain", "run self-supervised pre-training");
  PretrainFlags pf;
  pre->add_option("--data", pf.data, "dataset directory")->required();
  pre->add_option("--mode", pf.mode, "emib|ae|mae|mae-single");
  pre->add_option("--steps", pf.steps, "training steps");
  pre->add_option("--batch", pf.batch, "batch size");
  pre->add_option("--seed", pf.seed, "training seed");
  pre->add_option("--lr", pf.lr, "peak learning rate");
  pre->add_option("--mask-ratio", pf.mask_ratio, "total mask ratio");
  pre->add_option("--lambda", pf.lambda_contr,
                  "contrastive weight (default: 0.01 for emib, 0 for baselines)");
  pre->add_option("--eval-every", pf.eval_every, "probe-eval period (0 = off)");
  pre->add_flag("--constant-lr", pf.constant_lr, "hold the peak rate after warmup");
  pre->add_option("--init-from", pf.init_from, "checkpoint to initialize/resume from");
  pre->add_option("--config", pf.config_path, "JSON config file");
  pre->add_option("--out", pf.out, "output directory");

  auto* probe = app.add_subcommand("probe", "fit and evaluate a linear gaze probe");
  std::string pr_ckpt, pr_data, pr_shots = "all", pr_feature = "bottleneck";
  std::string pr_out, pr_cfg, pr_probe_out;
  int pr_repeats = 1;
  bool pr_head = false;
  double pr_ridge = 1e-3;
  uint64_t pr_seed = 0;
  probe->add_option("--ckpt", pr_ckpt, "checkpoint directory")->required();
  probe->add_option("--data", pr_data, "dataset directory")->required();
  probe->add_option("--shots", pr_shots, "calibration sample count or 'all'");
  probe->add_option("--repeats", pr_repeats, "repeat count for K-shot sampling");
  probe->add_flag("--head-pose", pr_head, "concatenate head pose to the features");
  probe->add_option("--feature", pr_feature, "bottleneck|prepool");
  probe->add_option("--ridge", pr_ridge, "ridge strength");
  probe->add_option("--seed", pr_seed, "calibration sampling seed");
  probe->add_option("--out", pr_out, "write the JSON report here");
  probe->add_option("--save-probe", pr_probe_out, "write fitted probe weights (JSON)");
  probe->add_option("--config", pr_cfg, "JSON config file");

  auto* dist =
      app.add_subcommand("distill", "distill the injection encoder into a convnet");
  PretrainFlags df;
  df.steps = 800;
  std::string di_teacher, di_student_cfg, di_out, di_cfg;
  dist->add_option("--teacher", di_teacher, "teacher checkpoint directory")->required();
  dist->add_option("--student-cfg", di_student_cfg, "student config JSON");
  dist->add_option("--data", df.data, "dataset directory")->required();
  dist->add_option("--steps", df.steps, "training steps");
  dist->add_option("--batch", df.batch, "batch size");
  dist->add_option("--seed", df.seed, "training seed");
  dist->add_option("--lr", df.lr, "peak learning rate");
  dist->add_option("--mask-ratio", df.mask_ratio, "total mask ratio");
  dist->add_option("--config", di_cfg, "JSON config file");
  dist->add_option("--out", di_out, "output directory");

  auto* red =
      app.add_subcommand("redirect", "redirect gaze through the injection vector");
  std::string rd_ckpt, rd_probe, rd_data, rd_out;
  int rd_idx = 0;
  double rd_dp = 0.0, rd_dy = 0.0;
  red->add_option("--ckpt", rd_ckpt, "checkpoint directory")->required();
  red->add_option("--probe", rd_probe, "probe weights JSON")->required();
  red->add_option("--data", rd_data, "dataset directory")->required();
  red->add_option("--image-idx", rd_idx, "sample index");
  red->add_option("--delta-pitch", rd_dp, "pitch shift in radians");
  red->add_option("--delta-yaw", rd_dy, "yaw shift in radians");
  red->add_option("--out", rd_out, "output directory")->required();

  auto* aud = app.add_subcommand("audit", "check the two-branch gradient identity");
  std::string au_ckpt, au_data, au_mode = "emib";
  int au_batch = 8;
  double au_lambda = -1.0;
  aud->add_option("--ckpt", au_ckpt, "checkpoint directory")->required();
  aud->add_option("--data", au_data, "dataset directory")->required();
  aud->add_option("--batch", au_batch, "samples to audit");
  aud->add_option("--mode", au_mode, "emib|ae|mae|mae-single");
  aud->add_option("--lambda", au_lambda, "contrastive weight override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth)
      return cmd_synth(*synth, sy_count, sy_out, sy_seed, sy_image, sy_subjects,
                       sy_frac, sy_cfg);
    if (*pre) return cmd_pretrain(*pre, pf);
    if (*probe)
      return cmd_probe(*probe, pr_ckpt, pr_data, pr_shots, pr_repeats, pr_head,
                       pr_feature, pr_ridge, pr_seed, pr_out, pr_cfg, pr_probe_out);
    if (*dist) return cmd_distill(*dist, di_teacher, di_student_cfg, di_out, di_cfg, df);
    if (*red)
      return cmd_redirect(rd_ckpt, rd_probe, rd_data, rd_idx, rd_dp, rd_dy, rd_out);
    if (*aud) return cmd_audit(au_ckpt, au_data, au_batch, au_mode, au_lambda);
  } catch (const emib::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::domain_error& e) {
    std::cerr << "domain error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const emib::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const emib::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
