#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "emib/checkpoint.hpp"
#include "emib/dataset.hpp"
#include "emib/losses.hpp"
#include "emib/model.hpp"
#include "emib/student.hpp"

namespace emib {

enum class TrainMode { Emib, Ae, Mae, MaeSingle };
const char* train_mode_name(TrainMode m);
TrainMode parse_train_mode(const std::string& s);

struct TrainConfig {
  int steps = 2000;
  int batch = 16;
  float lr = 1.5e-4f;
  float weight_decay = 0.05f;
  double warmup_frac = 0.05;
  bool cosine_decay = true;  // false: hold the peak rate after warmup
  uint64_t seed = 0;
  TrainMode mode = TrainMode::Emib;
  double mask_ratio = 0.75;
  LossConfig loss;
  int eval_every = 0;   // 0 disables periodic probe logging
  int log_every = 10;
  int train_until = 0;  // stop after this step (0 = steps); schedule stays on `steps`
  std::optional<std::filesystem::path> init_from;  // checkpoint-load hook (resume)

  bool injection_enabled() const {
    return mode == TrainMode::Emib || mode == TrainMode::Ae;
  }
  /// Enforces mode-consistent masking (ae implies ratio 1.0; the mae variants
  /// run without injection and reconstruct every masked patch).
  void validate() const;
  std::string to_json() const;
};

struct StepLog {
  int step = 0;
  double l_rec = 0;
  double l_contr = 0;
  double lr = 0;
  std::optional<double> probe_error_deg;
};

struct TrainResult {
  std::unique_ptr<EmibModel> model;
  std::vector<StepLog> log;
  bool diverged = false;
  int final_step = 0;
  std::filesystem::path checkpoint_dir;
};

/// Pre-training loop. Writes `checkpoint/` and `train_log.jsonl` under
/// out_dir. On divergence (non-finite loss) the last good snapshot is written
/// instead and `diverged` is set.
TrainResult pretrain(const Dataset& data, const ModelConfig& model_cfg,
                     const TrainConfig& cfg, const std::filesystem::path& out_dir);

struct GradientAuditReport {
  // Eq-style branch split: the combined encoder gradient must equal the sum
  // of the two single-branch gradients obtained by freezing the other
  // branch's encoder output.
  double max_rel_deviation = 0;
  double grad_scale = 0;  // max |combined| over encoder parameters
  struct Group {
    std::string name;
    double rel_deviation;
  };
  std::vector<Group> groups;  // per encoder tensor

  std::string to_json() const;
};

/// Three-pass audit on one batch: combined backward, reconstruction-only
/// (injection encoder output frozen), injection-only (reconstruction encoder
/// output frozen). Deviations are relative to the combined gradient max-norm.
GradientAuditReport gradient_audit(const EmibModel& model, const Dataset& data,
                                   std::span<const int> sample_ids,
                                   const TrainConfig& cfg);

struct DistillResult {
  std::unique_ptr<StudentModel> student;
  std::vector<StepLog> log;  // l_rec = reconstruction, l_contr slot reused for distill loss
  bool diverged = false;
  std::filesystem::path checkpoint_dir;
};

/// Distills the frozen teacher's injection feature into a convolutional
/// student that replaces the full-face branch as the injection source, while
/// the reconstruction encoder/decoder keep fine-tuning on the shared loss.
/// The distillation weight follows the linear schedule in cfg.loss.distill.
DistillResult distill_train(const EmibModel& teacher, const StudentConfig& student_cfg,
                            const Dataset& data, const TrainConfig& cfg,
                            const std::filesystem::path& out_dir);

}  // namespace emib
