#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "emib/model.hpp"
#include "emib/student.hpp"

namespace emib {

/// Optimizer/progress state carried alongside the weights so a run can resume
/// bitwise-identically. The rng needs no serialized stream state: draws are
/// derived from (seed, step), both stored here.
struct TrainProgress {
  std::vector<float> adam_m, adam_v;
  int64_t adam_t = 0;
  int step = 0;
  int total_steps = 0;
  uint64_t seed = 0;
  std::string train_config_json;  // echo of the resolved config
};

/// Checkpoint directory: manifest.json plus one .f32 blob per named tensor
/// (the dataset blob format). Optimizer moments ride along as opt.m / opt.v.
void save_checkpoint(const EmibModel& model, const std::filesystem::path& dir,
                     const TrainProgress* progress = nullptr);

/// Rebuilds the model from the stored config and tensors. Shape, name, crc or
/// version mismatches throw IoError.
std::unique_ptr<EmibModel> load_checkpoint(const std::filesystem::path& dir,
                                           TrainProgress* progress = nullptr);

void save_student_checkpoint(const StudentModel& student,
                             const std::filesystem::path& dir,
                             const TrainProgress* progress = nullptr);
std::unique_ptr<StudentModel> load_student_checkpoint(const std::filesystem::path& dir,
                                                      TrainProgress* progress = nullptr);

/// "emib" or "student", without loading tensors.
std::string checkpoint_kind(const std::filesystem::path& dir);

}  // namespace emib
