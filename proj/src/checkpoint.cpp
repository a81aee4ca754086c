#include "emib/checkpoint.hpp"

#include <fstream>

#include "emib/blob_io.hpp"
#include "json.hpp"

namespace emib {

namespace {
using nlohmann::json;

constexpr int kVersion = 1;

json tensor_list(const nn::ParamStore& ps) {
  json arr = json::array();
  for (int id = 0; id < ps.count(); ++id) {
    const auto& info = ps.info(id);
    arr.push_back({{"name", info.name},
                   {"shape", {info.rows, info.cols}},
                   {"dtype", "f32"},
                   {"crc32", crc32_of_floats(ps.values(id))}});
  }
  return arr;
}

void write_tensors(const nn::ParamStore& ps, const std::filesystem::path& dir) {
  for (int id = 0; id < ps.count(); ++id)
    write_f32_blob(dir / (ps.info(id).name + ".f32"), ps.values(id));
}

void read_tensors(nn::ParamStore& ps, const json& tensors,
                  const std::filesystem::path& dir) {
  if (static_cast<int>(tensors.size()) != ps.count())
    throw IoError("checkpoint: tensor count mismatch");
  for (const auto& t : tensors) {
    const std::string name = t.at("name").get<std::string>();
    const int id = ps.find(name);
    if (id < 0) throw IoError("checkpoint: unknown tensor " + name);
    const auto& info = ps.info(id);
    const auto shape = t.at("shape").get<std::vector<int>>();
    if (shape.size() != 2 || shape[0] != info.rows || shape[1] != info.cols)
      throw IoError("checkpoint: shape mismatch for tensor " + name);
    auto data = read_f32_blob(dir / (name + ".f32"),
                              static_cast<size_t>(info.rows) * info.cols);
    if (crc32_of_floats(data) != t.at("crc32").get<uint32_t>())
      throw IoError("checkpoint: checksum mismatch for tensor " + name);
    std::copy(data.begin(), data.end(), ps.values(id).begin());
  }
}

json progress_to_json(const TrainProgress& p, const std::filesystem::path& dir) {
  write_f32_blob(dir / "opt.m.f32", p.adam_m);
  write_f32_blob(dir / "opt.v.f32", p.adam_v);
  json j;
  j["adam_t"] = p.adam_t;
  j["step"] = p.step;
  j["total_steps"] = p.total_steps;
  j["seed"] = p.seed;
  j["opt_m_crc32"] = crc32_of_floats(p.adam_m);
  j["opt_v_crc32"] = crc32_of_floats(p.adam_v);
  if (!p.train_config_json.empty())
    j["train_config"] = json::parse(p.train_config_json);
  return j;
}

void progress_from_json(const json& j, const std::filesystem::path& dir,
                        size_t n_params, TrainProgress* p) {
  p->adam_t = j.at("adam_t").get<int64_t>();
  p->step = j.at("step").get<int>();
  p->total_steps = j.at("total_steps").get<int>();
  p->seed = j.at("seed").get<uint64_t>();
  p->adam_m = read_f32_blob(dir / "opt.m.f32", n_params);
  p->adam_v = read_f32_blob(dir / "opt.v.f32", n_params);
  if (crc32_of_floats(p->adam_m) != j.at("opt_m_crc32").get<uint32_t>() ||
      crc32_of_floats(p->adam_v) != j.at("opt_v_crc32").get<uint32_t>())
    throw IoError("checkpoint: optimizer state checksum mismatch");
  if (j.contains("train_config")) p->train_config_json = j["train_config"].dump();
}

json load_manifest_json(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open checkpoint manifest in " + dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("checkpoint manifest parse error: " + std::string(e.what()));
  }
  if (j.value("format", "") != "emib-checkpoint")
    throw IoError("not a checkpoint directory: " + dir.string());
  if (j.value("version", -1) != kVersion)
    throw IoError("unsupported checkpoint version in " + dir.string());
  return j;
}
}  // namespace

void save_checkpoint(const EmibModel& model, const std::filesystem::path& dir,
                     const TrainProgress* progress) {
  std::filesystem::create_directories(dir);
  const ModelConfig& c = model.config();
  json j;
  j["format"] = "emib-checkpoint";
  j["version"] = kVersion;
  j["kind"] = "emib";
  j["model"] = {{"image_size", c.grid.image_size},
                {"patch_size", c.grid.patch_size},
                {"enc_depth", c.encoder.depth},
                {"enc_dim", c.encoder.dim},
                {"enc_heads", c.encoder.heads},
                {"dec_depth", c.decoder.depth},
                {"dec_dim", c.decoder.dim},
                {"dec_heads", c.decoder.heads},
                {"z_dim", c.bottleneck.z_dim},
                {"eye_window_rows", c.eye_window_rows},
                {"eye_window_cols", c.eye_window_cols}};
  j["tensors"] = tensor_list(model.params());
  write_tensors(model.params(), dir);
  if (progress) j["progress"] = progress_to_json(*progress, dir);
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint manifest in " + dir.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("checkpoint manifest write failed in " + dir.string());
}

std::unique_ptr<EmibModel> load_checkpoint(const std::filesystem::path& dir,
                                           TrainProgress* progress) {
  const json j = load_manifest_json(dir);
  if (j.value("kind", "") != "emib")
    throw IoError("checkpoint in " + dir.string() + " is not an emib model");
  const json& m = j.at("model");
  ModelConfig c;
  c.grid.image_size = m.at("image_size").get<int>();
  c.grid.patch_size = m.at("patch_size").get<int>();
  c.encoder = {m.at("enc_depth").get<int>(), m.at("enc_dim").get<int>(),
               m.at("enc_heads").get<int>()};
  c.decoder = {m.at("dec_depth").get<int>(), m.at("dec_dim").get<int>(),
               m.at("dec_heads").get<int>()};
  c.bottleneck.z_dim = m.at("z_dim").get<int>();
  c.eye_window_rows = m.at("eye_window_rows").get<int>();
  c.eye_window_cols = m.at("eye_window_cols").get<int>();
  auto model = std::make_unique<EmibModel>(c);
  read_tensors(model->params(), j.at("tensors"), dir);
  if (progress) {
    if (!j.contains("progress"))
      throw IoError("checkpoint has no training progress: " + dir.string());
    progress_from_json(j.at("progress"), dir, model->params().total_size(), progress);
  }
  return model;
}

void save_student_checkpoint(const StudentModel& student,
                             const std::filesystem::path& dir,
                             const TrainProgress* progress) {
  std::filesystem::create_directories(dir);
  const StudentConfig& c = student.config();
  json j;
  j["format"] = "emib-checkpoint";
  j["version"] = kVersion;
  j["kind"] = "student";
  j["student"] = {{"stage_widths", c.stage_widths},
                  {"blocks_per_stage", c.blocks_per_stage},
                  {"groups", c.groups},
                  {"z_dim", c.z_dim},
                  {"image_size", student.image_size()}};
  j["tensors"] = tensor_list(student.params());
  write_tensors(student.params(), dir);
  if (progress) j["progress"] = progress_to_json(*progress, dir);
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint manifest in " + dir.string());
  out << j.dump(2) << "\n";
}

std::unique_ptr<StudentModel> load_student_checkpoint(const std::filesystem::path& dir,
                                                      TrainProgress* progress) {
  const json j = load_manifest_json(dir);
  if (j.value("kind", "") != "student")
    throw IoError("checkpoint in " + dir.string() + " is not a student model");
  const json& s = j.at("student");
  StudentConfig c;
  c.stage_widths = s.at("stage_widths").get<std::vector<int>>();
  c.blocks_per_stage = s.at("blocks_per_stage").get<std::vector<int>>();
  c.groups = s.at("groups").get<int>();
  c.z_dim = s.at("z_dim").get<int>();
  auto student = std::make_unique<StudentModel>(c, s.at("image_size").get<int>());
  read_tensors(student->params(), j.at("tensors"), dir);
  if (progress) {
    if (!j.contains("progress"))
      throw IoError("checkpoint has no training progress: " + dir.string());
    progress_from_json(j.at("progress"), dir, student->params().total_size(), progress);
  }
  return student;
}

std::string checkpoint_kind(const std::filesystem::path& dir) {
  return load_manifest_json(dir).value("kind", "");
}

}  // namespace emib
