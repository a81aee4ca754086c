#include "emib/dataset.hpp"

#include <fstream>

#include "emib/blob_io.hpp"
#include "json.hpp"

namespace emib {

namespace {
using nlohmann::json;

json params_to_json(const SynthParams& p) {
  return json{{"image_size", p.image_size},
              {"gaze_range", p.gaze_range},
              {"head_range", p.head_range},
              {"iris_gain", p.iris_gain},
              {"n_subjects", p.n_subjects},
              {"train_fraction", p.train_fraction},
              {"eye_scale_lo", p.eye_scale_lo},
              {"eye_scale_hi", p.eye_scale_hi},
              {"noise_lo", p.noise_lo},
              {"noise_hi", p.noise_hi}};
}

SynthParams params_from_json(const json& j) {
  SynthParams p;
  p.image_size = j.at("image_size").get<int>();
  p.gaze_range = j.at("gaze_range").get<double>();
  p.head_range = j.at("head_range").get<double>();
  p.iris_gain = j.at("iris_gain").get<double>();
  p.n_subjects = j.at("n_subjects").get<int>();
  p.train_fraction = j.at("train_fraction").get<double>();
  p.eye_scale_lo = j.at("eye_scale_lo").get<double>();
  p.eye_scale_hi = j.at("eye_scale_hi").get<double>();
  p.noise_lo = j.at("noise_lo").get<double>();
  p.noise_hi = j.at("noise_hi").get<double>();
  return p;
}

size_t shape_count(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}
}  // namespace

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  json j;
  j["format"] = "emib-dataset";
  j["version"] = 1;
  j["count"] = m.count;
  j["image_size"] = m.image_size;
  j["n_subjects"] = m.n_subjects;
  j["seed"] = m.seed;
  j["params"] = params_to_json(m.params);
  j["train_ids"] = m.train_ids;
  j["test_ids"] = m.test_ids;
  j["blobs"] = json::array();
  for (const auto& b : m.blobs)
    j["blobs"].push_back(
        {{"name", b.name}, {"shape", b.shape}, {"dtype", b.dtype}, {"crc32", b.crc}});
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("manifest write failed: " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("manifest parse error in " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "emib-dataset")
    throw IoError("not a dataset manifest: " + path.string());
  DatasetManifest m;
  m.count = j.at("count").get<int>();
  m.image_size = j.at("image_size").get<int>();
  m.n_subjects = j.at("n_subjects").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  m.params = params_from_json(j.at("params"));
  m.train_ids = j.at("train_ids").get<std::vector<int>>();
  m.test_ids = j.at("test_ids").get<std::vector<int>>();
  for (const auto& b : j.at("blobs")) {
    DatasetManifest::BlobInfo info;
    info.name = b.at("name").get<std::string>();
    info.shape = b.at("shape").get<std::vector<int>>();
    info.dtype = b.at("dtype").get<std::string>();
    info.crc = b.at("crc32").get<uint32_t>();
    m.blobs.push_back(info);
  }
  return m;
}

DatasetManifest generate_dataset(int n, const SynthParams& params, uint64_t seed,
                                 const std::filesystem::path& out_dir) {
  params.validate();
  if (n < params.n_subjects)
    throw ConfigError("generate_dataset: need at least one sample per subject");

  std::filesystem::create_directories(out_dir);

  const int S = params.image_size;
  std::vector<float> images(static_cast<size_t>(n) * S * S * 3);
  std::vector<float> corners(static_cast<size_t>(n) * 8);
  std::vector<float> gaze(static_cast<size_t>(n) * 2);
  std::vector<float> head(static_cast<size_t>(n) * 2);
  std::vector<float> subject(static_cast<size_t>(n));

  const Rng base(seed);
  for (int i = 0; i < n; ++i) {
    Rng r = base.stream(rng_stream::kLabels, static_cast<uint64_t>(i));
    const LabelDraw d = sample_labels(params, r);
    const int subj = i % params.n_subjects;
    const uint64_t style_seed =
        Rng(seed).stream(rng_stream::kStyle, static_cast<uint64_t>(subj)).key();
    const uint64_t nuisance_seed =
        Rng(seed).stream(rng_stream::kLighting, static_cast<uint64_t>(i)).key();
    const FaceSample s = render_sample(d.gaze, d.head, style_seed, params, nuisance_seed);
    std::copy(s.image.data.begin(), s.image.data.end(),
              images.begin() + static_cast<size_t>(i) * S * S * 3);
    for (int c = 0; c < 4; ++c) {
      corners[static_cast<size_t>(i) * 8 + c * 2] = static_cast<float>(s.corners[c].x);
      corners[static_cast<size_t>(i) * 8 + c * 2 + 1] = static_cast<float>(s.corners[c].y);
    }
    gaze[static_cast<size_t>(i) * 2] = static_cast<float>(d.gaze.pitch);
    gaze[static_cast<size_t>(i) * 2 + 1] = static_cast<float>(d.gaze.yaw);
    head[static_cast<size_t>(i) * 2] = static_cast<float>(d.head.pitch);
    head[static_cast<size_t>(i) * 2 + 1] = static_cast<float>(d.head.yaw);
    subject[static_cast<size_t>(i)] = static_cast<float>(subj);
  }

  // cross-person protocol: the last ceil(n_subjects * (1 - train_fraction))
  // subjects form the test split
  const int test_subjects = std::max(
      1, static_cast<int>(std::ceil(params.n_subjects * (1.0 - params.train_fraction))));
  if (test_subjects >= params.n_subjects)
    throw ConfigError("generate_dataset: split leaves no training subjects");
  DatasetManifest m;
  m.count = n;
  m.image_size = S;
  m.n_subjects = params.n_subjects;
  m.seed = seed;
  m.params = params;
  for (int i = 0; i < n; ++i) {
    if (i % params.n_subjects >= params.n_subjects - test_subjects)
      m.test_ids.push_back(i);
    else
      m.train_ids.push_back(i);
  }

  auto add_blob = [&](const std::string& name, std::vector<int> shape,
                      std::span<const float> data) {
    DatasetManifest::BlobInfo b;
    b.name = name;
    b.shape = std::move(shape);
    b.crc = crc32_of_floats(data);
    m.blobs.push_back(b);
    write_f32_blob(out_dir / (name + ".f32"), data);
  };
  add_blob("images", {n, S, S, 3}, images);
  add_blob("corners", {n, 4, 2}, corners);
  add_blob("gaze", {n, 2}, gaze);
  add_blob("head", {n, 2}, head);
  add_blob("subject", {n}, subject);

  save_manifest(m, out_dir / "manifest.json");
  return m;
}

Dataset Dataset::load(const std::filesystem::path& manifest_path) {
  Dataset d;
  d.manifest_ = load_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  auto read = [&](const std::string& name) {
    for (const auto& b : d.manifest_.blobs) {
      if (b.name != name) continue;
      if (b.dtype != "f32")
        throw IoError("blob " + name + ": unsupported dtype " + b.dtype);
      auto data = read_f32_blob(dir / (name + ".f32"), shape_count(b.shape));
      if (crc32_of_floats(data) != b.crc)
        throw IoError("blob " + name + ": checksum mismatch");
      return data;
    }
    throw IoError("manifest lists no blob named " + name);
  };
  d.images_ = read("images");
  d.corners_ = read("corners");
  d.gaze_ = read("gaze");
  d.head_ = read("head");
  d.subject_ = read("subject");
  for (int id : d.manifest_.train_ids)
    for (int jd : d.manifest_.test_ids)
      if (id == jd) throw IoError("dataset splits overlap");
  return d;
}

const float* Dataset::image_ptr(int i) const {
  const int S = manifest_.image_size;
  return images_.data() + static_cast<size_t>(i) * S * S * 3;
}

Matrix Dataset::image(int i) const {
  const int S = manifest_.image_size;
  Matrix m(S, S * 3);
  std::copy(image_ptr(i), image_ptr(i) + m.size(), m.data.begin());
  return m;
}

std::array<PixelPoint, 4> Dataset::corners(int i) const {
  std::array<PixelPoint, 4> c;
  for (int k = 0; k < 4; ++k) {
    c[static_cast<size_t>(k)].x = corners_[static_cast<size_t>(i) * 8 + k * 2];
    c[static_cast<size_t>(k)].y = corners_[static_cast<size_t>(i) * 8 + k * 2 + 1];
  }
  return c;
}

GazeDirection Dataset::gaze(int i) const {
  return {gaze_[static_cast<size_t>(i) * 2], gaze_[static_cast<size_t>(i) * 2 + 1]};
}

HeadPose Dataset::head(int i) const {
  return {head_[static_cast<size_t>(i) * 2], head_[static_cast<size_t>(i) * 2 + 1]};
}

int Dataset::subject(int i) const {
  return static_cast<int>(subject_[static_cast<size_t>(i)]);
}

FaceSample Dataset::sample(int i) const {
  FaceSample s;
  s.image = image(i);
  s.corners = corners(i);
  s.gaze = gaze(i);
  s.head = head(i);
  s.subject_id = subject(i);
  return s;
}

std::vector<int> Dataset::shuffled(const std::vector<int>& ids, uint64_t seed) {
  std::vector<int> out = ids;
  Rng r = Rng(seed).stream(rng_stream::kShuffle);
  for (size_t i = out.size(); i > 1; --i)
    std::swap(out[i - 1], out[static_cast<size_t>(r.uniform_int(i))]);
  return out;
}

}  // namespace emib
