#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "emib/synth.hpp"

namespace emib {

/// Directory layout: manifest.json plus one .f32 blob per named tensor
/// (images, corners, gaze, head, subject). Splits are by subject so the
/// cross-person protocol holds for every seed.
struct DatasetManifest {
  int count = 0;
  int image_size = 0;
  int n_subjects = 0;
  uint64_t seed = 0;
  SynthParams params;
  std::vector<int> train_ids;
  std::vector<int> test_ids;

  struct BlobInfo {
    std::string name;
    std::vector<int> shape;
    std::string dtype = "f32";
    uint32_t crc = 0;
  };
  std::vector<BlobInfo> blobs;
};

/// Renders n samples with uniform labels and subject-disjoint splits, and
/// writes manifest + blobs. Returns the manifest.
DatasetManifest generate_dataset(int n, const SynthParams& params, uint64_t seed,
                                 const std::filesystem::path& out_dir);

/// In-memory dataset, validated against its manifest at load time (shape,
/// dtype and checksum per blob; a truncated or corrupt blob fails the load).
class Dataset {
 public:
  static Dataset load(const std::filesystem::path& manifest_path);

  int count() const { return manifest_.count; }
  int image_size() const { return manifest_.image_size; }
  const DatasetManifest& manifest() const { return manifest_; }
  const std::vector<int>& train_ids() const { return manifest_.train_ids; }
  const std::vector<int>& test_ids() const { return manifest_.test_ids; }

  const float* image_ptr(int i) const;
  Matrix image(int i) const;
  std::array<PixelPoint, 4> corners(int i) const;
  GazeDirection gaze(int i) const;
  HeadPose head(int i) const;
  int subject(int i) const;
  FaceSample sample(int i) const;

  /// Seeded permutation of an id list; reproducible from the seed.
  static std::vector<int> shuffled(const std::vector<int>& ids, uint64_t seed);

 private:
  DatasetManifest manifest_;
  std::vector<float> images_, corners_, gaze_, head_, subject_;
};

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

}  // namespace emib
