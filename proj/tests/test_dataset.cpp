#include <fstream>
#include <set>

#include "doctest.h"
#include "emib/blob_io.hpp"
#include "emib/dataset.hpp"
#include "support/test_helpers.hpp"

using namespace emib;
using testsupport::TempDir;

namespace {
SynthParams tiny_params() {
  SynthParams p;
  p.n_subjects = 10;
  return p;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}
}  // namespace

TEST_SUITE_BEGIN("dataset");

TEST_CASE("splits are subject-disjoint") {
  TempDir dir("split");
  const DatasetManifest m = generate_dataset(100, tiny_params(), 1, dir.path());
  CHECK(m.train_ids.size() == 80);
  CHECK(m.test_ids.size() == 20);
  const Dataset d = Dataset::load(dir.path() / "manifest.json");
  std::set<int> train_subjects, test_subjects;
  for (int i : d.train_ids()) train_subjects.insert(d.subject(i));
  for (int i : d.test_ids()) test_subjects.insert(d.subject(i));
  for (int s : train_subjects) REQUIRE(test_subjects.count(s) == 0);
}

TEST_CASE("subject disjointness holds across seeds") {
  for (uint64_t seed : {2u, 3u, 4u, 5u}) {
    TempDir dir("seeds");
    SynthParams p = tiny_params();
    p.n_subjects = 7;
    generate_dataset(35, p, seed, dir.path());
    const Dataset d = Dataset::load(dir.path() / "manifest.json");
    std::set<int> test_subjects;
    for (int i : d.test_ids()) test_subjects.insert(d.subject(i));
    for (int i : d.train_ids()) REQUIRE(test_subjects.count(d.subject(i)) == 0);
  }
}

TEST_CASE("load preserves every field") {
  TempDir dir("roundtrip");
  const SynthParams params = tiny_params();
  generate_dataset(40, params, 9, dir.path());
  const Dataset d = Dataset::load(dir.path() / "manifest.json");
  REQUIRE(d.count() == 40);
  const Rng base(9);
  for (int i = 0; i < d.count(); ++i) {
    Rng r = base.stream(rng_stream::kLabels, static_cast<uint64_t>(i));
    const LabelDraw want = sample_labels(params, r);
    REQUIRE(d.gaze(i).pitch == static_cast<float>(want.gaze.pitch));
    REQUIRE(d.gaze(i).yaw == static_cast<float>(want.gaze.yaw));
    REQUIRE(d.head(i).pitch == static_cast<float>(want.head.pitch));
    REQUIRE(d.subject(i) == i % 10);
    const uint64_t style =
        Rng(9).stream(rng_stream::kStyle, static_cast<uint64_t>(i % 10)).key();
    const uint64_t nuisance =
        Rng(9).stream(rng_stream::kLighting, static_cast<uint64_t>(i)).key();
    const FaceSample rendered =
        render_sample(want.gaze, want.head, style, params, nuisance);
    REQUIRE(d.image(i).data == rendered.image.data);
    for (int c = 0; c < 4; ++c) {
      REQUIRE(d.corners(i)[static_cast<size_t>(c)].x ==
              static_cast<float>(rendered.corners[static_cast<size_t>(c)].x));
    }
  }
}

TEST_CASE("regeneration with the same seed is byte-identical") {
  TempDir a("bytes_a"), b("bytes_b");
  generate_dataset(30, tiny_params(), 4, a.path());
  generate_dataset(30, tiny_params(), 4, b.path());
  for (const char* name :
       {"manifest.json", "images.f32", "corners.f32", "gaze.f32", "head.f32",
        "subject.f32"}) {
    REQUIRE(slurp(a.path() / name) == slurp(b.path() / name));
  }
}

TEST_CASE("truncated blob fails the load with the blob named") {
  TempDir dir("trunc");
  generate_dataset(20, tiny_params(), 5, dir.path());
  std::filesystem::resize_file(dir.path() / "gaze.f32", 17);
  try {
    Dataset::load(dir.path() / "manifest.json");
    FAIL("expected an IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("gaze") != std::string::npos);
  }
}

TEST_CASE("corrupted blob fails the checksum") {
  TempDir dir("crc");
  generate_dataset(20, tiny_params(), 6, dir.path());
  {
    std::fstream f(dir.path() / "images.f32",
                   std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(100);
    const char garbage = 0x5a;
    f.write(&garbage, 1);
  }
  CHECK_THROWS_AS(Dataset::load(dir.path() / "manifest.json"), IoError);
}

TEST_CASE("too few samples per subject is a config error") {
  TempDir dir("few");
  CHECK_THROWS_AS(generate_dataset(1, tiny_params(), 7, dir.path()), ConfigError);
}

TEST_CASE("seeded shuffle is a reproducible permutation") {
  const std::vector<int> ids = {1, 2, 3, 5, 8, 13, 21, 34};
  const std::vector<int> a = Dataset::shuffled(ids, 42);
  const std::vector<int> b = Dataset::shuffled(ids, 42);
  const std::vector<int> c = Dataset::shuffled(ids, 43);
  CHECK(a == b);
  CHECK(a != ids);
  CHECK(a != c);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == ids);
}

TEST_CASE("blob io size checks") {
  TempDir dir("blob");
  const std::vector<float> data = {1.0f, 2.0f, 3.0f};
  write_f32_blob(dir.path() / "t.f32", data);
  CHECK(read_f32_blob(dir.path() / "t.f32", 3) == data);
  CHECK_THROWS_AS(read_f32_blob(dir.path() / "t.f32", 4), IoError);
  CHECK_THROWS_AS(read_f32_blob(dir.path() / "missing.f32", 3), IoError);
}

TEST_SUITE_END();
