#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>

#include "emib/common.hpp"
#include "emib/rng.hpp"

namespace emib::testsupport {

/// Unique scratch directory under the system temp root, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("emib_test_" + tag + "_" + std::to_string(++counter) + "_" +
             std::to_string(static_cast<unsigned>(getpid())));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline Matrix random_matrix(int rows, int cols, uint64_t seed, double lo = -1.0,
                            double hi = 1.0) {
  Matrix m(rows, cols);
  Rng rng(seed);
  for (auto& v : m.data) v = static_cast<float>(rng.uniform(lo, hi));
  return m;
}

inline Matrix random_image(int size, uint64_t seed) {
  return random_matrix(size, size * 3, seed, 0.0, 1.0);
}

}  // namespace emib::testsupport
