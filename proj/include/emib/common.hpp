#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace emib {

// Error taxonomy shared by the library and the CLI exit-code contract:
// config/usage/domain problems, I/O failures, and numerical failures
// (divergence, singular systems) are distinguishable by type.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Dense row-major float matrix. The only tensor rank the pipeline needs is 2;
/// images and feature maps carry their spatial dims separately.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(int r, int c, float fill = 0.0f)
      : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  float* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const float* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  size_t size() const { return data.size(); }
};

inline Matrix gather_rows(const Matrix& m, const std::vector<int>& idx) {
  Matrix out(static_cast<int>(idx.size()), m.cols);
  for (size_t r = 0; r < idx.size(); ++r) {
    const float* src = m.row(idx[r]);
    std::copy(src, src + m.cols, out.row(static_cast<int>(r)));
  }
  return out;
}

}  // namespace emib
