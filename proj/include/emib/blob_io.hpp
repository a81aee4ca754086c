#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "emib/common.hpp"

namespace emib {

/// CRC-32 (IEEE, reflected), used for blob integrity and PNG chunks.
uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed = 0);

/// Raw little-endian float32 blob, C row-major. One file per named tensor.
void write_f32_blob(const std::filesystem::path& path, std::span<const float> data);

/// Reads a blob and checks its element count; throws IoError naming the file
/// on size mismatch or read failure.
std::vector<float> read_f32_blob(const std::filesystem::path& path,
                                 size_t expected_count);

uint32_t crc32_of_floats(std::span<const float> data);

}  // namespace emib
