#include "emib/blob_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace emib {

static_assert(std::endian::native == std::endian::little,
              "blob format is little-endian; big-endian hosts need byte swaps");

namespace {
std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> t{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    t[i] = c;
  }
  return t;
}
}  // namespace

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed) {
  static const std::array<uint32_t, 256> table = make_crc_table();
  uint32_t c = seed ^ 0xffffffffu;
  for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

uint32_t crc32_of_floats(std::span<const float> data) {
  return crc32(reinterpret_cast<const uint8_t*>(data.data()),
               data.size() * sizeof(float));
}

void write_f32_blob(const std::filesystem::path& path, std::span<const float> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open blob for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw IoError("write failed for blob: " + path.string());
}

std::vector<float> read_f32_blob(const std::filesystem::path& path,
                                 size_t expected_count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open blob: " + path.string());
  const auto bytes = static_cast<size_t>(in.tellg());
  if (bytes != expected_count * sizeof(float))
    throw IoError("blob " + path.string() + " has " + std::to_string(bytes) +
                  " bytes, expected " + std::to_string(expected_count * sizeof(float)));
  in.seekg(0);
  std::vector<float> data(expected_count);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("read failed for blob: " + path.string());
  return data;
}

}  // namespace emib
