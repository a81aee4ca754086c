#include "emib/png.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "emib/blob_io.hpp"

namespace emib {

namespace {

void put_u32_be(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

void write_chunk(std::ofstream& out, const char type[4],
                 const std::vector<uint8_t>& data) {
  std::vector<uint8_t> buf;
  put_u32_be(buf, static_cast<uint32_t>(data.size()));
  buf.insert(buf.end(), type, type + 4);
  buf.insert(buf.end(), data.begin(), data.end());
  const uint32_t crc = crc32(buf.data() + 4, buf.size() - 4);
  put_u32_be(buf, crc);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
}

uint32_t adler32(const std::vector<uint8_t>& data) {
  uint32_t a = 1, b = 0;
  for (uint8_t byte : data) {
    a = (a + byte) % 65521u;
    b = (b + a) % 65521u;
  }
  return (b << 16) | a;
}

// zlib stream made of stored (uncompressed) deflate blocks
std::vector<uint8_t> zlib_stored(const std::vector<uint8_t>& raw) {
  std::vector<uint8_t> out;
  out.push_back(0x78);
  out.push_back(0x01);
  size_t pos = 0;
  do {
    const size_t len = std::min<size_t>(65535, raw.size() - pos);
    const bool last = pos + len == raw.size();
    out.push_back(last ? 1 : 0);
    out.push_back(static_cast<uint8_t>(len & 0xff));
    out.push_back(static_cast<uint8_t>(len >> 8));
    out.push_back(static_cast<uint8_t>(~len & 0xff));
    out.push_back(static_cast<uint8_t>((~len >> 8) & 0xff));
    out.insert(out.end(), raw.begin() + static_cast<ptrdiff_t>(pos),
               raw.begin() + static_cast<ptrdiff_t>(pos + len));
    pos += len;
  } while (pos < raw.size());
  const uint32_t ad = adler32(raw);
  put_u32_be(out, ad);
  return out;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Matrix& image_hwc,
               int upscale) {
  if (image_hwc.cols % 3 != 0) throw ConfigError("write_png: not an RGB image matrix");
  if (upscale < 1) throw ConfigError("write_png: upscale must be >= 1");
  const int h = image_hwc.rows * upscale;
  const int w = image_hwc.cols / 3 * upscale;

  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * 3));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    const float* src = image_hwc.row(y / upscale);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = src[static_cast<size_t>(x / upscale) * 3 + c];
        raw.push_back(static_cast<uint8_t>(
            std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
      }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write png: " + path.string());
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  out.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(w));
  put_u32_be(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  write_chunk(out, "IHDR", ihdr);
  write_chunk(out, "IDAT", zlib_stored(raw));
  write_chunk(out, "IEND", {});
  if (!out) throw IoError("png write failed: " + path.string());
}

Matrix make_panel(const std::vector<Matrix>& images) {
  if (images.empty()) throw ConfigError("make_panel: no images");
  const int h = images[0].rows;
  int w_total = 0;
  for (const auto& im : images) {
    if (im.rows != h) throw ConfigError("make_panel: image heights differ");
    w_total += im.cols / 3;
  }
  w_total += 2 * (static_cast<int>(images.size()) - 1);
  Matrix panel(h, w_total * 3, 1.0f);
  int x0 = 0;
  for (const auto& im : images) {
    const int w = im.cols / 3;
    for (int y = 0; y < h; ++y)
      std::copy(im.row(y), im.row(y) + static_cast<size_t>(w) * 3,
                panel.row(y) + static_cast<size_t>(x0) * 3);
    x0 += w + 2;
  }
  return panel;
}

}  // namespace emib
