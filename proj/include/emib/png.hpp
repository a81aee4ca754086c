#pragma once

#include <filesystem>
#include <vector>

#include "emib/common.hpp"

namespace emib {

/// 8-bit RGB PNG writer (stored deflate blocks, no compression).
void write_png(const std::filesystem::path& path, const Matrix& image_hwc,
               int upscale = 1);

/// Horizontal side-by-side panel with a 2 px divider.
Matrix make_panel(const std::vector<Matrix>& images);

}  // namespace emib
