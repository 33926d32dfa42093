#pragma once

#include "shdl/grid.hpp"

#include <filesystem>

namespace shdl {

/// 8-bit grayscale PNG. Values are clamped to [0, 255] and rounded on write;
/// read returns the raw 0..255 levels as doubles.
void write_png_gray8(const std::filesystem::path& path, const Grid& pixels);
Grid read_png_gray8(const std::filesystem::path& path);

/// Quantize to the 8-bit levels write_png_gray8 would store.
Grid quantize_gray8(const Grid& pixels);

}  // namespace shdl
