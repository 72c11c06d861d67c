#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sslecho/data.hpp"

namespace sslecho {

// (width, height) from the PNG header without decoding pixels.
std::pair<std::size_t, std::size_t> read_png_dims(const std::string& path);

// Decodes 8/16-bit gray, gray+alpha, RGB or RGBA; alpha is dropped. Values are
// scaled to [0, 1]. Throws FormatError on undecodable content.
PixelGrid read_png(const std::string& path);

// 8-bit PNG with 1 (gray) or 3 (RGB) interleaved channels.
void write_png(const std::string& path, std::size_t width, std::size_t height, std::size_t channels,
               const std::vector<std::uint8_t>& pixels);

}  // namespace sslecho
