#include "sslecho/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>

#include "sslecho/error.hpp"

namespace sslecho {
namespace {

struct ImageGuard {
  png_image image;
  ImageGuard() {
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
  }
  ~ImageGuard() { png_image_free(&image); }
};

void begin_read(ImageGuard& g, const std::string& path) {
  if (png_image_begin_read_from_file(&g.image, path.c_str()) == 0) {
    throw FormatError("cannot decode PNG '" + path + "': " + g.image.message);
  }
}

}  // namespace

std::pair<std::size_t, std::size_t> read_png_dims(const std::string& path) {
  ImageGuard g;
  begin_read(g, path);
  return {g.image.width, g.image.height};
}

PixelGrid read_png(const std::string& path) {
  ImageGuard g;
  begin_read(g, path);
  const bool color = (g.image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  g.image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  PixelGrid grid;
  grid.width = g.image.width;
  grid.height = g.image.height;
  grid.channels = color ? 3 : 1;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(g.image));
  if (png_image_finish_read(&g.image, nullptr, buffer.data(), 0, nullptr) == 0) {
    throw FormatError("cannot decode PNG '" + path + "': " + g.image.message);
  }
  grid.values.resize(buffer.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) grid.values[i] = buffer[i] / 255.0;
  return grid;
}

void write_png(const std::string& path, std::size_t width, std::size_t height, std::size_t channels,
               const std::vector<std::uint8_t>& pixels) {
  if (channels != 1 && channels != 3) throw ContractError("write_png: channels must be 1 or 3");
  if (pixels.size() != width * height * channels) throw DimensionError("write_png: buffer size mismatch");
  ImageGuard g;
  g.image.width = static_cast<png_uint_32>(width);
  g.image.height = static_cast<png_uint_32>(height);
  g.image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (png_image_write_to_file(&g.image, path.c_str(), 0, pixels.data(), 0, nullptr) == 0) {
    throw IoError("cannot write PNG '" + path + "': " + g.image.message);
  }
}

}  // namespace sslecho
