#include <algorithm>
#include <cmath>

#include "sslecho/data.hpp"
#include "sslecho/error.hpp"

namespace sslecho {

const DopplerList& default_doppler_dims() {
  static const DopplerList dims{{831, 323}, {901, 384}, {901, 390}, {704, 305},
                                {831, 421}, {901, 469}, {563, 294}};
  return dims;
}

bool is_doppler(std::size_t width, std::size_t height, const DopplerList& dims) {
  return std::find(dims.begin(), dims.end(), std::make_pair(width, height)) != dims.end();
}

std::vector<double> to_grayscale(const PixelGrid& raw) {
  if (raw.width == 0 || raw.height == 0 || raw.channels == 0) {
    throw FormatError("image has a zero dimension (" + std::to_string(raw.width) + "x" +
                      std::to_string(raw.height) + "x" + std::to_string(raw.channels) + ")");
  }
  const std::size_t n = raw.width * raw.height;
  if (raw.values.size() != n * raw.channels) {
    throw FormatError("image buffer holds " + std::to_string(raw.values.size()) + " values, expected " +
                      std::to_string(n * raw.channels));
  }
  std::vector<double> gray(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < raw.channels; ++c) s += raw.values[i * raw.channels + c];
    gray[i] = s / static_cast<double>(raw.channels);
  }
  return gray;
}

std::vector<double> pad_to_square(std::span<const double> gray, std::size_t width, std::size_t height,
                                  std::size_t* side) {
  if (width == 0 || height == 0) throw FormatError("pad_to_square: zero dimension");
  if (gray.size() != width * height) throw DimensionError("pad_to_square: buffer size mismatch");
  const std::size_t s = std::max(width, height);
  const std::size_t top = (s - height) / 2;
  const std::size_t left = (s - width) / 2;
  std::vector<double> out(s * s, 0.0);
  for (std::size_t y = 0; y < height; ++y)
    std::copy_n(gray.data() + y * width, width, out.data() + (y + top) * s + left);
  if (side != nullptr) *side = s;
  return out;
}

std::vector<double> resize_area(std::span<const double> square, std::size_t side, std::size_t target) {
  if (side == 0 || target == 0) throw FormatError("resize_area: zero dimension");
  if (square.size() != side * side) throw DimensionError("resize_area: buffer size mismatch");
  if (side == target) return {square.begin(), square.end()};
  // Each output pixel averages the source area it covers, with fractional
  // overlap weights along each axis (separable).
  const double scale = static_cast<double>(side) / static_cast<double>(target);
  std::vector<std::vector<std::pair<std::size_t, double>>> taps(target);
  for (std::size_t o = 0; o < target; ++o) {
    const double lo = o * scale;
    const double hi = (o + 1) * scale;
    for (auto i = static_cast<std::size_t>(std::floor(lo)); i < side && static_cast<double>(i) < hi; ++i) {
      const double w = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (w > 0.0) taps[o].emplace_back(i, w / scale);
    }
  }
  std::vector<double> rows(target * side, 0.0);
  for (std::size_t oy = 0; oy < target; ++oy)
    for (const auto& [iy, w] : taps[oy])
      for (std::size_t x = 0; x < side; ++x) rows[oy * side + x] += w * square[iy * side + x];
  std::vector<double> out(target * target, 0.0);
  for (std::size_t oy = 0; oy < target; ++oy)
    for (std::size_t ox = 0; ox < target; ++ox) {
      double s = 0.0;
      for (const auto& [ix, w] : taps[ox]) s += w * rows[oy * side + ix];
      out[oy * target + ox] = s;
    }
  return out;
}

std::vector<Scalar> preprocess_image(const PixelGrid& raw, std::size_t target_size) {
  if (target_size == 0) throw FormatError("preprocess_image: target size must be positive");
  const std::vector<double> gray = to_grayscale(raw);
  std::size_t side = 0;
  const std::vector<double> square = pad_to_square(gray, raw.width, raw.height, &side);
  const std::vector<double> resized = resize_area(square, side, target_size);
  std::vector<Scalar> out(resized.size());
  for (std::size_t i = 0; i < resized.size(); ++i)
    out[i] = static_cast<Scalar>(std::clamp(resized[i], 0.0, 1.0));
  return out;
}

}  // namespace sslecho
