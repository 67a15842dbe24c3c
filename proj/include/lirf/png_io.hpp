#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace lirf {

struct PngImage {
  std::int64_t width = 0, height = 0, channels = 0;  // 1 (gray) or 3 (rgb)
  std::vector<std::uint8_t> pixels;                  // row-major
};

// 8-bit PNG, grayscale or RGB, zlib-compressed.
void write_png(const std::filesystem::path& path, const PngImage& img);
PngImage read_png(const std::filesystem::path& path);

// [0,1] floats quantized by rounding.
void write_png_rgb(const std::filesystem::path& path, std::span<const float> rgb,
                   std::int64_t width, std::int64_t height);
std::vector<float> png_to_floats(const PngImage& img);  // rgb [h,w,3] in [0,1]

// Raw little-endian float dump, for metric computation without quantization.
void write_float_dump(const std::filesystem::path& path, std::span<const float> values);

}  // namespace lirf
