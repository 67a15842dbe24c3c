#include "lirf/png_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "lirf/common.hpp"

namespace lirf {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void write_chunk(std::vector<std::uint8_t>& out, const char type[4],
                 const std::vector<std::uint8_t>& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  std::uint32_t crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  put_u32(out, crc);
}

}  // namespace

void write_png(const std::filesystem::path& path, const PngImage& img) {
  if (img.channels != 1 && img.channels != 3)
    throw UserError("png: only grayscale and rgb images are supported");
  if (img.pixels.size() !=
      static_cast<std::size_t>(img.width * img.height * img.channels))
    throw UserError("png: pixel buffer does not match dimensions");

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};

  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(img.channels == 3 ? 2 : 0);           // color type
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(out, "IHDR", ihdr);

  // Filter byte 0 per scanline.
  std::size_t stride = static_cast<std::size_t>(img.width * img.channels);
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (stride + 1));
  for (std::int64_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    const std::uint8_t* row = img.pixels.data() + y * stride;
    raw.insert(raw.end(), row, row + stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  compressed.resize(bound);
  write_chunk(out, "IDAT", compressed);
  write_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw UserError("png: cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw UserError("png: write failed for '" + path.string() + "'");
}

PngImage read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UserError("png: cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  static const std::uint8_t magic[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (data.size() < 8 || std::memcmp(data.data(), magic, 8) != 0)
    throw UserError("png: '" + path.string() + "' is not a PNG file");

  PngImage img;
  int bit_depth = 0, color_type = -1;
  std::vector<std::uint8_t> idat;
  std::size_t at = 8;
  while (at + 8 <= data.size()) {
    std::uint32_t len = get_u32(data.data() + at);
    if (at + 12 + len > data.size()) throw UserError("png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(data.data() + at + 4);
    const std::uint8_t* payload = data.data() + at + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      img.width = get_u32(payload);
      img.height = get_u32(payload + 4);
      bit_depth = payload[8];
      color_type = payload[9];
      if (payload[12] != 0) throw UserError("png: interlaced images are not supported");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    at += 12 + len;
  }
  if (bit_depth != 8 || (color_type != 0 && color_type != 2))
    throw UserError("png: only 8-bit grayscale/rgb is supported");
  img.channels = color_type == 2 ? 3 : 1;

  std::size_t stride = static_cast<std::size_t>(img.width * img.channels);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(img.height) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw UserError("png: inflate failed for '" + path.string() + "'");

  img.pixels.resize(static_cast<std::size_t>(img.height) * stride);
  std::int64_t bpp = img.channels;
  for (std::int64_t y = 0; y < img.height; ++y) {
    std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
    std::uint8_t* dst = img.pixels.data() + y * stride;
    const std::uint8_t* prev = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      int a = i >= static_cast<std::size_t>(bpp) ? dst[i - bpp] : 0;
      int b = prev ? prev[i] : 0;
      int c = (prev && i >= static_cast<std::size_t>(bpp)) ? prev[i - bpp] : 0;
      int x = src[i];
      switch (filter) {
        case 0: dst[i] = static_cast<std::uint8_t>(x); break;
        case 1: dst[i] = static_cast<std::uint8_t>(x + a); break;
        case 2: dst[i] = static_cast<std::uint8_t>(x + b); break;
        case 3: dst[i] = static_cast<std::uint8_t>(x + (a + b) / 2); break;
        case 4: {
          int p = a + b - c;
          int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
          int pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          dst[i] = static_cast<std::uint8_t>(x + pred);
          break;
        }
        default: throw UserError("png: unknown filter type");
      }
    }
  }
  return img;
}

void write_png_rgb(const std::filesystem::path& path, std::span<const float> rgb,
                   std::int64_t width, std::int64_t height) {
  PngImage img;
  img.width = width;
  img.height = height;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(width * height * 3));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, rgb[i]));
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  write_png(path, img);
}

std::vector<float> png_to_floats(const PngImage& img) {
  std::vector<float> out(static_cast<std::size_t>(img.width * img.height * 3));
  for (std::int64_t i = 0; i < img.width * img.height; ++i)
    for (int c = 0; c < 3; ++c) {
      std::uint8_t byte = img.channels == 3 ? img.pixels[i * 3 + c] : img.pixels[i];
      out[i * 3 + c] = static_cast<float>(byte) / 255.0f;
    }
  return out;
}

void write_float_dump(const std::filesystem::path& path, std::span<const float> values) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw UserError("float dump: cannot open '" + path.string() + "'");
  f.write(reinterpret_cast<const char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(float)));
}

}  // namespace lirf
