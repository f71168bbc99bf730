#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vlpt {

/// Interleaved 8-bit image, rows top to bottom.
struct ImageU8 {
    int h = 0, w = 0, channels = 0;
    std::vector<uint8_t> pixels;

    ImageU8() = default;
    ImageU8(int height, int width, int ch)
        : h(height), w(width), channels(ch),
          pixels(static_cast<size_t>(height) * width * ch, 0) {}

    uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * w + x) * channels + c];
    }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * w + x) * channels + c];
    }
};

/// Writes an 8-bit gray/RGB/RGBA PNG (filter 0 rows, zlib-compressed).
void write_png(const std::string& path, const ImageU8& img);
std::vector<uint8_t> encode_png(const ImageU8& img);

/// Reads non-interlaced 8-bit gray/RGB/RGBA PNGs (palette and 16-bit depth
/// are rejected). Throws on any structural or checksum problem.
ImageU8 read_png(const std::string& path);
ImageU8 decode_png(const std::vector<uint8_t>& bytes);

uint32_t crc32(const uint8_t* data, size_t n, uint32_t seed = 0);

} // namespace vlpt
