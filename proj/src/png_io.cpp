#include "vlpt/png_io.hpp"

#include <zlib.h>

#include <array>
#include <cstring>
#include <fstream>

#include "vlpt/tensor.hpp"

namespace vlpt {

namespace {

const std::array<uint8_t, 8> kSignature = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& body) {
    put_u32(out, static_cast<uint32_t>(body.size()));
    std::vector<uint8_t> tb;
    tb.insert(tb.end(), type, type + 4);
    tb.insert(tb.end(), body.begin(), body.end());
    out.insert(out.end(), tb.begin(), tb.end());
    put_u32(out, crc32(tb.data(), tb.size()));
}

int color_type_for(int channels) {
    switch (channels) {
        case 1: return 0;
        case 3: return 2;
        case 4: return 6;
        default: throw std::runtime_error("png: unsupported channel count");
    }
}

int channels_for(int color_type) {
    switch (color_type) {
        case 0: return 1;
        case 2: return 3;
        case 6: return 4;
        default: throw std::runtime_error("png: unsupported color type");
    }
}

uint8_t paeth(uint8_t a, uint8_t b, uint8_t c) {
    const int p = int(a) + int(b) - int(c);
    const int pa = std::abs(p - int(a));
    const int pb = std::abs(p - int(b));
    const int pc = std::abs(p - int(c));
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace

uint32_t crc32(const uint8_t* data, size_t n, uint32_t seed) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = seed ^ 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

std::vector<uint8_t> encode_png(const ImageU8& img) {
    check(img.h > 0 && img.w > 0, "png: empty image");
    const int ct = color_type_for(img.channels);
    const size_t stride = static_cast<size_t>(img.w) * img.channels;

    // filter 0 on every row: deterministic and trivially reversible
    std::vector<uint8_t> raw;
    raw.reserve((stride + 1) * static_cast<size_t>(img.h));
    for (int y = 0; y < img.h; ++y) {
        raw.push_back(0);
        const uint8_t* row = img.pixels.data() + static_cast<size_t>(y) * stride;
        raw.insert(raw.end(), row, row + stride);
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> z(bound);
    const int rc = compress2(z.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6);
    check(rc == Z_OK, "png: deflate failed");
    z.resize(bound);

    std::vector<uint8_t> out(kSignature.begin(), kSignature.end());
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.w));
    put_u32(ihdr, static_cast<uint32_t>(img.h));
    ihdr.push_back(8);                        // bit depth
    ihdr.push_back(static_cast<uint8_t>(ct)); // color type
    ihdr.push_back(0);                        // compression
    ihdr.push_back(0);                        // filter method
    ihdr.push_back(0);                        // no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", z);
    put_chunk(out, "IEND", {});
    return out;
}

void write_png(const std::string& path, const ImageU8& img) {
    const std::vector<uint8_t> bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "png: cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    check(f.good(), "png: write failed: " + path);
}

ImageU8 decode_png(const std::vector<uint8_t>& bytes) {
    check(bytes.size() > 8 + 25 && std::memcmp(bytes.data(), kSignature.data(), 8) == 0,
          "png: bad signature");
    size_t pos = 8;
    int w = 0, h = 0, channels = 0;
    bool seen_ihdr = false, seen_iend = false;
    std::vector<uint8_t> idat;
    while (pos + 12 <= bytes.size()) {
        const uint32_t len = get_u32(bytes.data() + pos);
        check(pos + 12 + len <= bytes.size(), "png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const uint8_t* body = bytes.data() + pos + 8;
        const uint32_t want_crc = get_u32(bytes.data() + pos + 8 + len);
        check(crc32(bytes.data() + pos + 4, len + 4) == want_crc, "png: chunk crc mismatch");
        if (std::memcmp(type, "IHDR", 4) == 0) {
            check(len == 13, "png: bad IHDR");
            w = static_cast<int>(get_u32(body));
            h = static_cast<int>(get_u32(body + 4));
            check(body[8] == 8, "png: only 8-bit depth supported");
            channels = channels_for(body[9]);
            check(body[12] == 0, "png: interlaced images not supported");
            seen_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), body, body + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            seen_iend = true;
            break;
        }
        pos += 12 + len;
    }
    check(seen_ihdr && seen_iend && !idat.empty(), "png: missing chunks");
    check(w > 0 && h > 0, "png: bad dimensions");

    const size_t stride = static_cast<size_t>(w) * channels;
    std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(h));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    const int rc = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
    check(rc == Z_OK && raw_len == raw.size(), "png: inflate failed or size mismatch");

    ImageU8 img(h, w, channels);
    const int bpp = channels;
    std::vector<uint8_t> prev(stride, 0);
    for (int y = 0; y < h; ++y) {
        const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1);
        const uint8_t filter = src[0];
        uint8_t* dst = img.pixels.data() + static_cast<size_t>(y) * stride;
        for (size_t i = 0; i < stride; ++i) {
            const uint8_t x = src[1 + i];
            const uint8_t a = i >= static_cast<size_t>(bpp) ? dst[i - bpp] : 0;
            const uint8_t b = prev[i];
            const uint8_t c = i >= static_cast<size_t>(bpp) ? prev[i - bpp] : 0;
            switch (filter) {
                case 0: dst[i] = x; break;
                case 1: dst[i] = static_cast<uint8_t>(x + a); break;
                case 2: dst[i] = static_cast<uint8_t>(x + b); break;
                case 3: dst[i] = static_cast<uint8_t>(x + ((int(a) + int(b)) >> 1)); break;
                case 4: dst[i] = static_cast<uint8_t>(x + paeth(a, b, c)); break;
                default: throw std::runtime_error("png: unknown row filter");
            }
        }
        std::memcpy(prev.data(), dst, stride);
    }
    return img;
}

ImageU8 read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "png: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

} // namespace vlpt
