#include "bmmae/png_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>

#include "bmmae/common.hpp"

namespace bmmae {

namespace {

void push_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

// length + type + data + CRC32(type|data)
void push_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    push_be32(out, static_cast<uint32_t>(data.size()));
    const size_t type_at = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + type_at, static_cast<uInt>(4 + data.size()));
    push_be32(out, static_cast<uint32_t>(crc));
}

}  // namespace

void write_png_gray(const std::filesystem::path& path, const GrayImage& img) {
    if (img.width <= 0 || img.height <= 0)
        throw ConfigError("png image dimensions must be positive");
    if (static_cast<int64_t>(img.pixels.size()) != img.width * img.height)
        throw ConfigError("png pixel buffer does not match width*height");

    // Scanlines, each prefixed with filter byte 0 (no per-row filtering).
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.height * (img.width + 1)));
    for (int64_t y = 0; y < img.height; ++y) {
        raw.push_back(0);
        const uint8_t* row = img.pixels.data() + y * img.width;
        raw.insert(raw.end(), row, row + img.width);
    }

    uLongf comp_cap = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_cap);
    if (compress2(comp.data(), &comp_cap, raw.data(), static_cast<uLong>(raw.size()),
                  Z_BEST_SPEED) != Z_OK)
        throw NumericError("png deflate failed");
    comp.resize(comp_cap);

    std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<uint8_t> ihdr;
    push_be32(ihdr, static_cast<uint32_t>(img.width));
    push_be32(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // color type: grayscale
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    push_chunk(out, "IHDR", ihdr);
    push_chunk(out, "IDAT", comp);
    push_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("short write to " + path.string());
}

GrayImage window_to_gray(const std::vector<double>& values, int64_t width, int64_t height) {
    if (width <= 0 || height <= 0) throw ConfigError("window_to_gray dimensions must be positive");
    if (static_cast<int64_t>(values.size()) != width * height)
        throw ConfigError("window_to_gray buffer does not match width*height");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError("non-finite value in image export");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    GrayImage img{width, height, std::vector<uint8_t>(values.size(), 128)};
    if (hi > lo) {
        const double scale = 255.0 / (hi - lo);
        for (size_t i = 0; i < values.size(); ++i)
            img.pixels[i] = static_cast<uint8_t>(std::lround((values[i] - lo) * scale));
    }
    return img;
}

GrayImage upscale_nearest(const GrayImage& img, int64_t factor) {
    if (factor <= 0) throw ConfigError("upscale factor must be positive");
    GrayImage out{img.width * factor, img.height * factor, {}};
    out.pixels.resize(static_cast<size_t>(out.width * out.height));
    for (int64_t y = 0; y < out.height; ++y)
        for (int64_t x = 0; x < out.width; ++x)
            out.pixels[static_cast<size_t>(y * out.width + x)] =
                img.pixels[static_cast<size_t>((y / factor) * img.width + x / factor)];
    return out;
}

}  // namespace bmmae
