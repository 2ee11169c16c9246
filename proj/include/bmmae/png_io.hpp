#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace bmmae {

// Row-major 8-bit grayscale raster.
struct GrayImage {
    int64_t width = 0;
    int64_t height = 0;
    std::vector<uint8_t> pixels;  // height * width entries
};

// Writes an 8-bit grayscale PNG (color type 0, no interlace) with a single
// deflate-compressed IDAT chunk.
void write_png_gray(const std::filesystem::path& path, const GrayImage& img);

// Min/max windowing of a scalar field onto [0, 255]; a constant field maps
// to mid-gray. `values` is row-major width*height.
GrayImage window_to_gray(const std::vector<double>& values, int64_t width, int64_t height);

// Nearest-neighbor integer upscaling (for rendering small matrices legibly).
GrayImage upscale_nearest(const GrayImage& img, int64_t factor);

}  // namespace bmmae
