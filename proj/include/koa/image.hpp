#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "koa/errors.hpp"

namespace koa {

/// 2-D grid of 8-bit intensities, row-major. The unit flowing through the
/// preprocessing chain.
struct GrayImage {
    size_t width = 0;
    size_t height = 0;
    std::vector<uint8_t> pixels;

    GrayImage() = default;
    GrayImage(size_t w, size_t h, uint8_t fill = 0)
        : width(w), height(h), pixels(w * h, fill) {}

    uint8_t at(size_t x, size_t y) const { return pixels[y * width + x]; }
    void set(size_t x, size_t y, uint8_t v) { pixels[y * width + x] = v; }

    bool valid() const {
        return width >= 1 && height >= 1 && pixels.size() == width * height;
    }
};

namespace img_io {

/// Reads a PNG or binary PGM (P5), dispatching on the file signature.
/// Color PNG inputs are luminance-converted with ITU-R BT.601 weights.
GrayImage read_image(const std::string& path);

GrayImage read_png(const std::string& path);
GrayImage read_pgm(const std::string& path);

void write_png(const GrayImage& img, const std::string& path);
void write_pgm(const GrayImage& img, const std::string& path);

/// BT.601 luma from 8-bit RGB, rounded to nearest.
uint8_t luma_bt601(uint8_t r, uint8_t g, uint8_t b);

}  // namespace img_io

}  // namespace koa
