#include "koa/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace koa::img_io {

uint8_t luma_bt601(uint8_t r, uint8_t g, uint8_t b) {
    double y = 0.299 * r + 0.587 * g + 0.114 * b;
    long v = std::lround(y);
    if (v < 0) v = 0;
    if (v > 255) v = 255;
    return static_cast<uint8_t>(v);
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

GrayImage read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("png: cannot open " + path);

    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw DataError("png: not a PNG file: " + path);
    }

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("png: init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("png: init failed");
    }

    std::vector<uint8_t> interleaved;
    png_uint_32 w = 0, h = 0;
    int channels = 0;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("png: corrupt file: " + path);
    }

    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (bit_depth == 16) png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    w = png_get_image_width(png, info);
    h = png_get_image_height(png, info);
    channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("png: unsupported channel count in " + path);
    }

    interleaved.resize(static_cast<size_t>(w) * h * channels);
    std::vector<png_bytep> row_ptrs(h);
    for (png_uint_32 y = 0; y < h; ++y) {
        row_ptrs[y] = interleaved.data() + static_cast<size_t>(y) * w * channels;
    }
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    GrayImage img(w, h);
    if (channels == 1) {
        std::memcpy(img.pixels.data(), interleaved.data(), img.pixels.size());
    } else {
        for (size_t i = 0; i < img.pixels.size(); ++i) {
            const uint8_t* px = interleaved.data() + 3 * i;
            img.pixels[i] = luma_bt601(px[0], px[1], px[2]);
        }
    }
    return img;
}

void write_png(const GrayImage& img, const std::string& path) {
    if (!img.valid()) throw DataError("png: invalid image for " + path);
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("png: cannot open for writing " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("png: init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("png: init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("png: write failed: " + path);
    }

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> row_ptrs(img.height);
    for (size_t y = 0; y < img.height; ++y) {
        row_ptrs[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width);
    }
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

namespace {

// Skips whitespace and '#' comments between PGM header tokens.
int pgm_next_token(std::istream& in, std::string& tok) {
    tok.clear();
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF) return -1;
    while (c != EOF && !std::isspace(c) && c != '#') {
        tok += static_cast<char>(c);
        c = in.get();
    }
    // The single whitespace after maxval was just consumed, as required.
    return 0;
}

}  // namespace

GrayImage read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("pgm: cannot open " + path);
    std::string tok;
    if (pgm_next_token(f, tok) != 0 || tok != "P5") {
        throw DataError("pgm: not a binary PGM (P5): " + path);
    }
    auto read_int = [&](const char* what) -> long {
        if (pgm_next_token(f, tok) != 0) throw DataError(std::string("pgm: truncated header (") + what + "): " + path);
        try {
            return std::stol(tok);
        } catch (...) {
            throw DataError(std::string("pgm: bad ") + what + " in " + path);
        }
    };
    long w = read_int("width");
    long h = read_int("height");
    long maxval = read_int("maxval");
    if (w < 1 || h < 1) throw DataError("pgm: bad dimensions in " + path);
    if (maxval < 1 || maxval > 255) throw DataError("pgm: unsupported maxval in " + path);
    GrayImage img(static_cast<size_t>(w), static_cast<size_t>(h));
    f.read(reinterpret_cast<char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw DataError("pgm: truncated pixel data in " + path);
    }
    return img;
}

void write_pgm(const GrayImage& img, const std::string& path) {
    if (!img.valid()) throw DataError("pgm: invalid image for " + path);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("pgm: cannot open for writing " + path);
    f << "P5\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw DataError("pgm: write failed: " + path);
}

GrayImage read_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("image: cannot open " + path);
    char sig[2] = {0, 0};
    f.read(sig, 2);
    f.close();
    if (sig[0] == 'P' && sig[1] == '5') return read_pgm(path);
    if (static_cast<unsigned char>(sig[0]) == 0x89 && sig[1] == 'P') return read_png(path);
    throw DataError("image: unrecognized format (want PNG or P5 PGM): " + path);
}

}  // namespace koa::img_io
