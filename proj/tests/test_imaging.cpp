#include <doctest.h>

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <vector>

#include "koa/image.hpp"
#include "koa/imaging.hpp"
#include "test_util.hpp"

using namespace koa;
using namespace koa::imaging;

namespace {

GrayImage random_image(size_t w, size_t h, uint64_t seed) {
    GrayImage img(w, h);
    Rng rng(seed);
    for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.uniform_index(256));
    return img;
}

// Scalar histogram-equalization oracle: m(v) = round(255 * P(value <= v)).
GrayImage plain_hist_equalize(const GrayImage& img) {
    std::array<size_t, 256> hist{};
    for (uint8_t p : img.pixels) ++hist[p];
    std::array<uint8_t, 256> map{};
    size_t cum = 0;
    for (size_t v = 0; v < 256; ++v) {
        cum += hist[v];
        double cdf = static_cast<double>(cum) / static_cast<double>(img.pixels.size());
        map[v] = static_cast<uint8_t>(std::lround(255.0 * cdf));
    }
    GrayImage out(img.width, img.height);
    for (size_t i = 0; i < img.pixels.size(); ++i) out.pixels[i] = map[img.pixels[i]];
    return out;
}

}  // namespace

TEST_CASE("segment_crop: identity spec returns the image unchanged") {
    GrayImage img = random_image(13, 9, 1);
    GrayImage out = segment_crop(img, CropSpec{0, 0, 1, 1});
    CHECK(out.width == img.width);
    CHECK(out.height == img.height);
    CHECK(out.pixels == img.pixels);
}

TEST_CASE("segment_crop: central block matches a hand-indexed copy") {
    GrayImage img = random_image(100, 100, 2);
    GrayImage out = segment_crop(img, CropSpec{0.25, 0.25, 0.5, 0.5});
    REQUIRE(out.width == 50);
    REQUIRE(out.height == 50);
    for (size_t y = 0; y < 50; ++y) {
        for (size_t x = 0; x < 50; ++x) {
            CHECK(out.at(x, y) == img.at(25 + x, 25 + y));
        }
    }
}

TEST_CASE("segment_crop: zero-area crop is rejected") {
    GrayImage img = random_image(10, 10, 3);
    CHECK_THROWS_AS(segment_crop(img, CropSpec{0.5, 0.5, 0.0, 0.0}), ConfigError);
    // Tiny but positive fraction that rounds to zero pixels.
    CHECK_THROWS_AS(segment_crop(img, CropSpec{0.0, 0.0, 0.01, 0.01}), DataError);
}

TEST_CASE("segment_crop: invalid specs rejected") {
    GrayImage img = random_image(10, 10, 4);
    CHECK_THROWS_AS(segment_crop(img, CropSpec{0.8, 0.0, 0.5, 0.5}), ConfigError);
    CHECK_THROWS_AS(segment_crop(img, CropSpec{-0.1, 0.0, 0.5, 0.5}), ConfigError);
}

TEST_CASE("clahe: constant image maps to a constant image") {
    GrayImage img(32, 24, 77);
    ClaheParams p;
    p.tiles_x = 4;
    p.tiles_y = 3;
    GrayImage out = clahe(img, p);
    REQUIRE(out.width == 32);
    REQUIRE(out.height == 24);
    uint8_t level = out.pixels[0];
    for (uint8_t v : out.pixels) CHECK(v == level);
}

TEST_CASE("clahe: single tile with non-binding clip equals plain histogram equalization") {
    GrayImage img = random_image(8, 8, 5);
    ClaheParams p;
    p.tiles_x = 1;
    p.tiles_y = 1;
    p.clip_limit = 1e9;
    p.n_bins = 256;
    GrayImage out = clahe(img, p);
    GrayImage expected = plain_hist_equalize(img);
    CHECK(out.pixels == expected.pixels);
}

TEST_CASE("clahe: two-level image with clip 3 matches the hand-evaluated clipped CDF") {
    // 16x16 image, half the pixels 50 and half 200.
    GrayImage img(16, 16);
    for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = i % 2 == 0 ? 50 : 200;
    ClaheParams p;
    p.tiles_x = 1;
    p.tiles_y = 1;
    p.clip_limit = 3.0;
    p.n_bins = 256;

    // Hand evaluation: threshold = 3 * 256/256 = 3; both populated bins clip
    // from 128 to 3; excess 250 spreads as 250/256 per bin.
    double add = 250.0 / 256.0;
    double cdf50 = (51.0 * add + 3.0) / 256.0;
    double cdf200 = (201.0 * add + 6.0) / 256.0;
    auto expected50 = static_cast<uint8_t>(std::lround(255.0 * cdf50));
    auto expected200 = static_cast<uint8_t>(std::lround(255.0 * cdf200));

    GrayImage out = clahe(img, p);
    std::vector<uint8_t> levels(out.pixels);
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    REQUIRE(levels.size() == 2);
    CHECK(levels[0] == expected50);
    CHECK(levels[1] == expected200);
    CHECK(expected50 < expected200);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        CHECK(out.pixels[i] == (img.pixels[i] == 50 ? expected50 : expected200));
    }
}

TEST_CASE("clahe: per-tile mappings are monotone non-decreasing on random images") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        GrayImage img = random_image(40, 40, 100 + seed);
        ClaheParams p;
        p.tiles_x = 4;
        p.tiles_y = 4;
        auto maps = compute_tile_mappings(img, p);
        for (const auto& map : maps) {
            for (size_t v = 1; v < 256; ++v) {
                CHECK(map[v] >= map[v - 1]);
            }
        }
    }
}

TEST_CASE("clahe: clipped histogram bins obey the redistribution bound") {
    // Recompute tile histograms in the test and verify the invariant
    // bin <= threshold + excess/n_bins (+1 slack).
    GrayImage img = random_image(32, 32, 9);
    ClaheParams p;
    p.tiles_x = 2;
    p.tiles_y = 2;
    p.clip_limit = 2.0;
    p.n_bins = 64;
    for (size_t ty = 0; ty < 2; ++ty) {
        for (size_t tx = 0; tx < 2; ++tx) {
            std::vector<double> hist(p.n_bins, 0.0);
            size_t pixels = 0;
            for (size_t y = ty * 16; y < (ty + 1) * 16; ++y) {
                for (size_t x = tx * 16; x < (tx + 1) * 16; ++x) {
                    ++hist[img.at(x, y) * p.n_bins / 256];
                    ++pixels;
                }
            }
            double threshold = p.clip_limit * static_cast<double>(pixels) / static_cast<double>(p.n_bins);
            double excess = 0.0;
            for (double& h : hist) {
                if (h > threshold) {
                    excess += h - threshold;
                    h = threshold;
                }
            }
            for (double& h : hist) h += excess / static_cast<double>(p.n_bins);
            for (double h : hist) {
                CHECK(h <= threshold + excess / static_cast<double>(p.n_bins) + 1.0);
            }
        }
    }
}

TEST_CASE("clahe: image smaller than the tile grid is rejected") {
    GrayImage img = random_image(4, 4, 10);
    ClaheParams p;
    p.tiles_x = 8;
    p.tiles_y = 8;
    CHECK_THROWS_AS(clahe(img, p), DataError);
}

TEST_CASE("clahe: dims preserved and output in range on random images") {
    GrayImage img = random_image(37, 23, 11);
    ClaheParams p;
    p.tiles_x = 5;
    p.tiles_y = 3;
    GrayImage out = clahe(img, p);
    CHECK(out.width == 37);
    CHECK(out.height == 23);
    CHECK(out.pixels.size() == img.pixels.size());
}

TEST_CASE("resize: same dims is the identity") {
    GrayImage img = random_image(17, 11, 12);
    GrayImage out = resize(img, 17, 11);
    CHECK(out.pixels == img.pixels);
}

TEST_CASE("resize: constant image stays constant at any size") {
    GrayImage img(9, 7, 123);
    for (auto [w, h] : {std::pair<size_t, size_t>{3, 2}, {20, 31}, {9, 14}}) {
        GrayImage out = resize(img, w, h);
        REQUIRE(out.width == w);
        REQUIRE(out.height == h);
        for (uint8_t v : out.pixels) CHECK(v == 123);
    }
}

TEST_CASE("resize: 2x1 gradient to 3x1 interpolates the middle pixel") {
    GrayImage img(2, 1);
    img.set(0, 0, 0);
    img.set(1, 0, 255);
    GrayImage out = resize(img, 3, 1);
    REQUIRE(out.width == 3);
    CHECK(out.at(0, 0) == 0);
    // Hand bilinear evaluation: source x = 0.5, value 127.5, rounds to 128.
    CHECK(std::abs(static_cast<int>(out.at(1, 0)) - 128) <= 1);
    CHECK(out.at(1, 0) > 0);
    CHECK(out.at(1, 0) < 255);
    CHECK(out.at(2, 0) == 255);
}

TEST_CASE("augment: horizontal mirror applied twice is the identity") {
    GrayImage img = random_image(21, 14, 13);
    AugmentParams p;
    p.flip_probability = 1.0;
    p.zoom_fraction = 0.0;
    Rng rng(99);
    GrayImage once = augment(img, p, rng);
    CHECK(once.pixels != img.pixels);
    GrayImage twice = augment(once, p, rng);
    CHECK(twice.pixels == img.pixels);
}

TEST_CASE("augment: zoom factor exactly 1 with no flip is the identity") {
    GrayImage img = random_image(16, 16, 14);
    AugmentParams p;
    p.flip_probability = 0.0;
    p.zoom_fraction = 0.0;
    Rng rng(5);
    GrayImage out = augment(img, p, rng);
    CHECK(out.pixels == img.pixels);
}

TEST_CASE("augment: same rng state twice gives bit-identical outputs") {
    GrayImage img = random_image(24, 24, 15);
    AugmentParams p;
    p.flip_probability = 0.5;
    p.zoom_fraction = 0.1;
    Rng r1(1234), r2(1234);
    GrayImage a = augment(img, p, r1);
    GrayImage b = augment(img, p, r2);
    CHECK(a.pixels == b.pixels);
}

TEST_CASE("augment: dims preserved under zoom in both directions") {
    GrayImage img = random_image(30, 22, 16);
    AugmentParams p;
    p.flip_probability = 0.0;
    p.zoom_fraction = 0.3;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        GrayImage out = augment(img, p, rng);
        CHECK(out.width == img.width);
        CHECK(out.height == img.height);
    }
}

TEST_CASE("preprocess: deterministic without augmentation and scaled to [0,1]") {
    GrayImage img = random_image(50, 40, 17);
    PipelineParams pp;
    pp.clahe.tiles_x = 4;
    pp.clahe.tiles_y = 4;
    pp.target_width = 32;
    pp.target_height = 32;
    pp.augment_enabled = false;
    Rng r1(1), r2(2);  // different states must not matter with augmentation off
    Tensor a = preprocess(img, pp, r1);
    Tensor b = preprocess(img, pp, r2);
    CHECK(a.shape == std::vector<size_t>{32, 32, 1});
    CHECK(a.data == b.data);
    for (double v : a.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("preprocess: constant image yields a constant tensor") {
    GrayImage img(40, 40, 200);
    PipelineParams pp;
    pp.clahe.tiles_x = 4;
    pp.clahe.tiles_y = 4;
    pp.target_width = 16;
    pp.target_height = 16;
    pp.augment_enabled = true;
    pp.augment.flip_probability = 0.5;
    pp.augment.zoom_fraction = 0.1;
    Rng rng(3);
    Tensor t = preprocess(img, pp, rng);
    for (double v : t.data) CHECK(v == t.data[0]);
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

namespace {

void write_rgb_png(const std::string& path, size_t w, size_t h,
                   const std::vector<uint8_t>& rgb) {
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    REQUIRE(fp != nullptr);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    REQUIRE(setjmp(png_jmpbuf(png)) == 0);
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(h);
    for (size_t y = 0; y < h; ++y) {
        rows[y] = const_cast<png_bytep>(rgb.data() + y * w * 3);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace

TEST_CASE("image io: grayscale png round trip") {
    koa_test::TempDir tmp("png");
    GrayImage img = random_image(23, 17, 18);
    img_io::write_png(img, tmp.sub("g.png"));
    GrayImage back = img_io::read_image(tmp.sub("g.png"));
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
    CHECK(back.pixels == img.pixels);
}

TEST_CASE("image io: color png converts through BT.601 luma") {
    koa_test::TempDir tmp("pngc");
    // 2x1 image: pure red and pure white.
    std::vector<uint8_t> rgb = {255, 0, 0, 255, 255, 255};
    write_rgb_png(tmp.sub("c.png"), 2, 1, rgb);
    GrayImage img = img_io::read_png(tmp.sub("c.png"));
    REQUIRE(img.width == 2);
    CHECK(img.at(0, 0) == img_io::luma_bt601(255, 0, 0));
    CHECK(img.at(0, 0) == 76);  // round(0.299 * 255)
    CHECK(img.at(1, 0) == 255);
}

TEST_CASE("image io: pgm round trip and header tolerance") {
    koa_test::TempDir tmp("pgm");
    GrayImage img = random_image(31, 5, 19);
    img_io::write_pgm(img, tmp.sub("x.pgm"));
    GrayImage back = img_io::read_image(tmp.sub("x.pgm"));
    CHECK(back.pixels == img.pixels);

    // Comment lines inside the header are legal PGM.
    std::FILE* f = std::fopen(tmp.sub("c.pgm").c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("P5\n# a comment\n2 1\n255\n", f);
    uint8_t px[2] = {7, 250};
    std::fwrite(px, 1, 2, f);
    std::fclose(f);
    GrayImage c = img_io::read_pgm(tmp.sub("c.pgm"));
    REQUIRE(c.width == 2);
    CHECK(c.at(0, 0) == 7);
    CHECK(c.at(1, 0) == 250);
}

TEST_CASE("image io: unreadable and unknown formats raise DataError") {
    koa_test::TempDir tmp("bad");
    std::FILE* f = std::fopen(tmp.sub("junk.png").c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("not an image at all", f);
    std::fclose(f);
    CHECK_THROWS_AS(img_io::read_image(tmp.sub("junk.png")), DataError);
    CHECK_THROWS_AS(img_io::read_image(tmp.sub("missing.png")), DataError);
}
