#include "koa/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace koa::imaging {

namespace {

uint8_t clamp_u8(double v) {
    long r = std::lround(v);
    if (r < 0) r = 0;
    if (r > 255) r = 255;
    return static_cast<uint8_t>(r);
}

size_t round_frac(double frac, size_t extent) {
    return static_cast<size_t>(std::llround(frac * static_cast<double>(extent)));
}

}  // namespace

void CropSpec::validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(x_frac) || !in01(y_frac) || !in01(w_frac) || !in01(h_frac)) {
        throw ConfigError("crop: fractions must lie in [0,1]");
    }
    if (w_frac <= 0.0 || h_frac <= 0.0) {
        throw ConfigError("crop: w_frac and h_frac must be positive");
    }
    if (x_frac + w_frac > 1.0 + 1e-12 || y_frac + h_frac > 1.0 + 1e-12) {
        throw ConfigError("crop: rectangle exceeds the unit square");
    }
}

void ClaheParams::validate() const {
    if (!(clip_limit > 1.0)) throw ConfigError("clahe: clip_limit must exceed 1.0");
    if (tiles_x < 1 || tiles_y < 1) throw ConfigError("clahe: tile grid must be at least 1x1");
    if (n_bins < 2 || n_bins > 256) throw ConfigError("clahe: n_bins must be in [2,256]");
}

void AugmentParams::validate() const {
    if (flip_probability < 0.0 || flip_probability > 1.0) {
        throw ConfigError("augment: flip_probability must lie in [0,1]");
    }
    if (zoom_fraction < 0.0 || zoom_fraction >= 1.0) {
        throw ConfigError("augment: zoom_fraction must lie in [0,1)");
    }
}

GrayImage segment_crop(const GrayImage& img, const CropSpec& spec) {
    spec.validate();
    size_t x0 = round_frac(spec.x_frac, img.width);
    size_t y0 = round_frac(spec.y_frac, img.height);
    size_t w = round_frac(spec.w_frac, img.width);
    size_t h = round_frac(spec.h_frac, img.height);
    if (x0 > img.width) x0 = img.width;
    if (y0 > img.height) y0 = img.height;
    w = std::min(w, img.width - x0);
    h = std::min(h, img.height - y0);
    if (w == 0 || h == 0) {
        throw DataError("crop: zero-area region after rounding");
    }
    GrayImage out(w, h);
    for (size_t y = 0; y < h; ++y) {
        for (size_t x = 0; x < w; ++x) {
            out.set(x, y, img.at(x0 + x, y0 + y));
        }
    }
    return out;
}

namespace {

// Tile boundaries: tile t spans [bounds[t], bounds[t+1]).
std::vector<size_t> tile_bounds(size_t extent, size_t tiles) {
    std::vector<size_t> b(tiles + 1);
    for (size_t t = 0; t <= tiles; ++t) b[t] = t * extent / tiles;
    return b;
}

}  // namespace

std::vector<std::array<uint8_t, 256>> compute_tile_mappings(const GrayImage& img,
                                                            const ClaheParams& p) {
    p.validate();
    if (img.width < p.tiles_x || img.height < p.tiles_y) {
        throw DataError("clahe: image " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + " smaller than tile grid " +
                        std::to_string(p.tiles_x) + "x" + std::to_string(p.tiles_y));
    }
    const auto xb = tile_bounds(img.width, p.tiles_x);
    const auto yb = tile_bounds(img.height, p.tiles_y);

    std::vector<std::array<uint8_t, 256>> maps(p.tiles_x * p.tiles_y);
    std::vector<double> hist(p.n_bins);

    for (size_t ty = 0; ty < p.tiles_y; ++ty) {
        for (size_t tx = 0; tx < p.tiles_x; ++tx) {
            std::fill(hist.begin(), hist.end(), 0.0);
            size_t tile_pixels = 0;
            for (size_t y = yb[ty]; y < yb[ty + 1]; ++y) {
                for (size_t x = xb[tx]; x < xb[tx + 1]; ++x) {
                    size_t bin = static_cast<size_t>(img.at(x, y)) * p.n_bins / 256;
                    hist[bin] += 1.0;
                    ++tile_pixels;
                }
            }
            // Clip and redistribute the excess uniformly in one pass.
            double threshold = p.clip_limit * static_cast<double>(tile_pixels) /
                               static_cast<double>(p.n_bins);
            double excess = 0.0;
            for (double& h : hist) {
                if (h > threshold) {
                    excess += h - threshold;
                    h = threshold;
                }
            }
            double add = excess / static_cast<double>(p.n_bins);
            for (double& h : hist) h += add;

            auto& map = maps[ty * p.tiles_x + tx];
            double cum = 0.0;
            size_t bin = 0;
            double cdf_at_bin = 0.0;
            for (size_t v = 0; v < 256; ++v) {
                size_t b = v * p.n_bins / 256;
                while (bin <= b) {
                    cum += hist[bin];
                    cdf_at_bin = cum / static_cast<double>(tile_pixels);
                    ++bin;
                }
                map[v] = clamp_u8(255.0 * cdf_at_bin);
            }
        }
    }
    return maps;
}

GrayImage clahe(const GrayImage& img, const ClaheParams& p) {
    const auto maps = compute_tile_mappings(img, p);
    const auto xb = tile_bounds(img.width, p.tiles_x);
    const auto yb = tile_bounds(img.height, p.tiles_y);

    // Tile centers in pixel coordinates.
    auto centers = [](const std::vector<size_t>& b) {
        std::vector<double> c(b.size() - 1);
        for (size_t t = 0; t + 1 < b.size(); ++t) {
            c[t] = (static_cast<double>(b[t]) + static_cast<double>(b[t + 1]) - 1.0) / 2.0;
        }
        return c;
    };
    const auto cx = centers(xb);
    const auto cy = centers(yb);

    // Per-coordinate interpolation setup: bracketing tiles and blend weight.
    struct Lerp {
        size_t lo, hi;
        double w;  // weight of hi
    };
    auto build = [](const std::vector<double>& c, size_t extent) {
        std::vector<Lerp> l(extent);
        for (size_t i = 0; i < extent; ++i) {
            double pos = static_cast<double>(i);
            if (pos <= c.front()) {
                l[i] = {0, 0, 0.0};
            } else if (pos >= c.back()) {
                l[i] = {c.size() - 1, c.size() - 1, 0.0};
            } else {
                size_t t = 0;
                while (t + 1 < c.size() && c[t + 1] < pos) ++t;
                double span = c[t + 1] - c[t];
                l[i] = {t, t + 1, span > 0.0 ? (pos - c[t]) / span : 0.0};
            }
        }
        return l;
    };
    const auto lx = build(cx, img.width);
    const auto ly = build(cy, img.height);

    GrayImage out(img.width, img.height);
    for (size_t y = 0; y < img.height; ++y) {
        const Lerp& py = ly[y];
        for (size_t x = 0; x < img.width; ++x) {
            const Lerp& px = lx[x];
            uint8_t v = img.at(x, y);
            double m00 = maps[py.lo * p.tiles_x + px.lo][v];
            double m10 = maps[py.lo * p.tiles_x + px.hi][v];
            double m01 = maps[py.hi * p.tiles_x + px.lo][v];
            double m11 = maps[py.hi * p.tiles_x + px.hi][v];
            double top = m00 * (1.0 - px.w) + m10 * px.w;
            double bot = m01 * (1.0 - px.w) + m11 * px.w;
            out.set(x, y, clamp_u8(top * (1.0 - py.w) + bot * py.w));
        }
    }
    return out;
}

GrayImage resize(const GrayImage& img, size_t w, size_t h) {
    if (w < 1 || h < 1) throw ConfigError("resize: target dims must be at least 1x1");
    if (w == img.width && h == img.height) return img;

    GrayImage out(w, h);
    double sx = static_cast<double>(img.width) / static_cast<double>(w);
    double sy = static_cast<double>(img.height) / static_cast<double>(h);
    for (size_t dy = 0; dy < h; ++dy) {
        double src_y = (static_cast<double>(dy) + 0.5) * sy - 0.5;
        double fy = src_y - std::floor(src_y);
        long y0 = static_cast<long>(std::floor(src_y));
        long y1 = y0 + 1;
        y0 = std::clamp<long>(y0, 0, static_cast<long>(img.height) - 1);
        y1 = std::clamp<long>(y1, 0, static_cast<long>(img.height) - 1);
        for (size_t dx = 0; dx < w; ++dx) {
            double src_x = (static_cast<double>(dx) + 0.5) * sx - 0.5;
            double fx = src_x - std::floor(src_x);
            long x0 = static_cast<long>(std::floor(src_x));
            long x1 = x0 + 1;
            x0 = std::clamp<long>(x0, 0, static_cast<long>(img.width) - 1);
            x1 = std::clamp<long>(x1, 0, static_cast<long>(img.width) - 1);
            double v = (1.0 - fy) * ((1.0 - fx) * img.at(x0, y0) + fx * img.at(x1, y0)) +
                       fy * ((1.0 - fx) * img.at(x0, y1) + fx * img.at(x1, y1));
            out.set(dx, dy, clamp_u8(v));
        }
    }
    return out;
}

namespace {

GrayImage mirror_horizontal(const GrayImage& img) {
    GrayImage out(img.width, img.height);
    for (size_t y = 0; y < img.height; ++y) {
        for (size_t x = 0; x < img.width; ++x) {
            out.set(x, y, img.at(img.width - 1 - x, y));
        }
    }
    return out;
}

GrayImage zoom_in(const GrayImage& img, double z) {
    size_t cw = std::max<size_t>(1, static_cast<size_t>(std::llround(img.width / z)));
    size_t ch = std::max<size_t>(1, static_cast<size_t>(std::llround(img.height / z)));
    cw = std::min(cw, img.width);
    ch = std::min(ch, img.height);
    size_t x0 = (img.width - cw) / 2;
    size_t y0 = (img.height - ch) / 2;
    GrayImage crop(cw, ch);
    for (size_t y = 0; y < ch; ++y) {
        for (size_t x = 0; x < cw; ++x) {
            crop.set(x, y, img.at(x0 + x, y0 + y));
        }
    }
    return resize(crop, img.width, img.height);
}

GrayImage zoom_out(const GrayImage& img, double z) {
    size_t sw = std::max<size_t>(1, static_cast<size_t>(std::llround(img.width * z)));
    size_t sh = std::max<size_t>(1, static_cast<size_t>(std::llround(img.height * z)));
    GrayImage small = resize(img, sw, sh);
    if (sw == img.width && sh == img.height) return small;
    GrayImage out(img.width, img.height);
    long px = (static_cast<long>(img.width) - static_cast<long>(sw)) / 2;
    long py = (static_cast<long>(img.height) - static_cast<long>(sh)) / 2;
    for (size_t y = 0; y < img.height; ++y) {
        long sy = std::clamp<long>(static_cast<long>(y) - py, 0, static_cast<long>(sh) - 1);
        for (size_t x = 0; x < img.width; ++x) {
            long sx = std::clamp<long>(static_cast<long>(x) - px, 0, static_cast<long>(sw) - 1);
            out.set(x, y, small.at(static_cast<size_t>(sx), static_cast<size_t>(sy)));
        }
    }
    return out;
}

}  // namespace

GrayImage augment(const GrayImage& img, const AugmentParams& p, Rng& rng) {
    p.validate();
    bool flip = rng.bernoulli(p.flip_probability);
    double z = rng.uniform(1.0 - p.zoom_fraction, 1.0 + p.zoom_fraction);

    GrayImage out = flip ? mirror_horizontal(img) : img;
    if (z > 1.0) {
        out = zoom_in(out, z);
    } else if (z < 1.0) {
        out = zoom_out(out, z);
    }
    return out;
}

Tensor preprocess(const GrayImage& img, const PipelineParams& params, Rng& rng) {
    GrayImage stage = segment_crop(img, params.crop);
    stage = clahe(stage, params.clahe);
    if (params.augment_enabled) {
        stage = augment(stage, params.augment, rng);
    }
    stage = resize(stage, params.target_width, params.target_height);

    Tensor t = Tensor::zeros({params.target_height, params.target_width, 1});
    for (size_t i = 0; i < stage.pixels.size(); ++i) {
        t.data[i] = static_cast<double>(stage.pixels[i]) / 255.0;
    }
    return t;
}

}  // namespace koa::imaging
