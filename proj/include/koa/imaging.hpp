#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "koa/image.hpp"
#include "koa/rng.hpp"
#include "koa/tensor.hpp"

namespace koa::imaging {

/// Axis-aligned fractional sub-rectangle for ROI isolation. Default spans the
/// full frame; users with externally computed ROIs supply their own fractions.
struct CropSpec {
    double x_frac = 0.0;
    double y_frac = 0.0;
    double w_frac = 1.0;
    double h_frac = 1.0;

    void validate() const;
};

struct ClaheParams {
    /// Multiplier of the mean per-bin tile count. A tile histogram bin is
    /// clipped at clip_limit * tile_pixels / n_bins.
    double clip_limit = 3.0;
    size_t tiles_x = 8;
    size_t tiles_y = 8;
    size_t n_bins = 256;

    void validate() const;
};

struct AugmentParams {
    double flip_probability = 0.5;
    double zoom_fraction = 0.1;  // sampled zoom factor in [1-zf, 1+zf]
    uint64_t seed = 0;

    void validate() const;
};

struct PipelineParams {
    CropSpec crop;
    ClaheParams clahe;
    AugmentParams augment;
    size_t target_width = 64;
    size_t target_height = 64;
    bool augment_enabled = false;
};

/// Extracts the fractional sub-rectangle. Output dims = round(frac * dims);
/// a crop that rounds to zero area is rejected.
GrayImage segment_crop(const GrayImage& img, const CropSpec& spec);

/// Per-tile lookup tables v -> equalized level, tiles in row-major order.
/// Histogram clipping uses single-pass uniform redistribution of the excess;
/// the mapping is round(255 * CDF(v)) and is monotone non-decreasing.
std::vector<std::array<uint8_t, 256>> compute_tile_mappings(const GrayImage& img,
                                                            const ClaheParams& p);

/// Contrast limited adaptive histogram equalization. Pixel output is the
/// bilinear blend of the four surrounding tile mappings.
GrayImage clahe(const GrayImage& img, const ClaheParams& p);

/// Random horizontal flip plus random zoom. Zoom-in center-crops and resizes
/// back; zoom-out shrinks and pads by edge replication. Dims are preserved.
/// Pure function of (image, params, rng state).
GrayImage augment(const GrayImage& img, const AugmentParams& p, Rng& rng);

/// Bilinear resize with center-aligned sampling.
GrayImage resize(const GrayImage& img, size_t w, size_t h);

/// Full chain crop -> CLAHE -> augment (optional) -> resize, scaled to [0,1]
/// reals of shape (target_height, target_width, 1).
Tensor preprocess(const GrayImage& img, const PipelineParams& params, Rng& rng);

}  // namespace koa::imaging
