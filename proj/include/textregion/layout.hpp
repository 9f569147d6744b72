#pragma once

#include "textregion/tensor.hpp"

namespace textregion {

/// Tiling of a resized image into equally sized square crops.
struct CropLayout {
    Grid grid;        // crop counts (gy, gx)
    int crop_px = 0;  // side of each crop in pixels
    Grid resized;     // (gy * crop_px, gx * crop_px)
    Grid crop_grid;   // patch grid of a single crop (hc, wc)

    /// Patch grid of all crops stitched together.
    [[nodiscard]] Grid stitched_grid() const {
        return {grid.rows * crop_grid.rows, grid.cols * crop_grid.cols};
    }
    /// Throws std::invalid_argument when the layout is inconsistent.
    void validate() const;

    bool operator==(const CropLayout&) const = default;
};

/// Round-to-nearest crop counts (at least one each way); resized image is an exact multiple.
CropLayout plan_crops(Grid image, int crop_px);

} // namespace textregion
