#include "textregion/layout.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace textregion {

void CropLayout::validate() const {
    if (grid.rows < 1 || grid.cols < 1) {
        throw std::invalid_argument("crop layout: crop counts must be >= 1");
    }
    if (crop_px <= 0) {
        throw std::invalid_argument("crop layout: crop size must be positive");
    }
    if (resized.rows != grid.rows * crop_px || resized.cols != grid.cols * crop_px) {
        throw std::invalid_argument("crop layout: resized image " + std::to_string(resized.rows) + "x" +
                                    std::to_string(resized.cols) + " is not " +
                                    std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                                    " crops of " + std::to_string(crop_px) + " px");
    }
    if (crop_grid.rows < 0 || crop_grid.cols < 0) {
        throw std::invalid_argument("crop layout: negative crop patch grid");
    }
}

CropLayout plan_crops(Grid image, int crop_px) {
    if (image.rows <= 0 || image.cols <= 0 || crop_px <= 0) {
        throw std::invalid_argument("plan_crops: image and crop sizes must be positive");
    }
    auto count = [crop_px](int extent) {
        const double ratio = static_cast<double>(extent) / static_cast<double>(crop_px);
        return std::max(1, static_cast<int>(std::lround(ratio)));
    };
    CropLayout layout;
    layout.grid = {count(image.rows), count(image.cols)};
    layout.crop_px = crop_px;
    layout.resized = {layout.grid.rows * crop_px, layout.grid.cols * crop_px};
    return layout;
}

} // namespace textregion
