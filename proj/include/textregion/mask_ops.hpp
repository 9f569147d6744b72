#pragma once

#include "textregion/tensor.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace textregion {

/// Per-pixel region membership in [0, 1] at image resolution.
struct SoftMask {
    int region_id = 0;
    Grid size;
    std::vector<float> values; // row-major, size.area() entries

    SoftMask() = default;
    SoftMask(int id, Grid sz, float fill = 0.0f) : region_id(id), size(sz), values(sz.area(), fill) {}
    SoftMask(int id, Grid sz, std::vector<float> v);

    float& at(int r, int c) { return values[static_cast<std::size_t>(r) * size.cols + c]; }
    [[nodiscard]] float at(int r, int c) const {
        return values[static_cast<std::size_t>(r) * size.cols + c];
    }
    bool operator==(const SoftMask&) const = default;
};

/// A mask resampled onto the patch grid; values flattened row-major, length rows*cols.
struct PatchMask {
    int region_id = 0;
    Grid grid;
    std::vector<float> values;

    bool operator==(const PatchMask&) const = default;
};

/// Axis-aligned box with inclusive pixel coordinates.
struct Box {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;

    [[nodiscard]] long long area() const {
        return static_cast<long long>(x1 - x0 + 1) * static_cast<long long>(y1 - y0 + 1);
    }
    bool operator==(const Box&) const = default;
};

class EmptyRegionError : public std::runtime_error {
  public:
    explicit EmptyRegionError(int region_id);
    [[nodiscard]] int region_id() const { return region_id_; }

  private:
    int region_id_;
};

inline constexpr float kBinaryThreshold = 0.5f;

/// Bilinear resampling of a single-channel grid with half-pixel centers and edge clamping.
/// Works for both down- and upsampling.
std::vector<float> resample_bilinear(std::span<const float> src, Grid from, Grid to);

/// Resamples every column of a row-major (from.area() x channels) matrix.
Matrix resample_bilinear_channels(const Matrix& src, Grid from, Grid to);

PatchMask downsample_mask(const SoftMask& mask, Grid grid);

/// Greedy overlap merge: a mask whose binary IoU with an already kept mask exceeds
/// `iou_threshold` is folded into it by element-wise maximum.
std::vector<SoftMask> merge_masks(std::span<const SoftMask> masks, double iou_threshold);

std::vector<std::uint8_t> binarize(const SoftMask& mask, float threshold = kBinaryThreshold);

Box mask_to_box(const SoftMask& mask, float bin_threshold = kBinaryThreshold);

double box_iou(const Box& a, const Box& b);

double mask_iou(const SoftMask& a, const SoftMask& b, float bin_threshold = kBinaryThreshold);

} // namespace textregion
