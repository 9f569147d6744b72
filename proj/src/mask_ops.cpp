#include "textregion/mask_ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace textregion {

SoftMask::SoftMask(int id, Grid sz, std::vector<float> v) : region_id(id), size(sz), values(std::move(v)) {
    if (values.size() != size.area()) {
        throw std::invalid_argument("SoftMask: " + std::to_string(values.size()) + " values for a " +
                                    std::to_string(size.rows) + "x" + std::to_string(size.cols) +
                                    " grid");
    }
}

EmptyRegionError::EmptyRegionError(int region_id)
    : std::runtime_error("region " + std::to_string(region_id) + " has empty support"),
      region_id_(region_id) {}

namespace {

struct Tap {
    int lo;
    int hi;
    double frac; // weight of `hi`
};

std::vector<Tap> taps(int from, int to) {
    std::vector<Tap> out(static_cast<std::size_t>(to));
    const double scale = static_cast<double>(from) / static_cast<double>(to);
    for (int i = 0; i < to; ++i) {
        double x = (i + 0.5) * scale - 0.5;
        x = std::clamp(x, 0.0, static_cast<double>(from - 1));
        const int lo = static_cast<int>(std::floor(x));
        const int hi = std::min(lo + 1, from - 1);
        out[static_cast<std::size_t>(i)] = {lo, hi, x - lo};
    }
    return out;
}

void check_grids(Grid from, Grid to) {
    if (to.rows <= 0 || to.cols <= 0) {
        throw std::invalid_argument("bilinear resample: zero-sized target grid");
    }
    if (from.rows <= 0 || from.cols <= 0) {
        throw std::invalid_argument("bilinear resample: zero-sized source grid");
    }
}

} // namespace

std::vector<float> resample_bilinear(std::span<const float> src, Grid from, Grid to) {
    check_grids(from, to);
    if (src.size() != from.area()) {
        throw std::invalid_argument("bilinear resample: source size does not match grid");
    }
    const auto ty = taps(from.rows, to.rows);
    const auto tx = taps(from.cols, to.cols);
    std::vector<float> out(to.area());
    for (int i = 0; i < to.rows; ++i) {
        const Tap& y = ty[static_cast<std::size_t>(i)];
        const float* r0 = src.data() + static_cast<std::size_t>(y.lo) * from.cols;
        const float* r1 = src.data() + static_cast<std::size_t>(y.hi) * from.cols;
        for (int j = 0; j < to.cols; ++j) {
            const Tap& x = tx[static_cast<std::size_t>(j)];
            const double top = (1.0 - x.frac) * r0[x.lo] + x.frac * r0[x.hi];
            const double bottom = (1.0 - x.frac) * r1[x.lo] + x.frac * r1[x.hi];
            out[static_cast<std::size_t>(i) * to.cols + j] =
                static_cast<float>((1.0 - y.frac) * top + y.frac * bottom);
        }
    }
    return out;
}

Matrix resample_bilinear_channels(const Matrix& src, Grid from, Grid to) {
    check_grids(from, to);
    if (src.rows() != from.area()) {
        throw std::invalid_argument("bilinear resample: feature rows do not match grid");
    }
    const std::size_t channels = src.cols();
    const auto ty = taps(from.rows, to.rows);
    const auto tx = taps(from.cols, to.cols);
    Matrix out(to.area(), channels);
    for (int i = 0; i < to.rows; ++i) {
        const Tap& y = ty[static_cast<std::size_t>(i)];
        for (int j = 0; j < to.cols; ++j) {
            const Tap& x = tx[static_cast<std::size_t>(j)];
            const auto a = src.row(static_cast<std::size_t>(y.lo) * from.cols + x.lo);
            const auto b = src.row(static_cast<std::size_t>(y.lo) * from.cols + x.hi);
            const auto c = src.row(static_cast<std::size_t>(y.hi) * from.cols + x.lo);
            const auto d = src.row(static_cast<std::size_t>(y.hi) * from.cols + x.hi);
            auto dst = out.row(static_cast<std::size_t>(i) * to.cols + j);
            for (std::size_t k = 0; k < channels; ++k) {
                const double top = (1.0 - x.frac) * a[k] + x.frac * b[k];
                const double bottom = (1.0 - x.frac) * c[k] + x.frac * d[k];
                dst[k] = static_cast<float>((1.0 - y.frac) * top + y.frac * bottom);
            }
        }
    }
    return out;
}

PatchMask downsample_mask(const SoftMask& mask, Grid grid) {
    if (grid.rows <= 0 || grid.cols <= 0) {
        throw std::invalid_argument("downsample_mask: zero-sized grid");
    }
    if (grid.rows > mask.size.rows || grid.cols > mask.size.cols) {
        throw std::invalid_argument("downsample_mask: grid " + std::to_string(grid.rows) + "x" +
                                    std::to_string(grid.cols) + " exceeds mask size " +
                                    std::to_string(mask.size.rows) + "x" +
                                    std::to_string(mask.size.cols));
    }
    return {mask.region_id, grid, resample_bilinear(mask.values, mask.size, grid)};
}

std::vector<std::uint8_t> binarize(const SoftMask& mask, float threshold) {
    std::vector<std::uint8_t> out(mask.values.size());
    std::transform(mask.values.begin(), mask.values.end(), out.begin(),
                   [threshold](float v) { return static_cast<std::uint8_t>(v >= threshold ? 1 : 0); });
    return out;
}

namespace {

double binary_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t p = 0; p < a.size(); ++p) {
        inter += static_cast<std::size_t>(a[p] & b[p]);
        uni += static_cast<std::size_t>(a[p] | b[p]);
    }
    if (uni == 0) {
        return 1.0;
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

void absorb(SoftMask& into, const SoftMask& other) {
    for (std::size_t p = 0; p < into.values.size(); ++p) {
        into.values[p] = std::max(into.values[p], other.values[p]);
    }
}

} // namespace

std::vector<SoftMask> merge_masks(std::span<const SoftMask> masks, double iou_threshold) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
        throw std::invalid_argument("merge_masks: iou_threshold must lie in (0, 1]");
    }
    std::vector<SoftMask> kept;
    std::vector<std::vector<std::uint8_t>> support;
    for (const SoftMask& mask : masks) {
        if (!kept.empty() && mask.size != kept.front().size) {
            throw std::invalid_argument("merge_masks: masks differ in size");
        }
        auto bin = binarize(mask);
        std::size_t target = kept.size();
        for (std::size_t k = 0; k < kept.size(); ++k) {
            if (binary_iou(bin, support[k]) > iou_threshold) {
                target = k;
                break;
            }
        }
        if (target == kept.size()) {
            kept.push_back(mask);
            support.push_back(std::move(bin));
            continue;
        }
        absorb(kept[target], mask);
        support[target] = binarize(kept[target]);

        // A grown mask may now overlap another kept mask; cascade so the output is a fixed point.
        bool changed = true;
        while (changed) {
            changed = false;
            for (std::size_t k = 0; k < kept.size(); ++k) {
                if (k == target || binary_iou(support[k], support[target]) <= iou_threshold) {
                    continue;
                }
                const std::size_t lo = std::min(k, target);
                const std::size_t hi = std::max(k, target);
                absorb(kept[lo], kept[hi]);
                support[lo] = binarize(kept[lo]);
                kept.erase(kept.begin() + static_cast<std::ptrdiff_t>(hi));
                support.erase(support.begin() + static_cast<std::ptrdiff_t>(hi));
                target = lo;
                changed = true;
                break;
            }
        }
    }
    return kept;
}

Box mask_to_box(const SoftMask& mask, float bin_threshold) {
    int x0 = mask.size.cols;
    int y0 = mask.size.rows;
    int x1 = -1;
    int y1 = -1;
    for (int r = 0; r < mask.size.rows; ++r) {
        for (int c = 0; c < mask.size.cols; ++c) {
            if (mask.at(r, c) >= bin_threshold) {
                x0 = std::min(x0, c);
                y0 = std::min(y0, r);
                x1 = std::max(x1, c);
                y1 = std::max(y1, r);
            }
        }
    }
    if (x1 < 0) {
        throw EmptyRegionError(mask.region_id);
    }
    return {x0, y0, x1, y1};
}

double box_iou(const Box& a, const Box& b) {
    const int ix0 = std::max(a.x0, b.x0);
    const int iy0 = std::max(a.y0, b.y0);
    const int ix1 = std::min(a.x1, b.x1);
    const int iy1 = std::min(a.y1, b.y1);
    long long inter = 0;
    if (ix1 >= ix0 && iy1 >= iy0) {
        inter = static_cast<long long>(ix1 - ix0 + 1) * static_cast<long long>(iy1 - iy0 + 1);
    }
    const long long uni = a.area() + b.area() - inter;
    if (uni <= 0) {
        return 0.0;
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double mask_iou(const SoftMask& a, const SoftMask& b, float bin_threshold) {
    if (a.size != b.size) {
        throw std::invalid_argument("mask_iou: dimension mismatch");
    }
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t p = 0; p < a.values.size(); ++p) {
        const bool in_a = a.values[p] >= bin_threshold;
        const bool in_b = b.values[p] >= bin_threshold;
        inter += static_cast<std::size_t>(in_a && in_b);
        uni += static_cast<std::size_t>(in_a || in_b);
    }
    if (uni == 0) {
        return 1.0; // both empty
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

} // namespace textregion
