#pragma once

// Synthetic inputs shared by the unit, CLI and acceptance suites.

#include "textregion/bundle_io.hpp"
#include "textregion/mask_ops.hpp"
#include "textregion/predictor.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace textregion::testing {

using Rng = std::mt19937_64;

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, float lo = -1.0f, float hi = 1.0f);
std::vector<float> random_unit(Rng& rng, std::size_t dim);
/// `count` orthonormal rows of width `dim` (Gram-Schmidt on Gaussian draws).
Matrix random_orthonormal(Rng& rng, std::size_t count, std::size_t dim);
SoftMask random_soft_mask(Rng& rng, Grid size, int id = 0);
PatchMask random_patch_mask(Rng& rng, Grid grid, int id = 0, double zero_fraction = 0.3);
/// Valid bundle exercising optional crops, block-input features, heads, labels and f16.
FeatureBundle random_bundle(Rng& rng);

/// Image tiled into rectangular regions aligned to the patch grid, each region's patch
/// values equal to its label embedding.
struct PartitionSpec {
    int image_px = 64;
    int patch_px = 4;
    int band_rows = 2;
    int band_cols = 2;
    int dim = 8;
    int classes = 4;
    int uncovered_rows = 2; // bottom pixel rows no mask covers
    std::uint64_t seed = 7;
};

struct Fixture {
    FeatureBundle bundle; // includes the label tensor
    MaskSet masks;
    std::vector<int> gt;  // per pixel, 255 where uncovered
    std::vector<int> region_label;
};

Fixture make_partition_fixture(const PartitionSpec& spec);

/// Four regions on a 16x16 patch grid; the small region 0 contains one high-norm patch pointing
/// at the mean of all label embeddings, and label 3 sits near that mean.
struct PoisonSpec {
    double global_scale = 12.0;
    int dim = 8;
};
Fixture make_poison_fixture(const PoisonSpec& spec = {});

/// Writes <dir>/bundles/<id>.txrb, <dir>/masks/<id>.txrm and <dir>/gt/<id>.png.
void write_fixture(const Fixture& f, const std::filesystem::path& dir, const std::string& id);

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

std::vector<int> read_label_map(const std::filesystem::path& png);

} // namespace textregion::testing
