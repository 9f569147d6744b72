#pragma once

#include "textregion/bundle_io.hpp"
#include "textregion/head.hpp"
#include "textregion/layout.hpp"
#include "textregion/mask_ops.hpp"
#include "textregion/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace textregion {

/// N x d features laid out row-major over an h x w patch grid.
struct PatchFeatures {
    Matrix features;
    Grid grid;

    void validate() const;
};

/// One pooled token per region, in mask order.
struct RegionTokens {
    Matrix tokens;
    std::vector<int> region_ids;
    std::vector<bool> empty; // true where the pooling weights were all zero
};

enum class SimilaritySource { block_input, value };
enum class EmptyRegionPolicy { fallback_unfiltered, drop };

struct EngineConfig {
    double tau = 0.07;
    std::optional<double> fusion_weight; // unset: use the bundle's value
    double membership_threshold = 0.0;
    SimilaritySource similarity_source = SimilaritySource::block_input;
    EmptyRegionPolicy empty_region_policy = EmptyRegionPolicy::fallback_unfiltered;

    void validate() const;
};

struct LocalSimilarity {
    std::size_t mask_index = 0;
    int region_id = 0;
    std::size_t patch = 0;
    double s_in = 0.0;
    double s_out = 0.0;
    double s_local = 0.0;

    [[nodiscard]] bool flagged(double tau) const { return s_local < tau; }
};

struct GlobalPatchReport {
    std::vector<LocalSimilarity> rows; // grouped by mask, patches ascending
    std::size_t mask_count = 0;
};

/// V_high + weight * upsample(V_low), with the full view bilinearly resampled to the crop grid.
PatchFeatures fuse_multires(const PatchFeatures& full, const PatchFeatures& crops, const CropLayout& layout,
                            double weight);

/// Intra- minus inter-region mean cosine for every patch inside every region.
GlobalPatchReport local_similarity(const PatchFeatures& simfeat, std::span<const PatchMask> patch_masks,
                                   double membership_threshold);

/// Zeroes patches whose local similarity falls below `tau`.
std::vector<PatchMask> filter_global(std::span<const PatchMask> patch_masks, const GlobalPatchReport& report,
                                     double tau, EmptyRegionPolicy policy);

RegionTokens pool_regions(const PatchFeatures& values, std::span<const PatchMask> patch_masks);

/// Masked attention pooling for delegate-query models followed by the head's post-pool layers.
RegionTokens pool_regions_delegate(const PatchFeatures& values, std::span<const PatchMask> patch_masks,
                                   const HeadSpec& head);

/// Region tokens for one image, end to end: fuse, downsample, filter, pool.
struct RegionResult {
    RegionTokens tokens;                // non-empty regions only
    std::vector<std::size_t> mask_index; // source mask of each token row
    std::size_t flagged_patches = 0;
    std::size_t dropped_regions = 0;
};

PatchFeatures value_features(const FeatureBundle& bundle, double fusion_weight);
PatchFeatures similarity_features(const FeatureBundle& bundle, double fusion_weight, SimilaritySource source);

RegionResult compute_region_tokens(const FeatureBundle& bundle, std::span<const SoftMask> masks,
                                   const EngineConfig& config);

} // namespace textregion
