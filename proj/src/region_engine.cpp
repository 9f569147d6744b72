#include "textregion/region_engine.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace textregion {

namespace {

std::string grid_str(Grid g) { return std::to_string(g.rows) + "x" + std::to_string(g.cols); }

void check_mask_grids(const PatchFeatures& features, std::span<const PatchMask> masks, const char* op) {
    for (const PatchMask& m : masks) {
        if (m.grid != features.grid || m.values.size() != features.grid.area()) {
            throw std::invalid_argument(std::string(op) + ": mask grid " + grid_str(m.grid) +
                                        " does not match feature grid " + grid_str(features.grid));
        }
    }
}

} // namespace

void PatchFeatures::validate() const {
    if (grid.rows <= 0 || grid.cols <= 0 || features.rows() != grid.area()) {
        throw std::invalid_argument("patch features: " + std::to_string(features.rows()) + " rows for grid " +
                                    grid_str(grid));
    }
}

void EngineConfig::validate() const {
    if (!(tau > -2.0 && tau < 2.0)) {
        throw std::invalid_argument("tau must lie in (-2, 2)");
    }
    if (fusion_weight && !(std::isfinite(*fusion_weight) && *fusion_weight > 0.0)) {
        throw std::invalid_argument("fusion weight must be > 0");
    }
    if (!std::isfinite(membership_threshold) || membership_threshold < 0.0 || membership_threshold >= 1.0) {
        throw std::invalid_argument("membership threshold must lie in [0, 1)");
    }
}

PatchFeatures fuse_multires(const PatchFeatures& full, const PatchFeatures& crops, const CropLayout& layout,
                            double weight) {
    full.validate();
    crops.validate();
    const Grid stitched = layout.stitched_grid();
    if (crops.grid != stitched) {
        throw std::invalid_argument("fuse_multires: crop features on " + grid_str(crops.grid) +
                                    " but layout stitches to " + grid_str(stitched));
    }
    if (full.grid.rows > stitched.rows || full.grid.cols > stitched.cols) {
        throw std::invalid_argument("fuse_multires: full grid " + grid_str(full.grid) + " exceeds crop grid " +
                                    grid_str(stitched));
    }
    if (full.features.cols() != crops.features.cols()) {
        throw std::invalid_argument("fuse_multires: feature widths differ");
    }
    if (!(std::isfinite(weight) && weight >= 0.0)) {
        throw std::invalid_argument("fuse_multires: weight must be finite and non-negative");
    }
    const Matrix up = resample_bilinear_channels(full.features, full.grid, stitched);
    PatchFeatures out{crops.features, stitched};
    auto& dst = out.features.data();
    const auto& src = up.data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
        dst[k] = static_cast<float>(static_cast<double>(dst[k]) + weight * static_cast<double>(src[k]));
    }
    return out;
}

GlobalPatchReport local_similarity(const PatchFeatures& simfeat, std::span<const PatchMask> patch_masks,
                                   double membership_threshold) {
    simfeat.validate();
    if (patch_masks.empty()) {
        throw std::invalid_argument("local_similarity: no regions");
    }
    check_mask_grids(simfeat, patch_masks, "local_similarity");

    const std::size_t n = simfeat.features.rows();
    const std::size_t d = simfeat.features.cols();

    // Mean cosines reduce to dot products with sums of unit rows.
    std::vector<double> unit(n * d, 0.0);
    std::vector<double> total(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = simfeat.features.row(i);
        const double len = norm(row);
        if (len == 0.0) {
            continue;
        }
        for (std::size_t k = 0; k < d; ++k) {
            unit[i * d + k] = row[k] / len;
            total[k] += unit[i * d + k];
        }
    }

    GlobalPatchReport report;
    report.mask_count = patch_masks.size();
    std::vector<double> inside(d);
    std::vector<double> outside(d);
    std::vector<std::size_t> members;
    for (std::size_t m = 0; m < patch_masks.size(); ++m) {
        const PatchMask& mask = patch_masks[m];
        members.clear();
        std::fill(inside.begin(), inside.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (mask.values[i] > membership_threshold) {
                members.push_back(i);
                for (std::size_t k = 0; k < d; ++k) {
                    inside[k] += unit[i * d + k];
                }
            }
        }
        if (members.empty()) {
            continue;
        }
        const std::size_t n_out = n - members.size();
        for (std::size_t k = 0; k < d; ++k) {
            outside[k] = total[k] - inside[k];
        }
        for (std::size_t i : members) {
            double in_dot = 0.0;
            double out_dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                in_dot += unit[i * d + k] * inside[k];
                out_dot += unit[i * d + k] * outside[k];
            }
            LocalSimilarity row;
            row.mask_index = m;
            row.region_id = mask.region_id;
            row.patch = i;
            row.s_in = in_dot / static_cast<double>(members.size());
            row.s_out = n_out == 0 ? 0.0 : out_dot / static_cast<double>(n_out);
            row.s_local = row.s_in - row.s_out;
            report.rows.push_back(row);
        }
    }
    return report;
}

std::vector<PatchMask> filter_global(std::span<const PatchMask> patch_masks, const GlobalPatchReport& report,
                                     double tau, EmptyRegionPolicy policy) {
    if (report.mask_count != patch_masks.size()) {
        throw std::invalid_argument("filter_global: report covers " + std::to_string(report.mask_count) +
                                    " masks, got " + std::to_string(patch_masks.size()));
    }
    std::vector<PatchMask> filtered(patch_masks.begin(), patch_masks.end());
    for (const LocalSimilarity& row : report.rows) {
        if (row.flagged(tau)) {
            filtered.at(row.mask_index).values.at(row.patch) = 0.0f;
        }
    }
    std::vector<PatchMask> out;
    out.reserve(filtered.size());
    for (std::size_t m = 0; m < filtered.size(); ++m) {
        const bool all_zero =
            std::all_of(filtered[m].values.begin(), filtered[m].values.end(), [](float v) { return v == 0.0f; });
        if (!all_zero) {
            out.push_back(std::move(filtered[m]));
        } else if (policy == EmptyRegionPolicy::fallback_unfiltered) {
            out.push_back(patch_masks[m]);
        }
    }
    return out;
}

RegionTokens pool_regions(const PatchFeatures& values, std::span<const PatchMask> patch_masks) {
    values.validate();
    check_mask_grids(values, patch_masks, "pool_regions");
    const std::size_t n = values.features.rows();
    const std::size_t d = values.features.cols();

    RegionTokens out;
    out.tokens = Matrix(patch_masks.size(), d);
    std::vector<double> acc(d);
    for (std::size_t r = 0; r < patch_masks.size(); ++r) {
        std::fill(acc.begin(), acc.end(), 0.0);
        bool any = false;
        for (std::size_t i = 0; i < n; ++i) {
            const double w = patch_masks[r].values[i];
            if (w == 0.0) {
                continue;
            }
            any = true;
            const auto v = values.features.row(i);
            for (std::size_t k = 0; k < d; ++k) {
                acc[k] += w * static_cast<double>(v[k]);
            }
        }
        std::transform(acc.begin(), acc.end(), out.tokens.row(r).begin(),
                       [](double x) { return static_cast<float>(x); });
        out.region_ids.push_back(patch_masks[r].region_id);
        out.empty.push_back(!any);
    }
    return out;
}

RegionTokens pool_regions_delegate(const PatchFeatures& values, std::span<const PatchMask> patch_masks,
                                   const HeadSpec& head) {
    if (!head.enabled) {
        throw std::invalid_argument("pool_regions_delegate: head is disabled");
    }
    values.validate();
    check_mask_grids(values, patch_masks, "pool_regions_delegate");
    const std::size_t n = values.features.rows();
    const std::size_t d = values.features.cols();
    const int out_dim = head.output_dim(static_cast<int>(d));

    RegionTokens out;
    out.tokens = Matrix(patch_masks.size(), static_cast<std::size_t>(out_dim));
    std::vector<double> acc(d);
    std::vector<float> mean(d);
    for (std::size_t r = 0; r < patch_masks.size(); ++r) {
        // Keys are the replicated mean patch feature, so every unmasked logit is equal and the
        // softmax is uniform over {i : m_i != 0}.
        std::fill(acc.begin(), acc.end(), 0.0);
        std::size_t attended = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (patch_masks[r].values[i] == 0.0f) {
                continue;
            }
            ++attended;
            const auto v = values.features.row(i);
            for (std::size_t k = 0; k < d; ++k) {
                acc[k] += static_cast<double>(v[k]);
            }
        }
        out.region_ids.push_back(patch_masks[r].region_id);
        out.empty.push_back(attended == 0);
        if (attended == 0) {
            continue;
        }
        for (std::size_t k = 0; k < d; ++k) {
            mean[k] = static_cast<float>(acc[k] / static_cast<double>(attended));
        }
        const auto token = apply_head(head, mean);
        std::copy(token.begin(), token.end(), out.tokens.row(r).begin());
    }
    return out;
}

PatchFeatures value_features(const FeatureBundle& bundle, double fusion_weight) {
    if (!bundle.full_grid) {
        throw FormatError(FormatError::Kind::invariant, "bundle '" + bundle.model_id + "' has no values_full");
    }
    PatchFeatures full{bundle.tensor("values_full").to_matrix(), *bundle.full_grid};
    if (!bundle.crop_layout) {
        return full;
    }
    PatchFeatures crops{bundle.tensor("values_crops").to_matrix(), bundle.crop_layout->stitched_grid()};
    return fuse_multires(full, crops, *bundle.crop_layout, fusion_weight);
}

PatchFeatures similarity_features(const FeatureBundle& bundle, double fusion_weight, SimilaritySource source) {
    if (source == SimilaritySource::value || !bundle.has("simfeat_full")) {
        return value_features(bundle, fusion_weight);
    }
    PatchFeatures full{bundle.tensor("simfeat_full").to_matrix(), *bundle.full_grid};
    if (!bundle.crop_layout) {
        return full;
    }
    PatchFeatures crops{bundle.tensor("simfeat_crops").to_matrix(), bundle.crop_layout->stitched_grid()};
    return fuse_multires(full, crops, *bundle.crop_layout, fusion_weight);
}

RegionResult compute_region_tokens(const FeatureBundle& bundle, std::span<const SoftMask> masks,
                                   const EngineConfig& config) {
    config.validate();
    const double weight = config.fusion_weight.value_or(bundle.fusion_weight);
    const PatchFeatures values = value_features(bundle, weight);

    RegionResult result;
    if (masks.empty()) {
        result.tokens.tokens = Matrix(0, values.features.cols());
        return result;
    }

    // Patch masks carry their source index as id until pooling is done.
    std::vector<PatchMask> patch_masks;
    patch_masks.reserve(masks.size());
    for (std::size_t m = 0; m < masks.size(); ++m) {
        if (masks[m].size != bundle.image_size) {
            throw FormatError(FormatError::Kind::invariant,
                              "mask " + std::to_string(masks[m].region_id) + " is " + grid_str(masks[m].size) +
                                  " but the bundle image is " + grid_str(bundle.image_size));
        }
        PatchMask pm = downsample_mask(masks[m], values.grid);
        pm.region_id = static_cast<int>(m);
        patch_masks.push_back(std::move(pm));
    }

    const PatchFeatures sim = similarity_features(bundle, weight, config.similarity_source);
    const GlobalPatchReport report = local_similarity(sim, patch_masks, config.membership_threshold);
    for (const auto& row : report.rows) {
        result.flagged_patches += row.flagged(config.tau) ? 1 : 0;
    }
    const auto filtered = filter_global(patch_masks, report, config.tau, config.empty_region_policy);

    const bool delegate = bundle.head && bundle.head->enabled;
    RegionTokens pooled = delegate ? pool_regions_delegate(values, filtered, *bundle.head)
                                   : pool_regions(values, filtered);

    std::vector<std::size_t> keep;
    for (std::size_t r = 0; r < pooled.region_ids.size(); ++r) {
        // a zero token has no direction to classify
        if (!pooled.empty[r] && norm(pooled.tokens.row(r)) > 0.0) {
            keep.push_back(r);
        }
    }
    result.dropped_regions = masks.size() - keep.size();
    result.tokens.tokens = Matrix(keep.size(), pooled.tokens.cols());
    for (std::size_t k = 0; k < keep.size(); ++k) {
        const auto src = pooled.tokens.row(keep[k]);
        std::copy(src.begin(), src.end(), result.tokens.tokens.row(k).begin());
        const auto index = static_cast<std::size_t>(pooled.region_ids[keep[k]]);
        result.mask_index.push_back(index);
        result.tokens.region_ids.push_back(masks[index].region_id);
        result.tokens.empty.push_back(false);
    }
    return result;
}

} // namespace textregion
