#pragma once

#include "textregion/bundle_io.hpp"
#include "textregion/mask_ops.hpp"
#include "textregion/region_engine.hpp"
#include "textregion/tensor.hpp"

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace textregion {

inline constexpr int kDefaultIgnoreIndex = 255;
inline constexpr std::string_view kDefaultContrastQuery = "Background, any other thing";
inline constexpr std::string_view kInterpretedContrastTemplate = "Background, anything but {query}";

/// Class or query names with unit-norm text embeddings and the logit temperature.
struct LabelSet {
    std::vector<std::string> names;
    Matrix embeddings; // C x d
    double temperature = 100.0;

    void validate() const;
    [[nodiscard]] std::size_t size() const { return names.size(); }
    [[nodiscard]] std::size_t dim() const { return embeddings.cols(); }
    /// Row index of `name`; throws std::out_of_range when absent.
    [[nodiscard]] std::size_t index_of(std::string_view name) const;

    /// Reads the "labels" tensor, label names and temperature of a bundle.
    static LabelSet from_bundle(const FeatureBundle& bundle);
};

struct RegionLogits {
    Matrix logits; // R x C
};

struct DenseLogits {
    int classes = 0;
    Grid size;
    std::vector<float> logits;   // C x H x W
    std::vector<int> label_map;  // H x W
    std::vector<float> coverage; // H x W
};

class ZeroTokenError : public std::runtime_error {
  public:
    explicit ZeroTokenError(int region_id);
    [[nodiscard]] int region_id() const { return region_id_; }

  private:
    int region_id_;
};

RegionLogits region_logits(const RegionTokens& tokens, const LabelSet& labels);

DenseLogits dense_prediction(const RegionLogits& logits, std::span<const SoftMask> masks, int ignore_index);

/// Best-matching region's box snapped to the proposal it overlaps most; the bare region box when
/// nothing overlaps or no proposals are given.
Box refer_select(const RegionTokens& tokens, std::span<const SoftMask> masks, std::span<const float> query,
                 std::span<const Box> proposals);

/// Union (element-wise max) of the regions closer to `query` than to `contrast`.
SoftMask ground_select(const RegionTokens& tokens, std::span<const SoftMask> masks, std::span<const float> query,
                       std::span<const float> contrast, Grid image_size);

/// Substitutes `{query}` in `templ`; templates without the placeholder are returned as is.
std::string contrast_query(std::string_view templ, std::string_view query);

} // namespace textregion
