#include "textregion/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace textregion {

namespace {

constexpr double kUnitTolerance = 1e-4;

void check_unit(std::span<const float> v, const char* what) {
    if (std::abs(norm(v) - 1.0) > kUnitTolerance) {
        throw std::invalid_argument(std::string(what) + " embedding is not unit-norm");
    }
}

void check_aligned(const RegionTokens& tokens, std::span<const SoftMask> masks, const char* op) {
    if (tokens.tokens.rows() != masks.size()) {
        throw std::invalid_argument(std::string(op) + ": " + std::to_string(tokens.tokens.rows()) +
                                    " tokens for " + std::to_string(masks.size()) + " masks");
    }
}

} // namespace

ZeroTokenError::ZeroTokenError(int region_id)
    : std::runtime_error("region " + std::to_string(region_id) + " has a zero-norm token"), region_id_(region_id) {}

void LabelSet::validate() const {
    if (names.empty()) {
        throw std::invalid_argument("label set is empty");
    }
    if (embeddings.rows() != names.size()) {
        throw std::invalid_argument("label set has " + std::to_string(names.size()) + " names but " +
                                    std::to_string(embeddings.rows()) + " embeddings");
    }
    if (!(std::isfinite(temperature) && temperature > 0.0)) {
        throw std::invalid_argument("label temperature must be > 0");
    }
    for (std::size_t c = 0; c < embeddings.rows(); ++c) {
        if (std::abs(norm(embeddings.row(c)) - 1.0) > kUnitTolerance) {
            throw std::invalid_argument("label '" + names[c] + "' embedding is not unit-norm");
        }
    }
}

std::size_t LabelSet::index_of(std::string_view name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
        throw std::out_of_range("no label named '" + std::string(name) + "'");
    }
    return static_cast<std::size_t>(it - names.begin());
}

LabelSet LabelSet::from_bundle(const FeatureBundle& bundle) {
    if (!bundle.has("labels")) {
        throw FormatError(FormatError::Kind::invariant, "bundle '" + bundle.model_id + "' has no labels tensor");
    }
    LabelSet set{bundle.label_names, bundle.tensor("labels").to_matrix(), bundle.temperature};
    try {
        set.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatError::Kind::invariant, e.what());
    }
    return set;
}

RegionLogits region_logits(const RegionTokens& tokens, const LabelSet& labels) {
    if (tokens.tokens.rows() > 0 && tokens.tokens.cols() != labels.dim()) {
        throw std::invalid_argument("region_logits: token dim " + std::to_string(tokens.tokens.cols()) +
                                    " != label dim " + std::to_string(labels.dim()));
    }
    const std::size_t regions = tokens.tokens.rows();
    RegionLogits out{Matrix(regions, labels.size())};
    for (std::size_t r = 0; r < regions; ++r) {
        const auto y = tokens.tokens.row(r);
        const double len = norm(y);
        if (len == 0.0) {
            throw ZeroTokenError(r < tokens.region_ids.size() ? tokens.region_ids[r] : static_cast<int>(r));
        }
        for (std::size_t c = 0; c < labels.size(); ++c) {
            const auto e = labels.embeddings.row(c);
            const double cos = std::clamp(dot(y, e) / (len * norm(e)), -1.0, 1.0);
            out.logits(r, c) = static_cast<float>(labels.temperature * cos);
        }
    }
    return out;
}

DenseLogits dense_prediction(const RegionLogits& logits, std::span<const SoftMask> masks, int ignore_index) {
    if (logits.logits.rows() != masks.size()) {
        throw std::invalid_argument("dense_prediction: " + std::to_string(logits.logits.rows()) +
                                    " region logits for " + std::to_string(masks.size()) + " masks");
    }
    if (masks.empty()) {
        throw std::invalid_argument("dense_prediction: no masks");
    }
    DenseLogits out;
    out.classes = static_cast<int>(logits.logits.cols());
    out.size = masks.front().size;
    const std::size_t area = out.size.area();
    const std::size_t classes = logits.logits.cols();
    std::vector<double> acc(classes * area, 0.0);
    std::vector<double> cover(area, 0.0);
    for (std::size_t r = 0; r < masks.size(); ++r) {
        if (masks[r].size != out.size) {
            throw std::invalid_argument("dense_prediction: masks differ in size");
        }
        const auto row = logits.logits.row(r);
        for (std::size_t p = 0; p < area; ++p) {
            const double m = masks[r].values[p];
            if (m == 0.0) {
                continue;
            }
            cover[p] += m;
            for (std::size_t c = 0; c < classes; ++c) {
                acc[c * area + p] += static_cast<double>(row[c]) * m;
            }
        }
    }
    out.logits.resize(acc.size());
    std::transform(acc.begin(), acc.end(), out.logits.begin(), [](double v) { return static_cast<float>(v); });
    out.coverage.resize(area);
    std::transform(cover.begin(), cover.end(), out.coverage.begin(), [](double v) { return static_cast<float>(v); });
    out.label_map.assign(area, ignore_index);
    for (std::size_t p = 0; p < area; ++p) {
        if (cover[p] <= 0.0) {
            continue;
        }
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
            if (acc[c * area + p] > acc[best * area + p]) {
                best = c;
            }
        }
        out.label_map[p] = static_cast<int>(best);
    }
    return out;
}

Box refer_select(const RegionTokens& tokens, std::span<const SoftMask> masks, std::span<const float> query,
                 std::span<const Box> proposals) {
    check_aligned(tokens, masks, "refer_select");
    if (masks.empty()) {
        throw std::invalid_argument("refer_select: empty token set");
    }
    check_unit(query, "query");
    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t r = 0; r < masks.size(); ++r) {
        const double c = cosine(tokens.tokens.row(r), query);
        if (c > best_cos) {
            best_cos = c;
            best = r;
        }
    }
    const Box region_box = mask_to_box(masks[best]);
    std::size_t best_proposal = 0;
    double best_iou = 0.0;
    for (std::size_t k = 0; k < proposals.size(); ++k) {
        const double iou = box_iou(region_box, proposals[k]);
        if (iou > best_iou) {
            best_iou = iou;
            best_proposal = k;
        }
    }
    return best_iou > 0.0 ? proposals[best_proposal] : region_box;
}

SoftMask ground_select(const RegionTokens& tokens, std::span<const SoftMask> masks, std::span<const float> query,
                       std::span<const float> contrast, Grid image_size) {
    check_aligned(tokens, masks, "ground_select");
    check_unit(query, "query");
    check_unit(contrast, "contrast");
    SoftMask out(0, image_size);
    for (std::size_t r = 0; r < masks.size(); ++r) {
        if (masks[r].size != image_size) {
            throw std::invalid_argument("ground_select: mask size differs from image size");
        }
        const auto y = tokens.tokens.row(r);
        if (cosine(y, query) <= cosine(y, contrast)) {
            continue;
        }
        for (std::size_t p = 0; p < out.values.size(); ++p) {
            out.values[p] = std::max(out.values[p], masks[r].values[p]);
        }
    }
    return out;
}

std::string contrast_query(std::string_view templ, std::string_view query) {
    static constexpr std::string_view kPlaceholder = "{query}";
    std::string out(templ);
    const auto at = out.find(kPlaceholder);
    if (at != std::string::npos) {
        out.replace(at, kPlaceholder.size(), query);
    }
    return out;
}

} // namespace textregion
