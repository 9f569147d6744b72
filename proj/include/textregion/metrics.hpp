#pragma once

#include "textregion/mask_ops.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace textregion {

class EmptyEvaluationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Pixel confusion counts, rows = ground truth, cols = prediction.
///
/// A pixel with a valid ground-truth label but no prediction (the prediction is the ignore
/// index, i.e. no region covered it) is tallied in `unpredicted[gt]`: it is a miss for the
/// ground-truth class and a hit for no class.
class ConfusionMatrix {
  public:
    explicit ConfusionMatrix(int classes = 0);

    [[nodiscard]] int classes() const { return classes_; }
    [[nodiscard]] std::uint64_t count(int gt, int pred) const {
        return counts_[static_cast<std::size_t>(gt) * classes_ + pred];
    }
    [[nodiscard]] std::uint64_t unpredicted(int gt) const { return unpredicted_[static_cast<std::size_t>(gt)]; }
    [[nodiscard]] std::uint64_t ignored() const { return ignored_; }
    [[nodiscard]] std::uint64_t scored() const { return scored_; }
    [[nodiscard]] std::uint64_t total() const;

    void add(int gt, int pred, int ignore_index);
    void merge(const ConfusionMatrix& other);

    bool operator==(const ConfusionMatrix&) const = default;

  private:
    int classes_ = 0;
    std::vector<std::uint64_t> counts_;
    std::vector<std::uint64_t> unpredicted_;
    std::uint64_t ignored_ = 0;
    std::uint64_t scored_ = 0;
};

void accumulate_confusion(ConfusionMatrix& cm, std::span<const int> pred, std::span<const int> gt,
                          int ignore_index);

struct MiouResult {
    std::vector<std::optional<double>> per_class; // absent: class never in ground truth nor prediction
    double mean = 0.0;
};

MiouResult miou(const ConfusionMatrix& cm);

double rec_accuracy(std::span<const std::pair<Box, Box>> pairs);

struct GroundingItem {
    SoftMask pred;
    SoftMask gt;
    std::optional<SoftMask> ignore;
};

class GroundingTally {
  public:
    void add(const SoftMask& pred, const SoftMask& gt, const SoftMask* ignore = nullptr);
    void merge(const GroundingTally& other);

    [[nodiscard]] const std::vector<double>& per_image_ious() const { return ious_; }
    [[nodiscard]] std::uint64_t cum_intersection() const { return intersection_; }
    [[nodiscard]] std::uint64_t cum_union() const { return union_; }

    /// Mean per-image IoU; throws EmptyEvaluationError when nothing was added.
    [[nodiscard]] double giou() const;
    /// Cumulative intersection over cumulative union (1 when every union is empty).
    [[nodiscard]] double ciou() const;

  private:
    std::vector<double> ious_;
    std::uint64_t intersection_ = 0;
    std::uint64_t union_ = 0;
};

struct GroundingScores {
    double giou = 0.0;
    double ciou = 0.0;
};

GroundingScores grounding_scores(std::span<const GroundingItem> items);

} // namespace textregion
