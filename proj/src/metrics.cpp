#include "textregion/metrics.hpp"

#include <numeric>
#include <string>

namespace textregion {

ConfusionMatrix::ConfusionMatrix(int classes)
    : classes_(classes),
      counts_(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0),
      unpredicted_(static_cast<std::size_t>(classes), 0) {
    if (classes < 0) {
        throw std::invalid_argument("ConfusionMatrix: negative class count");
    }
}

std::uint64_t ConfusionMatrix::total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}) +
           std::accumulate(unpredicted_.begin(), unpredicted_.end(), std::uint64_t{0}) + ignored_;
}

void ConfusionMatrix::add(int gt, int pred, int ignore_index) {
    ++scored_;
    if (gt == ignore_index) {
        ++ignored_;
        return;
    }
    if (gt < 0 || gt >= classes_) {
        throw std::out_of_range("ground-truth label " + std::to_string(gt) + " outside [0, " +
                                std::to_string(classes_) + ")");
    }
    if (pred == ignore_index) {
        ++unpredicted_[static_cast<std::size_t>(gt)];
        return;
    }
    if (pred < 0 || pred >= classes_) {
        throw std::out_of_range("predicted label " + std::to_string(pred) + " outside [0, " +
                                std::to_string(classes_) + ")");
    }
    ++counts_[static_cast<std::size_t>(gt) * classes_ + pred];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) {
        throw std::invalid_argument("ConfusionMatrix::merge: class counts differ");
    }
    for (std::size_t k = 0; k < counts_.size(); ++k) {
        counts_[k] += other.counts_[k];
    }
    for (std::size_t k = 0; k < unpredicted_.size(); ++k) {
        unpredicted_[k] += other.unpredicted_[k];
    }
    ignored_ += other.ignored_;
    scored_ += other.scored_;
}

void accumulate_confusion(ConfusionMatrix& cm, std::span<const int> pred, std::span<const int> gt,
                          int ignore_index) {
    if (pred.size() != gt.size()) {
        throw std::invalid_argument("accumulate_confusion: prediction and ground truth differ in size");
    }
    // Validate first so a bad map leaves the matrix untouched.
    ConfusionMatrix delta(cm.classes());
    for (std::size_t p = 0; p < gt.size(); ++p) {
        delta.add(gt[p], pred[p], ignore_index);
    }
    cm.merge(delta);
    if (cm.total() != cm.scored()) {
        throw std::logic_error("confusion matrix totals not conserved");
    }
}

MiouResult miou(const ConfusionMatrix& cm) {
    const int classes = cm.classes();
    std::vector<std::uint64_t> row(static_cast<std::size_t>(classes), 0);
    std::vector<std::uint64_t> col(static_cast<std::size_t>(classes), 0);
    for (int g = 0; g < classes; ++g) {
        row[static_cast<std::size_t>(g)] += cm.unpredicted(g);
        for (int p = 0; p < classes; ++p) {
            row[static_cast<std::size_t>(g)] += cm.count(g, p);
            col[static_cast<std::size_t>(p)] += cm.count(g, p);
        }
    }
    MiouResult out;
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < classes; ++c) {
        const std::uint64_t tp = cm.count(c, c);
        const std::uint64_t denom = row[static_cast<std::size_t>(c)] + col[static_cast<std::size_t>(c)] - tp;
        if (denom == 0) {
            out.per_class.emplace_back(std::nullopt);
            continue;
        }
        const double iou = static_cast<double>(tp) / static_cast<double>(denom);
        out.per_class.emplace_back(iou);
        sum += iou;
        ++present;
    }
    if (present == 0) {
        throw EmptyEvaluationError("mIoU: no class present in ground truth or prediction");
    }
    out.mean = sum / present;
    return out;
}

double rec_accuracy(std::span<const std::pair<Box, Box>> pairs) {
    if (pairs.empty()) {
        throw EmptyEvaluationError("ReC accuracy: no pairs");
    }
    std::size_t correct = 0;
    for (const auto& [pred, gt] : pairs) {
        correct += box_iou(pred, gt) >= 0.5 ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

void GroundingTally::add(const SoftMask& pred, const SoftMask& gt, const SoftMask* ignore) {
    if (pred.size != gt.size || (ignore != nullptr && ignore->size != gt.size)) {
        throw std::invalid_argument("grounding: dimension mismatch");
    }
    std::uint64_t inter = 0;
    std::uint64_t uni = 0;
    for (std::size_t p = 0; p < gt.values.size(); ++p) {
        if (ignore != nullptr && ignore->values[p] >= kBinaryThreshold) {
            continue;
        }
        const bool in_pred = pred.values[p] >= kBinaryThreshold;
        const bool in_gt = gt.values[p] >= kBinaryThreshold;
        inter += (in_pred && in_gt) ? 1 : 0;
        uni += (in_pred || in_gt) ? 1 : 0;
    }
    ious_.push_back(uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni));
    intersection_ += inter;
    union_ += uni;
}

void GroundingTally::merge(const GroundingTally& other) {
    ious_.insert(ious_.end(), other.ious_.begin(), other.ious_.end());
    intersection_ += other.intersection_;
    union_ += other.union_;
}

double GroundingTally::giou() const {
    if (ious_.empty()) {
        throw EmptyEvaluationError("gIoU: no items");
    }
    return std::accumulate(ious_.begin(), ious_.end(), 0.0) / static_cast<double>(ious_.size());
}

double GroundingTally::ciou() const {
    if (ious_.empty()) {
        throw EmptyEvaluationError("cIoU: no items");
    }
    if (union_ == 0) {
        return 1.0;
    }
    return static_cast<double>(intersection_) / static_cast<double>(union_);
}

GroundingScores grounding_scores(std::span<const GroundingItem> items) {
    GroundingTally tally;
    for (const auto& item : items) {
        tally.add(item.pred, item.gt, item.ignore ? &*item.ignore : nullptr);
    }
    return {tally.giou(), tally.ciou()};
}

} // namespace textregion
