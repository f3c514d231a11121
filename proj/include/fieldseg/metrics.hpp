#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "fieldseg/prompting.hpp"

namespace fieldseg::metrics {

using prompting::BinaryMask;

/// |a ∩ b| / |a ∪ b|; defined as 1.0 when both masks are empty.
double mask_iou(const BinaryMask& a, const BinaryMask& b);

struct Detection {
    BinaryMask mask;
    double score = 0.0;
    int tie_break = 0;  // insertion order, breaks equal-score ties deterministically
};

/// Per-image matching outcome. tp + fn == number of ground-truth instances.
struct MatchResult {
    int tp = 0;
    int fp = 0;
    int fn = 0;
    std::vector<double> matched_ious;
    // one entry per prediction, in input order: (score, counted as true positive)
    std::vector<std::pair<double, bool>> scored;
};

/// Greedy one-to-one matching in score order: each prediction claims the
/// unclaimed gt with the highest IoU >= iou_thresh (ties -> lowest gt index),
/// otherwise counts as a false positive. Input must be sorted by descending
/// score (equal scores resolved by tie_break).
MatchResult match_instances(const std::vector<Detection>& preds, const std::vector<BinaryMask>& gts,
                            double iou_thresh = 0.5);

struct PooledPrediction {
    double score = 0.0;
    bool is_tp = false;
    int image = 0;
    int index = 0;
};

/// Area under the precision-recall curve over the pooled predictions, with
/// monotone precision interpolation (all-point). Throws when n_gt == 0.
double average_precision(std::vector<PooledPrediction> preds, int64_t n_gt);

struct EvalOptions {
    double iou_thresh = 0.5;
    int max_detections = 150;          // recall cap per image
    bool coco_average_recall = false;  // average recall over IoU 0.50:0.05:0.95
};

struct EvalReport {
    double map50 = 0.0;
    double mar150 = 0.0;
    struct PerImage {
        int tp = 0, fp = 0, fn = 0;
        int n_gt = 0;
        std::vector<double> matched_ious;
    };
    std::vector<PerImage> per_image;
    int64_t n_images = 0;
    int64_t n_gt = 0;
    int64_t n_pred = 0;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    std::string summary_table() const;
};

/// Streaming dataset evaluation: feed one image at a time, then finalize.
class EvalAccumulator {
public:
    explicit EvalAccumulator(EvalOptions opts = {});
    void add_image(const std::vector<Detection>& preds_sorted, const std::vector<BinaryMask>& gts);
    EvalReport finalize() const;

private:
    EvalOptions opts_;
    std::vector<PooledPrediction> pooled_;
    std::vector<EvalReport::PerImage> per_image_;
    std::vector<double> per_image_recall_;  // NaN for images without gt
    int64_t n_gt_ = 0;
    int64_t n_pred_ = 0;
};

}  // namespace fieldseg::metrics
