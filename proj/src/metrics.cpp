#include "fieldseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fieldseg::metrics {

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    if (a.width != b.width || a.height != b.height) {
        throw std::invalid_argument("mask_iou: shape mismatch");
    }
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const bool av = a.data[i] != 0, bv = b.data[i] != 0;
        inter += (av && bv) ? 1 : 0;
        uni += (av || bv) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {
void require_sorted(const std::vector<Detection>& preds, const char* who) {
    for (size_t i = 1; i < preds.size(); ++i) {
        if (preds[i].score > preds[i - 1].score) {
            throw std::invalid_argument(std::string(who) +
                                        ": predictions must be sorted by descending score");
        }
    }
}
}  // namespace

MatchResult match_instances(const std::vector<Detection>& preds, const std::vector<BinaryMask>& gts,
                            double iou_thresh) {
    require_sorted(preds, "match_instances");
    MatchResult out;
    std::vector<bool> claimed(gts.size(), false);
    out.scored.reserve(preds.size());
    for (const auto& p : preds) {
        double best_iou = 0.0;
        int best_gt = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (claimed[g]) continue;
            double iou = mask_iou(p.mask, gts[g]);
            if (iou > best_iou) {  // strict: equal IoU keeps the lower gt index
                best_iou = iou;
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0 && best_iou >= iou_thresh) {
            claimed[static_cast<size_t>(best_gt)] = true;
            out.tp += 1;
            out.matched_ious.push_back(best_iou);
            out.scored.emplace_back(p.score, true);
        } else {
            out.fp += 1;
            out.scored.emplace_back(p.score, false);
        }
    }
    out.fn = static_cast<int>(gts.size()) - out.tp;
    return out;
}

double average_precision(std::vector<PooledPrediction> preds, int64_t n_gt) {
    if (n_gt <= 0) {
        throw std::invalid_argument("average_precision: no ground-truth instances in dataset");
    }
    std::sort(preds.begin(), preds.end(), [](const PooledPrediction& a, const PooledPrediction& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image != b.image) return a.image < b.image;
        return a.index < b.index;
    });
    const size_t n = preds.size();
    if (n == 0) return 0.0;

    // precision/recall after each prediction
    std::vector<double> precision(n), recall(n);
    int64_t tp = 0;
    for (size_t i = 0; i < n; ++i) {
        tp += preds[i].is_tp ? 1 : 0;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    // monotone envelope from the right
    for (size_t i = n - 1; i-- > 0;) {
        precision[i] = std::max(precision[i], precision[i + 1]);
    }
    double ap = 0.0, prev_recall = 0.0;
    for (size_t i = 0; i < n; ++i) {
        if (recall[i] > prev_recall) {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    return ap;
}

EvalAccumulator::EvalAccumulator(EvalOptions opts) : opts_(std::move(opts)) {}

void EvalAccumulator::add_image(const std::vector<Detection>& preds_sorted,
                                const std::vector<BinaryMask>& gts) {
    require_sorted(preds_sorted, "EvalAccumulator::add_image");
    const int image_idx = static_cast<int>(per_image_.size());

    // full matching feeds the AP pool and the per-image report
    MatchResult full = match_instances(preds_sorted, gts, opts_.iou_thresh);
    for (size_t i = 0; i < full.scored.size(); ++i) {
        pooled_.push_back({full.scored[i].first, full.scored[i].second, image_idx,
                           static_cast<int>(i)});
    }
    EvalReport::PerImage pi;
    pi.tp = full.tp;
    pi.fp = full.fp;
    pi.fn = full.fn;
    pi.n_gt = static_cast<int>(gts.size());
    pi.matched_ious = full.matched_ious;
    per_image_.push_back(std::move(pi));
    n_gt_ += static_cast<int64_t>(gts.size());
    n_pred_ += static_cast<int64_t>(preds_sorted.size());

    // recall uses the detection cap
    std::vector<Detection> capped = preds_sorted;
    if (static_cast<int>(capped.size()) > opts_.max_detections) {
        capped.resize(static_cast<size_t>(opts_.max_detections));
    }
    if (gts.empty()) {
        per_image_recall_.push_back(std::nan(""));
        return;
    }
    if (!opts_.coco_average_recall) {
        MatchResult m = match_instances(capped, gts, opts_.iou_thresh);
        per_image_recall_.push_back(static_cast<double>(m.tp) / static_cast<double>(gts.size()));
    } else {
        double acc = 0.0;
        int count = 0;
        for (double t = 0.50; t < 0.955; t += 0.05) {
            MatchResult m = match_instances(capped, gts, t);
            acc += static_cast<double>(m.tp) / static_cast<double>(gts.size());
            ++count;
        }
        per_image_recall_.push_back(acc / count);
    }
}

EvalReport EvalAccumulator::finalize() const {
    EvalReport r;
    r.map50 = average_precision(pooled_, n_gt_);
    double acc = 0.0;
    int64_t counted = 0;
    for (double v : per_image_recall_) {
        if (!std::isnan(v)) {
            acc += v;
            ++counted;
        }
    }
    r.mar150 = counted > 0 ? acc / static_cast<double>(counted) : 0.0;
    r.per_image = per_image_;
    r.n_images = static_cast<int64_t>(per_image_.size());
    r.n_gt = n_gt_;
    r.n_pred = n_pred_;
    return r;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["map50"] = map50;
    j["mar150"] = mar150;
    j["n_images"] = n_images;
    j["n_gt"] = n_gt;
    j["n_pred"] = n_pred;
    nlohmann::json imgs = nlohmann::json::array();
    for (const auto& pi : per_image) {
        imgs.push_back({{"tp", pi.tp},
                        {"fp", pi.fp},
                        {"fn", pi.fn},
                        {"n_gt", pi.n_gt},
                        {"matched_ious", pi.matched_ious}});
    }
    j["per_image"] = imgs;
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    r.map50 = j.at("map50").get<double>();
    r.mar150 = j.at("mar150").get<double>();
    r.n_images = j.at("n_images").get<int64_t>();
    r.n_gt = j.at("n_gt").get<int64_t>();
    r.n_pred = j.at("n_pred").get<int64_t>();
    for (const auto& pi : j.at("per_image")) {
        EvalReport::PerImage p;
        p.tp = pi.at("tp").get<int>();
        p.fp = pi.at("fp").get<int>();
        p.fn = pi.at("fn").get<int>();
        p.n_gt = pi.at("n_gt").get<int>();
        p.matched_ious = pi.at("matched_ious").get<std::vector<double>>();
        r.per_image.push_back(std::move(p));
    }
    return r;
}

std::string EvalReport::summary_table() const {
    std::ostringstream os;
    os << "metric      value\n";
    os << "---------   -----\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "mAP50       %.4f\n", map50);
    os << buf;
    std::snprintf(buf, sizeof(buf), "mAR150      %.4f\n", mar150);
    os << buf;
    os << "images      " << n_images << "\n";
    os << "gt          " << n_gt << "\n";
    os << "pred        " << n_pred << "\n";
    return os.str();
}

}  // namespace fieldseg::metrics
