#include "fieldseg/automask.hpp"

#include <algorithm>
#include <stdexcept>

#include "fieldseg/metrics.hpp"

namespace fieldseg::automask {

namespace {
BinaryMask binarize(const ag::Tensor& logits) {
    BinaryMask m;
    m.height = static_cast<int>(logits.dim(0));
    m.width = static_cast<int>(logits.dim(1));
    m.data.resize(logits.vec().size());
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = logits[static_cast<int64_t>(i)] > 0;
    return m;
}
}  // namespace

std::vector<PredictedInstance> generate_from_tokens(const Segmenter& model,
                                                    const ImageTokens& tokens,
                                                    const GenerateOptions& opts) {
    if (opts.grid_n < 1 || opts.prompt_batch < 1) {
        throw std::invalid_argument("generate: grid_n and prompt_batch must be >= 1");
    }
    ag::NoGradGuard ng;
    const prompting::PromptSet grid =
        prompting::grid_prompts(model.config().image_size, opts.grid_n);

    std::vector<PredictedInstance> pool;
    size_t cursor = 0;
    while (cursor < grid.points.size()) {
        const size_t end = std::min(cursor + static_cast<size_t>(opts.prompt_batch),
                                    grid.points.size());
        std::vector<PromptEmbedding> batch;
        batch.reserve(end - cursor);
        for (size_t i = cursor; i < end; ++i) {
            prompting::PromptSet single;
            single.points.push_back(grid.points[i]);
            batch.push_back(model.encode_prompts(single));
        }
        std::vector<MaskOutput> outs = model.decode_masks(tokens, batch);
        for (size_t i = 0; i < outs.size(); ++i) {
            const auto& mo = outs[i];
            // only the highest-scoring of the three candidates enters the pool
            int best = 0;
            for (int m = 1; m < 3; ++m) {
                if (mo.iou_scores[static_cast<size_t>(m)] >
                    mo.iou_scores[static_cast<size_t>(best)]) {
                    best = m;
                }
            }
            BinaryMask mask = binarize(mo.masks[static_cast<size_t>(best)]);
            if (mask.foreground_count() == 0) continue;  // empty candidates never reach NMS
            const double score = mo.iou_scores[static_cast<size_t>(best)];
            if (score < opts.conf_thresh) continue;
            const auto& pt = grid.points[cursor + i];
            pool.push_back({std::move(mask), score, {pt.x, pt.y}});
        }
        cursor = end;
    }

    std::stable_sort(pool.begin(), pool.end(),
                     [](const PredictedInstance& a, const PredictedInstance& b) {
                         return a.score > b.score;
                     });
    return mask_nms(pool, opts.nms_iou_thresh);
}

std::vector<PredictedInstance> generate(const Segmenter& model, const ag::Tensor& image,
                                        const GenerateOptions& opts) {
    ag::NoGradGuard ng;
    return generate_from_tokens(model, model.encode_image(image), opts);
}

std::vector<PredictedInstance> mask_nms(const std::vector<PredictedInstance>& sorted,
                                        double iou_thresh) {
    for (size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i].score > sorted[i - 1].score) {
            throw std::invalid_argument("mask_nms: input must be sorted by descending score");
        }
    }
    std::vector<PredictedInstance> kept;
    for (const auto& cand : sorted) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (metrics::mask_iou(cand.mask, k.mask) >= iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

std::vector<int64_t> rle_encode(const BinaryMask& mask) {
    std::vector<int64_t> counts;
    int64_t run = 0;
    uint8_t current = 0;  // first run counts background
    for (int x = 0; x < mask.width; ++x) {
        for (int y = 0; y < mask.height; ++y) {
            uint8_t v = mask.at(x, y) ? 1 : 0;
            if (v == current) {
                ++run;
            } else {
                counts.push_back(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push_back(run);
    return counts;
}

BinaryMask rle_decode(const std::vector<int64_t>& counts, int width, int height) {
    BinaryMask m;
    m.width = width;
    m.height = height;
    m.data.assign(static_cast<size_t>(width) * height, 0);
    int64_t pos = 0;
    uint8_t current = 0;
    for (int64_t c : counts) {
        if (c < 0 || pos + c > static_cast<int64_t>(m.data.size())) {
            throw std::invalid_argument("rle_decode: counts exceed mask size");
        }
        if (current) {
            for (int64_t i = 0; i < c; ++i) {
                int64_t p = pos + i;
                int x = static_cast<int>(p / height);
                int y = static_cast<int>(p % height);
                m.data[static_cast<size_t>(y) * width + x] = 1;
            }
        }
        pos += c;
        current = current ? 0 : 1;
    }
    if (pos != static_cast<int64_t>(m.data.size())) {
        throw std::invalid_argument("rle_decode: counts do not cover the mask");
    }
    return m;
}

nlohmann::json predictions_to_json(const std::vector<PredictedInstance>& instances,
                                   const nlohmann::json& georef) {
    nlohmann::json j;
    j["schema"] = "fieldseg-predictions/1";
    if (!georef.is_null()) j["georef"] = georef;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& inst : instances) {
        arr.push_back({{"score", inst.score},
                       {"width", inst.mask.width},
                       {"height", inst.mask.height},
                       {"rle", rle_encode(inst.mask)},
                       {"prompt", {inst.source_prompt[0], inst.source_prompt[1]}}});
    }
    j["instances"] = arr;
    return j;
}

}  // namespace fieldseg::automask
