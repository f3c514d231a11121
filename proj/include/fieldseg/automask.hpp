#pragma once

#include <array>
#include <vector>

#include <json.hpp>

#include "fieldseg/prompting.hpp"
#include "fieldseg/segmenter.hpp"

namespace fieldseg::automask {

using prompting::BinaryMask;

struct PredictedInstance {
    BinaryMask mask;             // non-empty after filtering
    double score = 0.0;          // predicted IoU of the chosen candidate
    std::array<float, 2> source_prompt{0, 0};
};

struct GenerateOptions {
    int grid_n = 32;
    double conf_thresh = 0.88;
    double nms_iou_thresh = 0.7;
    int prompt_batch = 64;  // grid points decoded per batch, bounds memory
};

/// Full automatic pipeline over one image: grid prompting, best-of-three
/// selection per point, empty-mask drop, confidence filter, greedy NMS.
/// Result is sorted by descending score; an empty result is valid.
std::vector<PredictedInstance> generate(const Segmenter& model, const ag::Tensor& image,
                                        const GenerateOptions& opts = {});

/// Same pipeline on precomputed image tokens (reuse across parameter sweeps).
std::vector<PredictedInstance> generate_from_tokens(const Segmenter& model,
                                                    const ImageTokens& tokens,
                                                    const GenerateOptions& opts = {});

/// Greedy keep-highest suppression. Input must be sorted by descending score;
/// an instance survives iff its IoU with every previously kept mask is below
/// iou_thresh.
std::vector<PredictedInstance> mask_nms(const std::vector<PredictedInstance>& sorted,
                                        double iou_thresh);

/// Column-major run-length encoding, first count covers background.
std::vector<int64_t> rle_encode(const BinaryMask& mask);
BinaryMask rle_decode(const std::vector<int64_t>& counts, int width, int height);

/// Per-tile prediction record: RLE masks + scores (+ georeference when known).
nlohmann::json predictions_to_json(const std::vector<PredictedInstance>& instances,
                                   const nlohmann::json& georef = nlohmann::json());

}  // namespace fieldseg::automask
