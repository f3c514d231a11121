#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace fieldseg::prompting {

enum class PointLabel { negative = 0, positive = 1 };

struct PromptPoint {
    float x = 0;  // pixel coordinates, pixel centers at integer + 0.5
    float y = 0;
    PointLabel label = PointLabel::positive;
};

struct PromptSet {
    std::vector<PromptPoint> points;
    std::optional<int> instance_id;
    bool fallback_used = false;  // multi-sampler degraded to uniform sampling
};

/// Binary mask view over an instance map or standalone buffer.
struct BinaryMask {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> data;  // 0/1, row-major

    uint8_t at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
    int64_t foreground_count() const;
};

struct MultiPromptConfig {
    int positives = 4;
    int negatives = 2;
    int min_band_px = 2;          // lower bound on the near-edge band width
    double band_diameter_frac = 0.05;  // band = max(min_band_px, frac * equivalent diameter)

    void validate() const;
};

/// One positive point, uniform over the mask's foreground pixels.
PromptSet sample_single_positive(const BinaryMask& mask, std::mt19937& rng);

/// 4 positive + 2 negative points sampled within a band around the mask
/// boundary. Falls back to sampling with replacement / uniform background
/// when the band is too small, setting PromptSet::fallback_used.
PromptSet sample_multi(const BinaryMask& mask, std::mt19937& rng,
                       const MultiPromptConfig& cfg = {});

/// n_per_side^2 positive points at the cell centers of an even lattice.
PromptSet grid_prompts(int image_size, int n_per_side = 32);

/// Chebyshev distance from each pixel to the nearest pixel of the opposite
/// class (multi-source BFS). Used for the near-edge band.
std::vector<int> distance_to_boundary(const BinaryMask& mask);

}  // namespace fieldseg::prompting
