#include "fieldseg/prompting.hpp"

#include <cmath>
#include <deque>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace fieldseg::prompting {

int64_t BinaryMask::foreground_count() const {
    int64_t n = 0;
    for (uint8_t v : data) n += v ? 1 : 0;
    return n;
}

void MultiPromptConfig::validate() const {
    if (positives < 1 || negatives < 1) {
        throw std::invalid_argument("MultiPromptConfig: point counts must be >= 1");
    }
    if (min_band_px < 1) {
        throw std::invalid_argument("MultiPromptConfig: band width must be >= 1 pixel");
    }
    if (band_diameter_frac < 0.0) {
        throw std::invalid_argument("MultiPromptConfig: band fraction must be >= 0");
    }
}

namespace {
PromptPoint pixel_center(int idx, int width, PointLabel label) {
    PromptPoint p;
    p.x = static_cast<float>(idx % width) + 0.5f;
    p.y = static_cast<float>(idx / width) + 0.5f;
    p.label = label;
    return p;
}

void check_mask(const BinaryMask& mask) {
    if (mask.width <= 0 || mask.height <= 0 ||
        mask.data.size() != static_cast<size_t>(mask.width) * mask.height) {
        throw std::invalid_argument("BinaryMask: inconsistent dimensions");
    }
}

// pick k indices from pool; without replacement when possible
std::vector<int> draw(const std::vector<int>& pool, int k, std::mt19937& rng, bool& fell_back) {
    std::vector<int> out;
    out.reserve(static_cast<size_t>(k));
    if (static_cast<int>(pool.size()) >= k) {
        std::vector<int> idx(pool.size());
        for (size_t i = 0; i < pool.size(); ++i) idx[i] = static_cast<int>(i);
        for (int i = 0; i < k; ++i) {  // partial Fisher-Yates
            std::uniform_int_distribution<int> d(i, static_cast<int>(idx.size()) - 1);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(d(rng))]);
            out.push_back(pool[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
        }
    } else {
        fell_back = true;
        std::uniform_int_distribution<size_t> d(0, pool.size() - 1);
        for (int i = 0; i < k; ++i) out.push_back(pool[d(rng)]);
    }
    return out;
}
}  // namespace

PromptSet sample_single_positive(const BinaryMask& mask, std::mt19937& rng) {
    check_mask(mask);
    std::vector<int> fg;
    for (size_t i = 0; i < mask.data.size(); ++i) {
        if (mask.data[i]) fg.push_back(static_cast<int>(i));
    }
    if (fg.empty()) throw std::invalid_argument("sample_single_positive: empty mask");
    std::uniform_int_distribution<size_t> d(0, fg.size() - 1);
    PromptSet out;
    out.points.push_back(pixel_center(fg[d(rng)], mask.width, PointLabel::positive));
    return out;
}

std::vector<int> distance_to_boundary(const BinaryMask& mask) {
    check_mask(mask);
    const int w = mask.width, h = mask.height;
    const int n = w * h;
    // per class: multi-source BFS (8-connected) from the opposite class
    auto bfs = [&](bool from_fg) {
        std::vector<int> dist(static_cast<size_t>(n), std::numeric_limits<int>::max());
        std::deque<int> q;
        for (int i = 0; i < n; ++i) {
            if ((mask.data[static_cast<size_t>(i)] != 0) == from_fg) {
                dist[static_cast<size_t>(i)] = 0;
                q.push_back(i);
            }
        }
        while (!q.empty()) {
            int cur = q.front();
            q.pop_front();
            int cy = cur / w, cx = cur % w;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    int ny = cy + dy, nx = cx + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    int ni = ny * w + nx;
                    if (dist[static_cast<size_t>(ni)] > dist[static_cast<size_t>(cur)] + 1) {
                        dist[static_cast<size_t>(ni)] = dist[static_cast<size_t>(cur)] + 1;
                        q.push_back(ni);
                    }
                }
            }
        }
        return dist;
    };
    std::vector<int> to_fg = bfs(true);
    std::vector<int> to_bg = bfs(false);
    std::vector<int> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        out[static_cast<size_t>(i)] =
            mask.data[static_cast<size_t>(i)] ? to_bg[static_cast<size_t>(i)]
                                              : to_fg[static_cast<size_t>(i)];
    }
    return out;
}

PromptSet sample_multi(const BinaryMask& mask, std::mt19937& rng, const MultiPromptConfig& cfg) {
    check_mask(mask);
    cfg.validate();
    const int64_t area = mask.foreground_count();
    if (area == 0) throw std::invalid_argument("sample_multi: empty mask");
    const int64_t total = static_cast<int64_t>(mask.data.size());
    if (area == total) {
        throw std::invalid_argument("sample_multi: fully-foreground mask, no negatives possible");
    }

    const double equiv_diameter = 2.0 * std::sqrt(static_cast<double>(area) / std::numbers::pi);
    const int band = std::max(cfg.min_band_px,
                              static_cast<int>(std::ceil(cfg.band_diameter_frac * equiv_diameter)));

    const std::vector<int> dist = distance_to_boundary(mask);
    std::vector<int> pos_pool, neg_pool;
    for (size_t i = 0; i < mask.data.size(); ++i) {
        if (dist[i] > band) continue;
        (mask.data[i] ? pos_pool : neg_pool).push_back(static_cast<int>(i));
    }
    // both classes touch the boundary, so the pools cannot be empty here
    PromptSet out;
    bool fell_back = false;
    for (int i : draw(pos_pool, cfg.positives, rng, fell_back)) {
        out.points.push_back(pixel_center(i, mask.width, PointLabel::positive));
    }
    for (int i : draw(neg_pool, cfg.negatives, rng, fell_back)) {
        out.points.push_back(pixel_center(i, mask.width, PointLabel::negative));
    }
    out.fallback_used = fell_back;
    return out;
}

PromptSet grid_prompts(int image_size, int n_per_side) {
    if (image_size < 1) throw std::invalid_argument("grid_prompts: bad image size");
    if (n_per_side < 1) throw std::invalid_argument("grid_prompts: n_per_side must be >= 1");
    const float step = static_cast<float>(image_size) / static_cast<float>(n_per_side);
    PromptSet out;
    out.points.reserve(static_cast<size_t>(n_per_side) * n_per_side);
    for (int i = 0; i < n_per_side; ++i) {
        for (int j = 0; j < n_per_side; ++j) {
            PromptPoint p;
            p.x = (static_cast<float>(j) + 0.5f) * step;
            p.y = (static_cast<float>(i) + 0.5f) * step;
            p.label = PointLabel::positive;
            out.points.push_back(p);
        }
    }
    return out;
}

}  // namespace fieldseg::prompting
