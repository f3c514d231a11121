#pragma once

// Shared helpers and independent reference implementations (oracles) for the
// test suites. Oracles deliberately re-derive results with plain loops so
// they stay independent of the library code paths they check.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fieldseg/prompting.hpp"
#include "fieldseg/tensor.hpp"

namespace testsupport {

using fieldseg::ag::Tensor;
using fieldseg::prompting::BinaryMask;

inline Tensor random_tensor(std::vector<int64_t> shape, std::mt19937& rng, float stddev = 1.0f) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> d(0.0f, stddev);
    for (auto& v : t.vec()) v = d(rng);
    return t;
}

inline Tensor random_image(int size, std::mt19937& rng) {
    Tensor t({size, size, 3});
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (auto& v : t.vec()) v = d(rng);
    return t;
}

// plain nested-loop matrix product: oracle for anything matmul-shaped
inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor out({a.dim(0), b.dim(1)});
    for (int64_t i = 0; i < a.dim(0); ++i) {
        for (int64_t j = 0; j < b.dim(1); ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < a.dim(1); ++k) acc += a.at(i, k) * b.at(k, j);
            out.at(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

inline Tensor naive_matvec(const Tensor& m, const Tensor& x) {
    Tensor out({m.dim(0)});
    for (int64_t i = 0; i < m.dim(0); ++i) {
        double acc = 0.0;
        for (int64_t k = 0; k < m.dim(1); ++k) acc += m.at(i, k) * x[k];
        out[i] = static_cast<float>(acc);
    }
    return out;
}

inline BinaryMask make_mask(int width, int height, std::initializer_list<int> fg_indices = {}) {
    BinaryMask m;
    m.width = width;
    m.height = height;
    m.data.assign(static_cast<size_t>(width) * height, 0);
    for (int i : fg_indices) m.data[static_cast<size_t>(i)] = 1;
    return m;
}

inline BinaryMask rect_mask(int width, int height, int x0, int y0, int x1, int y1) {
    BinaryMask m = make_mask(width, height);
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) m.data[static_cast<size_t>(y) * width + x] = 1;
    }
    return m;
}

inline BinaryMask random_mask(int width, int height, std::mt19937& rng, double p = 0.3) {
    BinaryMask m = make_mask(width, height);
    std::bernoulli_distribution d(p);
    for (auto& v : m.data) v = d(rng) ? 1 : 0;
    return m;
}

// independent IoU used by oracles
inline double ref_iou(const BinaryMask& a, const BinaryMask& b) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] && b.data[i]) ++inter;
        if (a.data[i] || b.data[i]) ++uni;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace testsupport
