// Independent reference implementations used as test oracles. These must stay
// decoupled from the library code paths they check.
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

// Smallest k in [0, n] with k >= ratio*n, treating products within 1e-9 of an
// integer as that integer.
inline int mask_count(double ratio, int n) {
    for (int k = 0; k <= n; ++k) {
        if (static_cast<double>(k) + 1e-9 >= ratio * static_cast<double>(n)) return k;
    }
    return n;
}

// Sort-and-slice reference for attention-guided masking. Returns the masked
// set and hint set for ranking by descending score, ties by ascending index.
struct AttentionMaskRef {
    std::vector<int> masked;
    std::vector<int> hints;
};

inline AttentionMaskRef attention_mask_ref(const std::vector<double>& satt, double r, double s) {
    const int n = static_cast<int>(satt.size());
    std::vector<int> order(satt.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (satt[static_cast<size_t>(a)] != satt[static_cast<size_t>(b)])
            return satt[static_cast<size_t>(a)] > satt[static_cast<size_t>(b)];
        return a < b;
    });
    const int n_cand = mask_count(r, n);
    const int n_hint = std::min(mask_count(s, n), n_cand);
    AttentionMaskRef ref;
    ref.hints.assign(order.begin(), order.begin() + n_hint);
    ref.masked.assign(order.begin() + n_hint, order.begin() + n_cand);
    std::sort(ref.hints.begin(), ref.hints.end());
    std::sort(ref.masked.begin(), ref.masked.end());
    return ref;
}

// Direct voxel enumeration of a sphere volume on an integer grid.
inline long sphere_voxel_count(int grid, double cz, double cy, double cx, double radius) {
    long count = 0;
    for (int z = 0; z < grid; ++z)
        for (int y = 0; y < grid; ++y)
            for (int x = 0; x < grid; ++x) {
                const double dz = z - cz, dy = y - cy, dx = x - cx;
                if (dz * dz + dy * dy + dx * dx <= radius * radius) ++count;
            }
    return count;
}

// Expected stage geometry for the hierarchical encoder: spatial dims halve and
// width doubles per merge.
struct StageShape {
    std::array<int, 3> dims;
    int width;
};

inline std::vector<StageShape> stage_shapes(const std::array<int, 3>& input_grid, int base_embed,
                                            int n_stages) {
    std::vector<StageShape> out;
    StageShape cur{input_grid, base_embed};
    for (int s = 0; s < n_stages; ++s) {
        out.push_back(cur);
        for (auto& d : cur.dims) d /= 2;
        cur.width *= 2;
    }
    return out;
}

// Plain softmax for closed-form expectation checks.
inline std::vector<double> softmax(std::vector<double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (auto& v : logits) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (auto& v : logits) v /= sum;
    return logits;
}

// Direct cross-entropy evaluation with the 1e-12 log clamp.
inline double cross_entropy(const std::vector<double>& p_t, const std::vector<double>& p_s) {
    double loss = 0.0;
    for (size_t i = 0; i < p_t.size(); ++i)
        loss -= p_t[i] * std::log(std::max(p_s[i], 1e-12));
    return loss;
}

}  // namespace oracle
