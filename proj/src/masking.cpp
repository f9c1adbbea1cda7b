#include "smart/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "smart/common.hpp"

namespace smart {

void TokenGrid::validate() const {
    const long n = static_cast<long>(grid_dims[0]) * grid_dims[1] * grid_dims[2];
    if (tokens.rows() != n) throw ShapeError("TokenGrid: token count does not match grid dims");
    if (tokens.cols() <= 0) throw ShapeError("TokenGrid: embedding width must be positive");
    if (!tokens.allFinite()) throw ValidationError("TokenGrid: non-finite entries");
}

const char* to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::random: return "random";
        case MaskStrategy::blockwise: return "blockwise";
        case MaskStrategy::attention: return "attention";
        case MaskStrategy::patch_dropout: return "patch_dropout";
    }
    return "?";
}

void MaskVector::validate() const {
    std::set<int> masked(masked_idx.begin(), masked_idx.end());
    std::set<int> hints(hint_idx.begin(), hint_idx.end());
    if (masked.size() != masked_idx.size()) throw ValidationError("MaskVector: duplicate masked index");
    for (int i : hint_idx) {
        if (masked.count(i)) throw ValidationError("MaskVector: hint index is masked");
    }
    for (int i = 0; i < count(); ++i) {
        const bool is_masked = masked.count(i) > 0;
        if ((visible[static_cast<size_t>(i)] == 0) != is_masked)
            throw ValidationError("MaskVector: visibility inconsistent with masked_idx");
    }
    for (int i : masked_idx) {
        if (i < 0 || i >= count()) throw ValidationError("MaskVector: masked index out of range");
    }
    for (int i : hint_idx) {
        if (i < 0 || i >= count()) throw ValidationError("MaskVector: hint index out of range");
    }
}

void MaskingConfig::validate() const {
    if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("MaskingConfig: r must be in [0,1]");
    if (!(s >= 0.0 && (s < r || (s == 0.0 && r == 0.0))))
        throw ValidationError("MaskingConfig: require 0 <= s < r");
    if (!(r_t >= 0.0 && r_t <= 1.0)) throw ValidationError("MaskingConfig: r_t must be in [0,1]");
    if (block_edge < 1) throw ValidationError("MaskingConfig: block_edge must be >= 1");
}

int ceil_count(double ratio, int n) {
    if (ratio < 0.0 || ratio > 1.0) throw ValidationError("mask ratio must be in [0,1]");
    const int k = static_cast<int>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
    return std::clamp(k, 0, n);
}

PatchBlocks extract_patches(const GridD& view, int patch_size) {
    if (patch_size <= 0) throw ShapeError("extract_patches: patch_size must be positive");
    for (int a = 0; a < 3; ++a) {
        if (view.dims()[a] % patch_size != 0)
            throw ShapeError("extract_patches: dimension " + std::to_string(view.dims()[a]) +
                             " not divisible by patch size " + std::to_string(patch_size));
    }
    const int p = patch_size;
    PatchBlocks out;
    out.patch_size = p;
    for (int a = 0; a < 3; ++a) out.grid_dims[a] = view.dims()[a] / p;
    const long n = static_cast<long>(out.grid_dims[0]) * out.grid_dims[1] * out.grid_dims[2];
    out.blocks.resize(n, static_cast<long>(p) * p * p);

    long row = 0;
    for (int gz = 0; gz < out.grid_dims[0]; ++gz)
        for (int gy = 0; gy < out.grid_dims[1]; ++gy)
            for (int gx = 0; gx < out.grid_dims[2]; ++gx, ++row) {
                long col = 0;
                for (int dz = 0; dz < p; ++dz)
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx, ++col)
                            out.blocks(row, col) =
                                view.at(gz * p + dz, gy * p + dy, gx * p + dx);
            }
    return out;
}

GridD assemble_patches(const Mat& blocks, const std::array<int, 3>& grid_dims, int patch_size) {
    const int p = patch_size;
    const long n = static_cast<long>(grid_dims[0]) * grid_dims[1] * grid_dims[2];
    if (blocks.rows() != n || blocks.cols() != static_cast<long>(p) * p * p)
        throw ShapeError("assemble_patches: block matrix shape mismatch");
    GridD out(grid_dims[0] * p, grid_dims[1] * p, grid_dims[2] * p);
    long row = 0;
    for (int gz = 0; gz < grid_dims[0]; ++gz)
        for (int gy = 0; gy < grid_dims[1]; ++gy)
            for (int gx = 0; gx < grid_dims[2]; ++gx, ++row) {
                long col = 0;
                for (int dz = 0; dz < p; ++dz)
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx, ++col)
                            out.at(gz * p + dz, gy * p + dy, gx * p + dx) = blocks(row, col);
            }
    return out;
}

namespace {

MaskVector from_masked_set(int n, std::vector<int> masked, std::vector<int> hints,
                           MaskStrategy strategy) {
    MaskVector m;
    m.strategy = strategy;
    m.visible.assign(static_cast<size_t>(n), 1);
    std::sort(masked.begin(), masked.end());
    for (int i : masked) m.visible[static_cast<size_t>(i)] = 0;
    m.masked_idx = std::move(masked);
    std::sort(hints.begin(), hints.end());
    m.hint_idx = std::move(hints);
    return m;
}

}  // namespace

MaskVector random_mask(int n, double ratio, RngStream& rng) {
    if (n < 0) throw ValidationError("random_mask: negative count");
    const int k = ceil_count(ratio, n);
    std::vector<int> masked = k > 0 ? rng.sample_without_replacement(n, k) : std::vector<int>{};
    return from_masked_set(n, std::move(masked), {}, MaskStrategy::random);
}

BlockwiseResult blockwise_mask_blocks(const std::array<int, 3>& grid_dims, double ratio,
                                      int block_edge, RngStream& rng) {
    for (int a = 0; a < 3; ++a) {
        if (block_edge > grid_dims[a])
            throw ValidationError("blockwise_mask: block edge exceeds grid dimension");
    }
    if (ratio < 0.0 || ratio > 1.0) throw ValidationError("blockwise_mask: ratio must be in [0,1]");

    const long n = static_cast<long>(grid_dims[0]) * grid_dims[1] * grid_dims[2];
    std::vector<uint8_t> masked(static_cast<size_t>(n), 0);
    BlockwiseResult out;
    long n_masked = 0;
    const auto flat = [&](int z, int y, int x) {
        return (static_cast<size_t>(z) * grid_dims[1] + static_cast<size_t>(y)) * grid_dims[2] +
               static_cast<size_t>(x);
    };
    while (static_cast<double>(n_masked) + 1e-9 < ratio * static_cast<double>(n)) {
        std::array<int, 3> origin;
        for (int a = 0; a < 3; ++a) origin[a] = rng.uniform_int(grid_dims[a] - block_edge + 1);
        out.block_origins.push_back(origin);
        for (int dz = 0; dz < block_edge; ++dz)
            for (int dy = 0; dy < block_edge; ++dy)
                for (int dx = 0; dx < block_edge; ++dx) {
                    auto& cell = masked[flat(origin[0] + dz, origin[1] + dy, origin[2] + dx)];
                    if (!cell) {
                        cell = 1;
                        ++n_masked;
                    }
                }
    }
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(n_masked));
    for (long i = 0; i < n; ++i) {
        if (masked[static_cast<size_t>(i)]) idx.push_back(static_cast<int>(i));
    }
    out.mask = from_masked_set(static_cast<int>(n), std::move(idx), {}, MaskStrategy::blockwise);
    return out;
}

MaskVector blockwise_mask(const std::array<int, 3>& grid_dims, double ratio, int block_edge,
                          RngStream& rng) {
    return blockwise_mask_blocks(grid_dims, ratio, block_edge, rng).mask;
}

MaskVector attention_guided_mask(const Vec& satt, const MaskingConfig& cfg,
                                 const std::vector<int>& excluded) {
    cfg.validate();
    const int n = static_cast<int>(satt.size());
    if (n < 1) throw ValidationError("attention_guided_mask: empty attention vector");
    for (int i = 0; i < n; ++i) {
        if (!std::isfinite(satt[i]))
            throw ValidationError("attention_guided_mask: non-finite attention value");
    }

    std::vector<uint8_t> is_excluded(static_cast<size_t>(n), 0);
    for (int i : excluded) {
        if (i < 0 || i >= n) throw ValidationError("attention_guided_mask: excluded index out of range");
        is_excluded[static_cast<size_t>(i)] = 1;
    }

    std::vector<int> ranking;
    ranking.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (!is_excluded[static_cast<size_t>(i)]) ranking.push_back(i);
    }
    const double sign = cfg.invert_ranking ? -1.0 : 1.0;
    std::sort(ranking.begin(), ranking.end(), [&](int a, int b) {
        const double va = sign * satt[a], vb = sign * satt[b];
        if (va != vb) return va > vb;
        return a < b;  // ties broken by ascending index
    });

    const int n_candidates = std::min(ceil_count(cfg.r, n), static_cast<int>(ranking.size()));
    const int n_hints = std::min(ceil_count(cfg.s, n), n_candidates);
    std::vector<int> hints(ranking.begin(), ranking.begin() + n_hints);
    std::vector<int> masked(ranking.begin() + n_hints, ranking.begin() + n_candidates);
    return from_masked_set(n, std::move(masked), std::move(hints), MaskStrategy::attention);
}

PatchDropoutResult patch_dropout(const TokenGrid& tg, double r_t, const Vec& mask_embedding,
                                 RngStream& rng) {
    if (r_t < 0.0 || r_t > 1.0) throw ValidationError("patch_dropout: r_t must be in [0,1]");
    PatchDropoutResult out;
    out.mask = random_mask(tg.count(), r_t, rng);
    out.mask.strategy = MaskStrategy::patch_dropout;
    out.tokens = apply_mask(tg, out.mask, mask_embedding);
    return out;
}

TokenGrid apply_mask(const TokenGrid& tg, const MaskVector& m, const Vec& mask_embedding) {
    if (m.count() != tg.count()) throw ShapeError("apply_mask: mask length differs from token count");
    if (mask_embedding.size() != tg.tokens.cols())
        throw ShapeError("apply_mask: mask embedding width differs from token width");
    TokenGrid out = tg;
    for (int i : m.masked_idx) out.tokens.row(i) = mask_embedding.transpose();
    return out;
}

MaskVector broadcast_mask(const MaskVector& coarse, const std::array<int, 3>& coarse_dims,
                          const std::array<int, 3>& input_dims) {
    const long nc = static_cast<long>(coarse_dims[0]) * coarse_dims[1] * coarse_dims[2];
    if (coarse.count() != nc) throw ShapeError("broadcast_mask: mask length differs from coarse grid");
    std::array<int, 3> factor;
    for (int a = 0; a < 3; ++a) {
        if (coarse_dims[a] <= 0 || input_dims[a] % coarse_dims[a] != 0)
            throw ShapeError("broadcast_mask: input dims are not an integer multiple of coarse dims");
        factor[a] = input_dims[a] / coarse_dims[a];
    }

    const auto expand = [&](const std::vector<int>& coarse_idx) {
        std::vector<int> out;
        out.reserve(coarse_idx.size() * static_cast<size_t>(factor[0]) * factor[1] * factor[2]);
        for (int ci : coarse_idx) {
            const int cz = ci / (coarse_dims[1] * coarse_dims[2]);
            const int cy = (ci / coarse_dims[2]) % coarse_dims[1];
            const int cx = ci % coarse_dims[2];
            for (int dz = 0; dz < factor[0]; ++dz)
                for (int dy = 0; dy < factor[1]; ++dy)
                    for (int dx = 0; dx < factor[2]; ++dx) {
                        const int z = cz * factor[0] + dz;
                        const int y = cy * factor[1] + dy;
                        const int x = cx * factor[2] + dx;
                        out.push_back((z * input_dims[1] + y) * input_dims[2] + x);
                    }
        }
        return out;
    };

    const long ni = static_cast<long>(input_dims[0]) * input_dims[1] * input_dims[2];
    auto out = from_masked_set(static_cast<int>(ni), expand(coarse.masked_idx),
                               expand(coarse.hint_idx), coarse.strategy);
    return out;
}

namespace {

void put_u32le(std::vector<unsigned char>& buf, uint32_t v) {
    for (int b = 0; b < 4; ++b) buf.push_back(static_cast<unsigned char>((v >> (8 * b)) & 0xFF));
}

uint32_t get_u32le(const unsigned char* p) {
    uint32_t v = 0;
    for (int b = 3; b >= 0; --b) v = (v << 8) | p[b];
    return v;
}

void pack_bits(std::vector<unsigned char>& buf, const std::vector<uint8_t>& bits) {
    const size_t nbytes = (bits.size() + 7) / 8;
    const size_t base = buf.size();
    buf.resize(base + nbytes, 0);
    for (size_t i = 0; i < bits.size(); ++i) {
        if (bits[i]) buf[base + i / 8] |= static_cast<unsigned char>(1u << (i % 8));
    }
}

}  // namespace

std::vector<unsigned char> serialize_mask(const MaskVector& m, double ratio_a, double ratio_b) {
    std::vector<unsigned char> out;
    out.reserve(16 + 2 * ((m.visible.size() + 7) / 8));
    put_u32le(out, static_cast<uint32_t>(m.count()));
    put_u32le(out, static_cast<uint32_t>(m.strategy));
    put_u32le(out, static_cast<uint32_t>(std::llround(ratio_a * 1e4)));
    put_u32le(out, static_cast<uint32_t>(std::llround(ratio_b * 1e4)));
    pack_bits(out, m.visible);
    std::vector<uint8_t> hint_bits(m.visible.size(), 0);
    for (int i : m.hint_idx) hint_bits[static_cast<size_t>(i)] = 1;
    pack_bits(out, hint_bits);
    return out;
}

MaskVector deserialize_mask(const std::vector<unsigned char>& bytes, double* ratio_a,
                            double* ratio_b) {
    if (bytes.size() < 16) throw FormatError("deserialize_mask: truncated header");
    const uint32_t n = get_u32le(bytes.data());
    const uint32_t strategy = get_u32le(bytes.data() + 4);
    if (strategy > 3) throw FormatError("deserialize_mask: unknown strategy code");
    if (ratio_a) *ratio_a = get_u32le(bytes.data() + 8) / 1e4;
    if (ratio_b) *ratio_b = get_u32le(bytes.data() + 12) / 1e4;
    const size_t nbytes = (n + 7) / 8;
    if (bytes.size() < 16 + 2 * nbytes) throw FormatError("deserialize_mask: truncated payload");

    const auto bit = [&](size_t plane, uint32_t i) {
        return (bytes[16 + plane * nbytes + i / 8] >> (i % 8)) & 1u;
    };
    std::vector<int> masked, hints;
    for (uint32_t i = 0; i < n; ++i) {
        if (!bit(0, i)) masked.push_back(static_cast<int>(i));
        if (bit(1, i)) hints.push_back(static_cast<int>(i));
    }
    return from_masked_set(static_cast<int>(n), std::move(masked), std::move(hints),
                           static_cast<MaskStrategy>(strategy));
}

}  // namespace smart
