#pragma once

#include <Eigen/Core>
#include <array>
#include <string>
#include <vector>

#include "smart/grid.hpp"
#include "smart/rng.hpp"

namespace smart {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class TokenLevel : int { input = 0, stage3 = 1 };

// Patch-token sequence with its 3D grid geometry.
struct TokenGrid {
    Mat tokens;  // N x D_embed
    std::array<int, 3> grid_dims{0, 0, 0};
    int patch_size = 1;
    TokenLevel level = TokenLevel::input;

    int count() const { return static_cast<int>(tokens.rows()); }
    int embed_dim() const { return static_cast<int>(tokens.cols()); }
    void validate() const;
};

enum class MaskStrategy : int { random = 0, blockwise = 1, attention = 2, patch_dropout = 3 };

const char* to_string(MaskStrategy s);

// Binary visibility vector over a token grid. visible[i] == 0 iff i is masked;
// hint indices are always visible.
struct MaskVector {
    std::vector<uint8_t> visible;
    std::vector<int> masked_idx;
    std::vector<int> hint_idx;
    MaskStrategy strategy = MaskStrategy::random;

    int count() const { return static_cast<int>(visible.size()); }
    double masked_fraction() const {
        return visible.empty() ? 0.0
                               : static_cast<double>(masked_idx.size()) / visible.size();
    }
    void validate() const;
};

struct MaskingConfig {
    double r = 0.7;    // masking ratio
    double s = 0.1;    // hint ratio, s < r
    double r_t = 0.7;  // teacher patch-drop ratio
    int block_edge = 2;
    bool invert_ranking = false;  // mask low-attending tokens instead

    void validate() const;
};

// ceil(ratio * n) with products within 1e-9 of an integer treated as that
// integer, so decimal ratios like 0.7 behave as written.
int ceil_count(double ratio, int n);

// Extract raw p^3 voxel blocks in raster order (d-major, then h, then w).
// Row i holds the flattened block, local raster order within the block.
struct PatchBlocks {
    Mat blocks;  // N x p^3
    std::array<int, 3> grid_dims;
    int patch_size;
};
PatchBlocks extract_patches(const GridD& view, int patch_size);

// Inverse of extract_patches; exact roundtrip.
GridD assemble_patches(const Mat& blocks, const std::array<int, 3>& grid_dims, int patch_size);

// Exactly ceil(ratio*N) indices masked, uniform without replacement; no hints.
MaskVector random_mask(int n, double ratio, RngStream& rng);

// Masks whole axis-aligned cubic blocks (which may overlap) until the masked
// fraction first reaches >= ratio. Also reports the chosen block origins.
struct BlockwiseResult {
    MaskVector mask;
    std::vector<std::array<int, 3>> block_origins;
};
BlockwiseResult blockwise_mask_blocks(const std::array<int, 3>& grid_dims, double ratio,
                                      int block_edge, RngStream& rng);
MaskVector blockwise_mask(const std::array<int, 3>& grid_dims, double ratio, int block_edge,
                          RngStream& rng);

// Ranks tokens by attention (descending; ties broken by ascending index),
// takes the top ceil(r*N) as candidates, keeps the top ceil(s*N) visible as
// hints, and masks the rest. Indices in `excluded` are ranked below everything
// and are never masked or used as hints.
MaskVector attention_guided_mask(const Vec& satt, const MaskingConfig& cfg,
                                 const std::vector<int>& excluded = {});

// Replaces exactly ceil(r_t*N) tokens with the given mask embedding.
struct PatchDropoutResult {
    TokenGrid tokens;
    MaskVector mask;
};
PatchDropoutResult patch_dropout(const TokenGrid& tg, double r_t, const Vec& mask_embedding,
                                 RngStream& rng);

// Tokens at masked_idx replaced by mask_embedding, all others unchanged.
TokenGrid apply_mask(const TokenGrid& tg, const MaskVector& m, const Vec& mask_embedding);

// Expands a coarse-grid mask to the input grid: each masked coarse cell masks
// its aligned block of input tokens; hint cells broadcast likewise.
MaskVector broadcast_mask(const MaskVector& coarse, const std::array<int, 3>& coarse_dims,
                          const std::array<int, 3>& input_dims);

// Bit-packed serialization: 16-byte header (uint32 N, uint32 strategy code,
// 2x uint32 ratios in 1e-4 fixed point), then the visibility bits and the
// hint-membership bits, each packed LSB-first into ceil(N/8) bytes.
std::vector<unsigned char> serialize_mask(const MaskVector& m, double ratio_a, double ratio_b);
MaskVector deserialize_mask(const std::vector<unsigned char>& bytes, double* ratio_a = nullptr,
                            double* ratio_b = nullptr);

}  // namespace smart
