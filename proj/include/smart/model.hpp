#pragma once

#include <array>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "smart/autodiff.hpp"
#include "smart/masking.hpp"
#include "smart/rng.hpp"

namespace smart {

struct ModelConfig {
    int base_embed = 24;
    std::array<int, 4> depths{1, 1, 2, 1};
    std::array<int, 4> heads{2, 2, 4, 8};
    int window = 4;
    int patch = 2;
    int sa_stage = 3;   // semantic attention inserted after this stage
    int sa_depth = 2;   // transformer layers in the SA block
    int head_dim_k = 256;
    double drop_path = 0.1;  // student stochastic depth, linearly scaled over blocks
    int mlp_ratio = 4;
    double sa_layerscale_init = 1e-4;
    std::array<int, 3> input_grid{16, 16, 16};  // token grid after patchify

    int stage_width(int stage) const { return base_embed << (stage - 1); }
    std::array<int, 3> stage_dims(int stage) const {
        std::array<int, 3> d = input_grid;
        for (auto& v : d) v >>= (stage - 1);
        return d;
    }
    int voxels_per_stage3_cell_edge() const { return patch * 4; }
    void validate() const;
};

// Ordered name -> matrix store. Insertion order is the canonical iteration
// order for init, EMA, optimizer state, and checkpoints.
class Parameters {
  public:
    Mat& add(const std::string& name, Mat init);
    Mat& at(const std::string& name);
    const Mat& at(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    int index_of(const std::string& name) const;

    size_t count() const { return values_.size(); }
    long scalar_count() const;
    const std::vector<std::string>& names() const { return names_; }
    Mat& value(int i) { return values_[static_cast<size_t>(i)]; }
    const Mat& value(int i) const { return values_[static_cast<size_t>(i)]; }

    bool same_shapes(const Parameters& other) const;

  private:
    std::vector<std::string> names_;
    std::vector<Mat> values_;
    std::unordered_map<std::string, int> index_;
};

// Per-parameter gradient accumulator, parallel to a Parameters store.
class Gradients {
  public:
    explicit Gradients(const Parameters& params);
    Mat& at(int i) { return grads_[static_cast<size_t>(i)]; }
    const Mat& at(int i) const { return grads_[static_cast<size_t>(i)]; }
    size_t count() const { return grads_.size(); }
    void zero();
    double squared_norm() const;

  private:
    std::vector<Mat> grads_;
};

enum class Role { student, teacher };

struct SemanticAttentionOutput {
    Vec cls_embedding;  // final CLS after the SA block
    Vec satt;           // patch entries of the head-averaged attention row
    Mat per_head_rows;  // heads x (N+1), CLS key entry last
};

// Head-averaged CLS-query attention over z (patch tokens first, CLS token
// last). Standalone plain-matrix form of the attention used inside the SA
// block; cls_embedding here is the output-projected attended query.
struct SaAttentionParams {
    Mat wq, bq, wk, bk, wv, bv, wo, bo;
    int heads = 1;
};
SemanticAttentionOutput semantic_attention(const Mat& z, const SaAttentionParams& p);

struct EncoderOutputs {
    TokenGrid stage3;                // plain copy, level = stage3
    ad::Value stage3_tokens;         // same tokens on the tape
    SemanticAttentionOutput sa;
    ad::Value cls_value;             // 1 x width(sa_stage)
    Vec global_token;                // stage-4 average pool (after final norm)
    ad::Value global_value;          // 1 x width(4)
    ad::Value recon_blocks;          // N3 x cell_vox^3 (student only; else invalid)
    std::array<int, 3> stage3_dims;
    std::array<int, 3> sa_dims;      // grid dims where the SA block ran
};

// 3D shifted-window transformer with patch merging between stages, a
// CLS-query semantic attention block after a configurable stage, projection
// heads for distillation, and a linear voxel-reconstruction head on stage-3
// tokens.
class SwinEncoder {
  public:
    SwinEncoder(const ModelConfig& cfg, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    Parameters& params() { return params_; }
    const Parameters& params() const { return params_; }

    // Raw voxel blocks -> embedded tokens (learned patch embedding), plain.
    TokenGrid patchify(const GridD& view) const;

    // Differentiable patch embedding for the student path.
    ad::Value embed_blocks(ad::Tape& t, const Mat& blocks) const;
    ad::Value mask_token_value(ad::Tape& t) const;

    // Forward from embedded tokens already on the tape. The teacher role
    // disables stochastic depth; droppath_rng may be null (no stochastic
    // depth, e.g. evaluation or gradient checks).
    EncoderOutputs forward_tokens(ad::Tape& t, ad::Value tokens,
                                  const std::array<int, 3>& grid_dims, Role role,
                                  RngStream* droppath_rng = nullptr,
                                  bool want_reconstruction = false) const;

    // Plain entry point: puts an embedded TokenGrid on the tape and runs.
    EncoderOutputs forward(ad::Tape& t, const TokenGrid& tg, Role role,
                           RngStream* droppath_rng = nullptr,
                           bool want_reconstruction = false) const;

    // Distillation projection heads (linear, K columns).
    ad::Value project_patch_tokens(ad::Tape& t, ad::Value stage3_tokens) const;
    ad::Value project_cls(ad::Tape& t, ad::Value cls) const;
    ad::Value project_global(ad::Tape& t, ad::Value global) const;

    // Linear per-token voxel prediction from stage-3 tokens.
    ad::Value predict_image(ad::Tape& t, ad::Value stage3_tokens) const;
    GridD assemble_reconstruction(const Mat& recon_blocks) const;

    // View voxels rearranged into the stage-3 block layout (reconstruction
    // targets).
    Mat view_to_stage3_blocks(const GridD& view) const;

    // Fraction of each stage-3 cell's input tokens contained in `input_idx`
    // set, used to decide fully-dropped cells.
    std::vector<double> stage3_cell_fractions(const std::vector<int>& input_idx) const;

  private:
    struct WindowGeom {
        int win_len = 1;
        std::vector<int> perm, inv_perm;
        std::vector<int> rel_idx;
        std::shared_ptr<std::vector<Mat>> masks;  // null when no shift
    };
    struct StageGeom {
        std::array<int, 3> dims{};
        int width = 0;
        WindowGeom regular, shifted;
        std::array<std::vector<int>, 8> merge_idx;  // stages 1..3
    };

    ad::Value swin_block(ad::Tape& t, ad::Value x, int stage, int block, const StageGeom& geom,
                         bool shifted, double drop_rate, RngStream* droppath_rng) const;
    ad::Value run_sa_block(ad::Tape& t, ad::Value patches, Eigen::RowVectorXd* last_probs,
                           Mat* last_per_head) const;
    ad::Value maybe_drop_path(ad::Tape& t, ad::Value shortcut, ad::Value branch, double rate,
                              RngStream* rng) const;
    ad::Value pvalue(ad::Tape& t, const std::string& name) const;

    ModelConfig cfg_;
    Parameters params_;
    std::vector<StageGeom> stages_;  // index 0..3 for stages 1..4
    int total_blocks_ = 0;
};

// Entries (row = stage-3 cell, col = local voxel) of the stage-3 block matrix
// covered by one input-level token.
void append_stage3_elems_for_input_token(int input_idx, const std::array<int, 3>& input_grid,
                                         int patch, std::vector<std::pair<int, int>>& out);

// Truncated normal (redraw outside two standard deviations).
double trunc_normal(RngStream& rng, double sd);

}  // namespace smart
