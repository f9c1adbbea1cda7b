#include "smart/model.hpp"

#include <cmath>

namespace smart {

void ModelConfig::validate() const {
    if (base_embed <= 0) throw ValidationError("ModelConfig: base_embed must be positive");
    for (int s = 1; s <= 4; ++s) {
        if (depths[static_cast<size_t>(s - 1)] < 1)
            throw ValidationError("ModelConfig: each stage needs at least one block");
        if (stage_width(s) % heads[static_cast<size_t>(s - 1)] != 0)
            throw ValidationError("ModelConfig: stage " + std::to_string(s) +
                                  " width not divisible by its head count");
    }
    if (window < 1 || patch < 1) throw ValidationError("ModelConfig: window/patch must be >= 1");
    if (sa_stage < 1 || sa_stage > 4) throw ValidationError("ModelConfig: sa_stage must be in 1..4");
    if (sa_depth < 1) throw ValidationError("ModelConfig: sa_depth must be >= 1");
    if (head_dim_k < 2) throw ValidationError("ModelConfig: head_dim_K must be >= 2");
    if (drop_path < 0.0 || drop_path >= 1.0)
        throw ValidationError("ModelConfig: drop_path must be in [0,1)");
    for (int a = 0; a < 3; ++a) {
        if (input_grid[a] < 8 || input_grid[a] % 8 != 0)
            throw ShapeError("ModelConfig: input grid dims must be positive multiples of 8");
    }
}

Mat& Parameters::add(const std::string& name, Mat init) {
    if (index_.count(name)) throw Error("Parameters: duplicate name " + name);
    index_[name] = static_cast<int>(values_.size());
    names_.push_back(name);
    values_.push_back(std::move(init));
    return values_.back();
}

Mat& Parameters::at(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("Parameters: unknown name " + name);
    return values_[static_cast<size_t>(it->second)];
}

const Mat& Parameters::at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("Parameters: unknown name " + name);
    return values_[static_cast<size_t>(it->second)];
}

int Parameters::index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("Parameters: unknown name " + name);
    return it->second;
}

long Parameters::scalar_count() const {
    long n = 0;
    for (const auto& v : values_) n += static_cast<long>(v.size());
    return n;
}

bool Parameters::same_shapes(const Parameters& other) const {
    if (names_ != other.names_) return false;
    for (size_t i = 0; i < values_.size(); ++i) {
        if (values_[i].rows() != other.values_[i].rows() ||
            values_[i].cols() != other.values_[i].cols())
            return false;
    }
    return true;
}

Gradients::Gradients(const Parameters& params) {
    grads_.reserve(params.count());
    for (size_t i = 0; i < params.count(); ++i) {
        const Mat& v = params.value(static_cast<int>(i));
        grads_.push_back(Mat::Zero(v.rows(), v.cols()));
    }
}

void Gradients::zero() {
    for (auto& g : grads_) g.setZero();
}

double Gradients::squared_norm() const {
    double s = 0;
    for (const auto& g : grads_) s += g.squaredNorm();
    return s;
}

double trunc_normal(RngStream& rng, double sd) {
    for (;;) {
        const double v = rng.normal();
        if (std::abs(v) <= 2.0) return v * sd;
    }
}

SemanticAttentionOutput semantic_attention(const Mat& z, const SaAttentionParams& p) {
    const long n1 = z.rows(), d = z.cols();
    if (n1 < 2) throw ShapeError("semantic_attention: need at least one patch plus CLS");
    if (p.wq.rows() != d || p.wk.rows() != d || p.wv.rows() != d)
        throw ShapeError("semantic_attention: projection input width mismatch");
    if (d % p.heads != 0) throw ShapeError("semantic_attention: width not divisible by heads");
    const long dh = d / p.heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

    const Mat q = z.row(n1 - 1) * p.wq + p.bq;
    const Mat k = (z * p.wk).rowwise() + p.bk.row(0);
    const Mat v = (z * p.wv).rowwise() + p.bv.row(0);

    SemanticAttentionOutput out;
    out.per_head_rows.resize(p.heads, n1);
    Mat ctx(1, d);
    for (int h = 0; h < p.heads; ++h) {
        Eigen::RowVectorXd logits =
            (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scl;
        const double mx = logits.maxCoeff();
        logits = (logits.array() - mx).exp();
        logits /= logits.sum();
        out.per_head_rows.row(h) = logits;
        ctx.middleCols(h * dh, dh).noalias() = logits * v.middleCols(h * dh, dh);
    }
    const Eigen::RowVectorXd avg = out.per_head_rows.colwise().mean();
    out.satt = avg.head(n1 - 1).transpose();
    out.cls_embedding = (ctx * p.wo + p.bo).row(0).transpose();
    return out;
}

namespace {

struct AxisWindow {
    int w;  // effective window extent
    int s;  // cyclic shift (0 when the window spans the whole axis)
};

AxisWindow axis_window(int dim, int window, int stage) {
    const int w = std::min(window, dim);
    if (dim % w != 0)
        throw ShapeError("stage " + std::to_string(stage) + ": dimension " + std::to_string(dim) +
                         " not divisible by window " + std::to_string(w));
    return {w, w < dim ? w / 2 : 0};
}

}  // namespace

SwinEncoder::SwinEncoder(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    RngStream rng = RngStream::derive(init_seed, {kStreamInit});
    const auto weight = [&](long r, long c) {
        Mat m(r, c);
        for (long j = 0; j < c; ++j)
            for (long i = 0; i < r; ++i) m(i, j) = trunc_normal(rng, 0.02);
        return m;
    };
    const auto zeros = [](long r, long c) { return Mat::Zero(r, c); };
    const auto ones = [](long c) { return Mat::Ones(1, c); };

    // Geometry per stage.
    for (int s = 1; s <= 4; ++s) {
        StageGeom geom;
        geom.dims = cfg_.stage_dims(s);
        geom.width = cfg_.stage_width(s);
        const AxisWindow wz = axis_window(geom.dims[0], cfg_.window, s);
        const AxisWindow wy = axis_window(geom.dims[1], cfg_.window, s);
        const AxisWindow wx = axis_window(geom.dims[2], cfg_.window, s);

        const auto build = [&](bool shifted) {
            WindowGeom wg;
            const int sz = shifted ? wz.s : 0, sy = shifted ? wy.s : 0, sx = shifted ? wx.s : 0;
            wg.win_len = wz.w * wy.w * wx.w;
            const auto [dz, dy, dx] = std::array{geom.dims[0], geom.dims[1], geom.dims[2]};
            const long n = static_cast<long>(dz) * dy * dx;
            wg.perm.resize(static_cast<size_t>(n));
            wg.inv_perm.resize(static_cast<size_t>(n));
            size_t pos = 0;
            for (int oz = 0; oz < dz; oz += wz.w)
                for (int oy = 0; oy < dy; oy += wy.w)
                    for (int ox = 0; ox < dx; ox += wx.w)
                        for (int lz = 0; lz < wz.w; ++lz)
                            for (int ly = 0; ly < wy.w; ++ly)
                                for (int lx = 0; lx < wx.w; ++lx, ++pos) {
                                    const int z = (oz + lz + sz) % dz;
                                    const int y = (oy + ly + sy) % dy;
                                    const int x = (ox + lx + sx) % dx;
                                    wg.perm[pos] = (z * dy + y) * dx + x;
                                }
            for (size_t i = 0; i < wg.perm.size(); ++i)
                wg.inv_perm[static_cast<size_t>(wg.perm[i])] = static_cast<int>(i);

            // Relative-position table indices for (i, j) pairs within a window.
            wg.rel_idx.resize(static_cast<size_t>(wg.win_len) * wg.win_len);
            const int ry = 2 * wy.w - 1, rx = 2 * wx.w - 1;
            int i = 0;
            for (int iz = 0; iz < wz.w; ++iz)
                for (int iy = 0; iy < wy.w; ++iy)
                    for (int ix = 0; ix < wx.w; ++ix, ++i) {
                        int j = 0;
                        for (int jz = 0; jz < wz.w; ++jz)
                            for (int jy = 0; jy < wy.w; ++jy)
                                for (int jx = 0; jx < wx.w; ++jx, ++j) {
                                    const int rdz = iz - jz + wz.w - 1;
                                    const int rdy = iy - jy + wy.w - 1;
                                    const int rdx = ix - jx + wx.w - 1;
                                    wg.rel_idx[static_cast<size_t>(i) * wg.win_len + j] =
                                        (rdz * ry + rdy) * rx + rdx;
                                }
                    }

            // Attention masks barring pairs that wrapped across the volume
            // boundary under the cyclic shift.
            if (sz || sy || sx) {
                const auto group = [](int c, int dim, int w, int s) {
                    if (s == 0) return 0;
                    if (c < dim - w) return 0;
                    if (c < dim - s) return 1;
                    return 2;
                };
                std::vector<int> id(static_cast<size_t>(n));
                for (int z = 0; z < dz; ++z)
                    for (int y = 0; y < dy; ++y)
                        for (int x = 0; x < dx; ++x)
                            id[static_cast<size_t>((z * dy + y) * dx + x)] =
                                (group(z, dz, wz.w, sz) * 3 + group(y, dy, wy.w, sy)) * 3 +
                                group(x, dx, wx.w, sx);
                auto masks = std::make_shared<std::vector<Mat>>();
                const long n_win = n / wg.win_len;
                masks->reserve(static_cast<size_t>(n_win));
                for (long w = 0; w < n_win; ++w) {
                    Mat m = Mat::Zero(wg.win_len, wg.win_len);
                    for (int a = 0; a < wg.win_len; ++a)
                        for (int b = 0; b < wg.win_len; ++b) {
                            const int ia = wg.perm[static_cast<size_t>(w * wg.win_len + a)];
                            const int ib = wg.perm[static_cast<size_t>(w * wg.win_len + b)];
                            if (id[static_cast<size_t>(ia)] != id[static_cast<size_t>(ib)])
                                m(a, b) = -1e9;
                        }
                    masks->push_back(std::move(m));
                }
                wg.masks = std::move(masks);
            }
            return wg;
        };
        geom.regular = build(false);
        geom.shifted = build(true);

        if (s < 4) {
            const std::array<int, 3> half{geom.dims[0] / 2, geom.dims[1] / 2, geom.dims[2] / 2};
            for (int k = 0; k < 8; ++k) {
                auto& idx = geom.merge_idx[static_cast<size_t>(k)];
                idx.reserve(static_cast<size_t>(half[0]) * half[1] * half[2]);
                const int ddz = (k >> 2) & 1, ddy = (k >> 1) & 1, ddx = k & 1;
                for (int z = 0; z < half[0]; ++z)
                    for (int y = 0; y < half[1]; ++y)
                        for (int x = 0; x < half[2]; ++x)
                            idx.push_back(((2 * z + ddz) * geom.dims[1] + (2 * y + ddy)) *
                                              geom.dims[2] +
                                          (2 * x + ddx));
            }
        }
        stages_.push_back(std::move(geom));
    }
    for (int d : cfg_.depths) total_blocks_ += d;

    // Parameters, in a fixed construction order.
    const int c0 = cfg_.base_embed;
    const long p3 = static_cast<long>(cfg_.patch) * cfg_.patch * cfg_.patch;
    const long n_in = static_cast<long>(cfg_.input_grid[0]) * cfg_.input_grid[1] * cfg_.input_grid[2];
    params_.add("embed.w", weight(p3, c0));
    params_.add("embed.b", zeros(1, c0));
    params_.add("pos_embed", weight(n_in, c0));
    params_.add("embed_norm.g", ones(c0));
    params_.add("embed_norm.b", zeros(1, c0));
    params_.add("mask_token", weight(1, c0));

    for (int s = 1; s <= 4; ++s) {
        const StageGeom& geom = stages_[static_cast<size_t>(s - 1)];
        const int c = geom.width;
        const int h = cfg_.heads[static_cast<size_t>(s - 1)];
        long table = 1;
        for (int a = 0; a < 3; ++a)
            table *= 2 * std::min(cfg_.window, geom.dims[a]) - 1;
        for (int b = 0; b < cfg_.depths[static_cast<size_t>(s - 1)]; ++b) {
            const std::string pre = "s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
            params_.add(pre + "norm1.g", ones(c));
            params_.add(pre + "norm1.b", zeros(1, c));
            params_.add(pre + "attn.wq", weight(c, c));
            params_.add(pre + "attn.bq", zeros(1, c));
            params_.add(pre + "attn.wk", weight(c, c));
            params_.add(pre + "attn.bk", zeros(1, c));
            params_.add(pre + "attn.wv", weight(c, c));
            params_.add(pre + "attn.bv", zeros(1, c));
            params_.add(pre + "attn.wo", weight(c, c));
            params_.add(pre + "attn.bo", zeros(1, c));
            params_.add(pre + "attn.rel_bias", weight(table, h));
            params_.add(pre + "norm2.g", ones(c));
            params_.add(pre + "norm2.b", zeros(1, c));
            params_.add(pre + "mlp.w1", weight(c, cfg_.mlp_ratio * c));
            params_.add(pre + "mlp.b1", zeros(1, cfg_.mlp_ratio * c));
            params_.add(pre + "mlp.w2", weight(cfg_.mlp_ratio * c, c));
            params_.add(pre + "mlp.b2", zeros(1, c));
        }
        if (s < 4) {
            const std::string pre = "merge" + std::to_string(s) + ".";
            params_.add(pre + "norm.g", ones(8 * c));
            params_.add(pre + "norm.b", zeros(1, 8 * c));
            params_.add(pre + "w", weight(8 * c, 2 * c));
        }
    }

    const int dsa = cfg_.stage_width(cfg_.sa_stage);
    params_.add("sa.cls_token", weight(1, dsa));
    for (int l = 0; l < cfg_.sa_depth; ++l) {
        const std::string pre = "sa.l" + std::to_string(l) + ".";
        params_.add(pre + "norm1.g", ones(dsa));
        params_.add(pre + "norm1.b", zeros(1, dsa));
        params_.add(pre + "attn.wq", weight(dsa, dsa));
        params_.add(pre + "attn.bq", zeros(1, dsa));
        params_.add(pre + "attn.wk", weight(dsa, dsa));
        params_.add(pre + "attn.bk", zeros(1, dsa));
        params_.add(pre + "attn.wv", weight(dsa, dsa));
        params_.add(pre + "attn.bv", zeros(1, dsa));
        params_.add(pre + "attn.wo", weight(dsa, dsa));
        params_.add(pre + "attn.bo", zeros(1, dsa));
        params_.add(pre + "ls1", Mat::Constant(1, dsa, cfg_.sa_layerscale_init));
        params_.add(pre + "norm2.g", ones(dsa));
        params_.add(pre + "norm2.b", zeros(1, dsa));
        params_.add(pre + "mlp.w1", weight(dsa, cfg_.mlp_ratio * dsa));
        params_.add(pre + "mlp.b1", zeros(1, cfg_.mlp_ratio * dsa));
        params_.add(pre + "mlp.w2", weight(cfg_.mlp_ratio * dsa, dsa));
        params_.add(pre + "mlp.b2", zeros(1, dsa));
        params_.add(pre + "ls2", Mat::Constant(1, dsa, cfg_.sa_layerscale_init));
    }
    params_.add("sa.norm_final.g", ones(dsa));
    params_.add("sa.norm_final.b", zeros(1, dsa));

    const int c4 = cfg_.stage_width(4);
    params_.add("norm_final.g", ones(c4));
    params_.add("norm_final.b", zeros(1, c4));

    const int c3 = cfg_.stage_width(3);
    params_.add("head_cls.w", weight(dsa, cfg_.head_dim_k));
    params_.add("head_cls.b", zeros(1, cfg_.head_dim_k));
    params_.add("head_global.w", weight(c4, cfg_.head_dim_k));
    params_.add("head_global.b", zeros(1, cfg_.head_dim_k));
    params_.add("head_patch.w", weight(c3, cfg_.head_dim_k));
    params_.add("head_patch.b", zeros(1, cfg_.head_dim_k));

    const int cell = cfg_.voxels_per_stage3_cell_edge();
    params_.add("pred.w", weight(c3, static_cast<long>(cell) * cell * cell));
    params_.add("pred.b", zeros(1, static_cast<long>(cell) * cell * cell));
}

ad::Value SwinEncoder::pvalue(ad::Tape& t, const std::string& name) const {
    return t.param(params_.at(name));
}

TokenGrid SwinEncoder::patchify(const GridD& view) const {
    const auto pb = extract_patches(view, cfg_.patch);
    if (pb.grid_dims != cfg_.input_grid)
        throw ShapeError("patchify: view does not match the configured input grid");
    TokenGrid tg;
    tg.tokens = (pb.blocks * params_.at("embed.w")).rowwise() + params_.at("embed.b").row(0);
    tg.grid_dims = pb.grid_dims;
    tg.patch_size = cfg_.patch;
    tg.level = TokenLevel::input;
    return tg;
}

ad::Value SwinEncoder::embed_blocks(ad::Tape& t, const Mat& blocks) const {
    return t.add_row(t.matmul(t.input(blocks), pvalue(t, "embed.w")), pvalue(t, "embed.b"));
}

ad::Value SwinEncoder::mask_token_value(ad::Tape& t) const { return pvalue(t, "mask_token"); }

ad::Value SwinEncoder::maybe_drop_path(ad::Tape& t, ad::Value shortcut, ad::Value branch,
                                       double rate, RngStream* rng) const {
    if (rate > 0.0 && rng) {
        if (rng->uniform() < rate) return shortcut;  // branch dropped
        return t.add(shortcut, t.scale(branch, 1.0 / (1.0 - rate)));
    }
    return t.add(shortcut, branch);
}

ad::Value SwinEncoder::swin_block(ad::Tape& t, ad::Value x, int stage, int block,
                                  const StageGeom& geom, bool shifted, double drop_rate,
                                  RngStream* droppath_rng) const {
    const std::string pre = "s" + std::to_string(stage) + ".b" + std::to_string(block) + ".";
    const WindowGeom& wg = shifted ? geom.shifted : geom.regular;
    const int heads = cfg_.heads[static_cast<size_t>(stage - 1)];

    ad::Value y = t.layer_norm(x, pvalue(t, pre + "norm1.g"), pvalue(t, pre + "norm1.b"));
    y = t.gather_rows(y, wg.perm);
    ad::Value q = t.linear(y, pvalue(t, pre + "attn.wq"), pvalue(t, pre + "attn.bq"));
    ad::Value k = t.linear(y, pvalue(t, pre + "attn.wk"), pvalue(t, pre + "attn.bk"));
    ad::Value v = t.linear(y, pvalue(t, pre + "attn.wv"), pvalue(t, pre + "attn.bv"));
    ad::Value bias = t.gather_rows(pvalue(t, pre + "attn.rel_bias"), wg.rel_idx);
    ad::Value a = t.windowed_attention(q, k, v, heads, wg.win_len, bias, wg.masks);
    a = t.linear(a, pvalue(t, pre + "attn.wo"), pvalue(t, pre + "attn.bo"));
    a = t.gather_rows(a, wg.inv_perm);
    x = maybe_drop_path(t, x, a, drop_rate, droppath_rng);

    ad::Value m = t.layer_norm(x, pvalue(t, pre + "norm2.g"), pvalue(t, pre + "norm2.b"));
    m = t.linear(m, pvalue(t, pre + "mlp.w1"), pvalue(t, pre + "mlp.b1"));
    m = t.gelu(m);
    m = t.linear(m, pvalue(t, pre + "mlp.w2"), pvalue(t, pre + "mlp.b2"));
    return maybe_drop_path(t, x, m, drop_rate, droppath_rng);
}

ad::Value SwinEncoder::run_sa_block(ad::Tape& t, ad::Value patches,
                                    Eigen::RowVectorXd* last_probs, Mat* last_per_head) const {
    ad::Value cls = pvalue(t, "sa.cls_token");
    for (int l = 0; l < cfg_.sa_depth; ++l) {
        const std::string pre = "sa.l" + std::to_string(l) + ".";
        ad::Value z = t.concat_rows({patches, cls});
        ad::Value zn = t.layer_norm(z, pvalue(t, pre + "norm1.g"), pvalue(t, pre + "norm1.b"));
        const bool last = (l == cfg_.sa_depth - 1);
        ad::Value attn = t.cls_attention(
            zn, pvalue(t, pre + "attn.wq"), pvalue(t, pre + "attn.bq"),
            pvalue(t, pre + "attn.wk"), pvalue(t, pre + "attn.bk"), pvalue(t, pre + "attn.wv"),
            pvalue(t, pre + "attn.bv"), pvalue(t, pre + "attn.wo"), pvalue(t, pre + "attn.bo"),
            cfg_.heads[static_cast<size_t>(cfg_.sa_stage - 1)], last ? last_probs : nullptr,
            last ? last_per_head : nullptr);
        cls = t.add(cls, t.mul_row(attn, pvalue(t, pre + "ls1")));
        ad::Value m = t.layer_norm(cls, pvalue(t, pre + "norm2.g"), pvalue(t, pre + "norm2.b"));
        m = t.linear(m, pvalue(t, pre + "mlp.w1"), pvalue(t, pre + "mlp.b1"));
        m = t.gelu(m);
        m = t.linear(m, pvalue(t, pre + "mlp.w2"), pvalue(t, pre + "mlp.b2"));
        cls = t.add(cls, t.mul_row(m, pvalue(t, pre + "ls2")));
    }
    return t.layer_norm(cls, pvalue(t, "sa.norm_final.g"), pvalue(t, "sa.norm_final.b"));
}

EncoderOutputs SwinEncoder::forward_tokens(ad::Tape& t, ad::Value tokens,
                                           const std::array<int, 3>& grid_dims, Role role,
                                           RngStream* droppath_rng,
                                           bool want_reconstruction) const {
    if (grid_dims != cfg_.input_grid)
        throw ShapeError("forward: token grid does not match the configured input grid");
    const long n_in = t.val(tokens).rows();
    if (n_in != params_.at("pos_embed").rows() ||
        t.val(tokens).cols() != cfg_.base_embed)
        throw ShapeError("forward: token matrix shape mismatch");
    if (role == Role::teacher) droppath_rng = nullptr;

    EncoderOutputs out;
    ad::Value x = t.add(tokens, pvalue(t, "pos_embed"));
    x = t.layer_norm(x, pvalue(t, "embed_norm.g"), pvalue(t, "embed_norm.b"));

    int block_counter = 0;
    for (int s = 1; s <= 4; ++s) {
        const StageGeom& geom = stages_[static_cast<size_t>(s - 1)];
        for (int b = 0; b < cfg_.depths[static_cast<size_t>(s - 1)]; ++b, ++block_counter) {
            const double rate =
                total_blocks_ > 1
                    ? cfg_.drop_path * block_counter / static_cast<double>(total_blocks_ - 1)
                    : 0.0;
            x = swin_block(t, x, s, b, geom, b % 2 == 1, role == Role::student ? rate : 0.0,
                           droppath_rng);
        }
        if (!t.val(x).allFinite())
            throw NumericError("forward: non-finite activations after stage " + std::to_string(s));

        if (s == 3) {
            out.stage3_tokens = x;
            out.stage3_dims = geom.dims;
            out.stage3.tokens = t.val(x);
            out.stage3.grid_dims = geom.dims;
            out.stage3.patch_size = cfg_.voxels_per_stage3_cell_edge();
            out.stage3.level = TokenLevel::stage3;
        }
        if (s == cfg_.sa_stage) {
            Eigen::RowVectorXd probs;
            Mat per_head;
            out.cls_value = run_sa_block(t, x, &probs, &per_head);
            out.sa.cls_embedding = t.val(out.cls_value).row(0).transpose();
            out.sa.satt = probs.head(probs.size() - 1).transpose();
            out.sa.per_head_rows = per_head;
            out.sa_dims = geom.dims;
        }
        if (s < 4) {
            std::vector<ad::Value> parts;
            parts.reserve(8);
            for (int k = 0; k < 8; ++k)
                parts.push_back(t.gather_rows(x, geom.merge_idx[static_cast<size_t>(k)]));
            const std::string pre = "merge" + std::to_string(s) + ".";
            x = t.concat_cols(parts);
            x = t.layer_norm(x, pvalue(t, pre + "norm.g"), pvalue(t, pre + "norm.b"));
            x = t.matmul(x, pvalue(t, pre + "w"));
        }
    }

    x = t.layer_norm(x, pvalue(t, "norm_final.g"), pvalue(t, "norm_final.b"));
    out.global_value = t.mean_rows(x);
    out.global_token = t.val(out.global_value).row(0).transpose();

    if (want_reconstruction && role == Role::student) {
        out.recon_blocks = predict_image(t, out.stage3_tokens);
    }
    return out;
}

EncoderOutputs SwinEncoder::forward(ad::Tape& t, const TokenGrid& tg, Role role,
                                    RngStream* droppath_rng, bool want_reconstruction) const {
    tg.validate();
    return forward_tokens(t, t.input(tg.tokens), tg.grid_dims, role, droppath_rng,
                          want_reconstruction);
}

ad::Value SwinEncoder::project_patch_tokens(ad::Tape& t, ad::Value stage3_tokens) const {
    return t.linear(stage3_tokens, pvalue(t, "head_patch.w"), pvalue(t, "head_patch.b"));
}

ad::Value SwinEncoder::project_cls(ad::Tape& t, ad::Value cls) const {
    return t.linear(cls, pvalue(t, "head_cls.w"), pvalue(t, "head_cls.b"));
}

ad::Value SwinEncoder::project_global(ad::Tape& t, ad::Value global) const {
    return t.linear(global, pvalue(t, "head_global.w"), pvalue(t, "head_global.b"));
}

ad::Value SwinEncoder::predict_image(ad::Tape& t, ad::Value stage3_tokens) const {
    return t.linear(stage3_tokens, pvalue(t, "pred.w"), pvalue(t, "pred.b"));
}

GridD SwinEncoder::assemble_reconstruction(const Mat& recon_blocks) const {
    return assemble_patches(recon_blocks, cfg_.stage_dims(3), cfg_.voxels_per_stage3_cell_edge());
}

Mat SwinEncoder::view_to_stage3_blocks(const GridD& view) const {
    const auto pb = extract_patches(view, cfg_.voxels_per_stage3_cell_edge());
    if (pb.grid_dims != cfg_.stage_dims(3))
        throw ShapeError("view_to_stage3_blocks: view does not match the configured crop");
    return pb.blocks;
}

std::vector<double> SwinEncoder::stage3_cell_fractions(const std::vector<int>& input_idx) const {
    const auto d3 = cfg_.stage_dims(3);
    const auto& in = cfg_.input_grid;
    std::vector<double> frac(static_cast<size_t>(d3[0]) * d3[1] * d3[2], 0.0);
    for (int idx : input_idx) {
        const int z = idx / (in[1] * in[2]);
        const int y = (idx / in[2]) % in[1];
        const int x = idx % in[2];
        const int cell = ((z / 4) * d3[1] + (y / 4)) * d3[2] + (x / 4);
        frac[static_cast<size_t>(cell)] += 1.0;
    }
    const double per_cell = 64.0;  // 4^3 input tokens per stage-3 cell
    for (auto& f : frac) f /= per_cell;
    return frac;
}

void append_stage3_elems_for_input_token(int input_idx, const std::array<int, 3>& input_grid,
                                         int patch, std::vector<std::pair<int, int>>& out) {
    const int z = input_idx / (input_grid[1] * input_grid[2]);
    const int y = (input_idx / input_grid[2]) % input_grid[1];
    const int x = input_idx % input_grid[2];
    const std::array<int, 3> d3{input_grid[0] / 4, input_grid[1] / 4, input_grid[2] / 4};
    const int row = ((z / 4) * d3[1] + (y / 4)) * d3[2] + (x / 4);
    const int cell = patch * 4;  // voxels per stage-3 cell edge
    const int lz = (z % 4) * patch, ly = (y % 4) * patch, lx = (x % 4) * patch;
    for (int dz = 0; dz < patch; ++dz)
        for (int dy = 0; dy < patch; ++dy)
            for (int dx = 0; dx < patch; ++dx)
                out.emplace_back(row, ((lz + dz) * cell + (ly + dy)) * cell + (lx + dx));
}

}  // namespace smart
