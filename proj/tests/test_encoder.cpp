#include <doctest.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "smart/model.hpp"

using namespace smart;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.base_embed = 8;
    cfg.depths = {1, 1, 1, 1};
    cfg.heads = {1, 1, 2, 2};
    cfg.window = 4;
    cfg.patch = 2;
    cfg.head_dim_k = 8;
    cfg.drop_path = 0.0;
    cfg.input_grid = {8, 8, 8};
    return cfg;
}

GridD random_crop(int size, uint64_t seed) {
    GridD g(size, size, size);
    RngStream rng(seed);
    for (auto& v : g.data()) v = rng.normal();
    return g;
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("stage geometry matches the shape oracle") {
    ModelConfig cfg;  // desk defaults: base 24, grid 16^3
    SwinEncoder enc(cfg, 7);

    ad::Tape t(false);
    const auto tg = enc.patchify(random_crop(32, 1));
    CHECK(tg.count() == 4096);
    CHECK(tg.embed_dim() == 24);

    const auto out = enc.forward(t, tg, Role::teacher);
    const auto shapes = oracle::stage_shapes({16, 16, 16}, 24, 4);
    CHECK(out.stage3_dims == shapes[2].dims);
    CHECK(out.stage3.tokens.rows() == 4 * 4 * 4);
    CHECK(out.stage3.tokens.cols() == shapes[2].width);  // 96
    CHECK(out.global_token.size() == shapes[3].width);  // stage-4 width = 192
    CHECK(out.sa.satt.size() == 64);
    CHECK(out.sa.per_head_rows.rows() == cfg.heads[2]);
    CHECK(out.sa.per_head_rows.cols() == 65);
}

TEST_CASE("stage dims halve and widths double for every admissible size") {
    for (int grid : {8, 16}) {
        ModelConfig cfg = tiny_config();
        cfg.input_grid = {grid, grid, grid};
        SwinEncoder enc(cfg, 3);
        ad::Tape t(false);
        TokenGrid tg;
        tg.tokens = Mat::Random(static_cast<long>(grid) * grid * grid, cfg.base_embed);
        tg.grid_dims = cfg.input_grid;
        tg.patch_size = cfg.patch;
        const auto out = enc.forward(t, tg, Role::teacher);
        const auto shapes = oracle::stage_shapes(cfg.input_grid, cfg.base_embed, 4);
        CHECK(out.stage3_dims == shapes[2].dims);
        CHECK(out.stage3.tokens.cols() == shapes[2].width);
        CHECK(out.global_token.size() == shapes[3].width);
    }
}

TEST_CASE("teacher forward is deterministic and produces no gradients") {
    SwinEncoder enc(tiny_config(), 11);
    const auto tg = enc.patchify(random_crop(16, 2));

    ad::Tape t1(false), t2(false);
    const auto a = enc.forward(t1, tg, Role::teacher);
    const auto b = enc.forward(t2, tg, Role::teacher);
    CHECK(a.sa.cls_embedding == b.sa.cls_embedding);
    CHECK(a.global_token == b.global_token);
    CHECK(a.stage3.tokens == b.stage3.tokens);
    CHECK(t1.external_grad(enc.params().at("embed.w")).isZero());
}

TEST_CASE("student stochastic depth draws from the provided stream only") {
    ModelConfig cfg = tiny_config();
    cfg.drop_path = 0.5;
    SwinEncoder enc(cfg, 13);
    const auto tg = enc.patchify(random_crop(16, 3));

    RngStream r1(5), r2(5), r3(6);
    ad::Tape t1, t2, t3;
    const auto a = enc.forward(t1, tg, Role::student, &r1);
    const auto b = enc.forward(t2, tg, Role::student, &r2);
    const auto c = enc.forward(t3, tg, Role::student, &r3);
    CHECK(a.global_token == b.global_token);
    // Different stream: some branch decisions almost surely differ.
    CHECK(a.global_token != c.global_token);

    // Teacher ignores the stream entirely.
    ad::Tape t4(false), t5(false);
    RngStream r4(9);
    const auto d = enc.forward(t4, tg, Role::teacher, &r4);
    const auto e = enc.forward(t5, tg, Role::teacher, nullptr);
    CHECK(d.global_token == e.global_token);
}

TEST_CASE("indivisible grids are rejected") {
    ModelConfig cfg = tiny_config();
    cfg.input_grid = {6, 6, 6};
    CHECK_THROWS_AS(SwinEncoder(cfg, 1), ShapeError);

    // 24 is a multiple of 8 but stage-3 dims (6) collide with window 4.
    ModelConfig cfg2 = tiny_config();
    cfg2.input_grid = {24, 24, 24};
    CHECK_THROWS_AS(SwinEncoder(cfg2, 1), ShapeError);

    // Mismatched input at forward time.
    SwinEncoder enc(tiny_config(), 1);
    TokenGrid tg;
    tg.tokens = Mat::Random(16 * 16 * 16, 8);
    tg.grid_dims = {16, 16, 16};
    ad::Tape t(false);
    CHECK_THROWS_AS(enc.forward(t, tg, Role::teacher), ShapeError);
}

TEST_CASE("projection heads are linear with K columns") {
    SwinEncoder enc(tiny_config(), 17);
    const auto tg = enc.patchify(random_crop(16, 5));
    ad::Tape t(false);
    const auto out = enc.forward(t, tg, Role::teacher);

    const auto cls_logits = enc.project_cls(t, out.cls_value);
    const auto patch_logits = enc.project_patch_tokens(t, out.stage3_tokens);
    const auto global_logits = enc.project_global(t, out.global_value);
    CHECK(t.val(cls_logits).cols() == 8);
    CHECK(t.val(patch_logits).rows() == t.val(out.stage3_tokens).rows());
    CHECK(t.val(global_logits).rows() == 1);

    // Zero weights and bias give all-zero logits.
    enc.params().at("head_patch.w").setZero();
    enc.params().at("head_patch.b").setZero();
    ad::Tape t2(false);
    const auto out2 = enc.forward(t2, tg, Role::teacher);
    CHECK(t2.val(enc.project_patch_tokens(t2, out2.stage3_tokens)).isZero());

    // Linearity with zero bias: f(2x) = 2 f(x).
    ad::Tape t3(false);
    enc.params().at("head_cls.b").setZero();
    const auto one = enc.project_cls(t3, t3.input(Mat::Ones(1, 32)));
    const auto two = enc.project_cls(t3, t3.input(2.0 * Mat::Ones(1, 32)));
    CHECK(t3.val(two).isApprox(2.0 * t3.val(one), 1e-12));
}

TEST_CASE("reconstruction covers the crop and is local per stage-3 token") {
    SwinEncoder enc(tiny_config(), 19);
    const auto crop = random_crop(16, 6);
    const auto tg = enc.patchify(crop);
    ad::Tape t;
    const auto out = enc.forward(t, tg, Role::student, nullptr, true);
    REQUIRE(out.recon_blocks.valid());
    const GridD recon = enc.assemble_reconstruction(t.val(out.recon_blocks));
    CHECK(recon.dims() == crop.dims());

    // Zero prediction weights give a zero reconstruction.
    SwinEncoder enc0(tiny_config(), 19);
    enc0.params().at("pred.w").setZero();
    enc0.params().at("pred.b").setZero();
    ad::Tape t0;
    const auto out0 = enc0.forward(t0, tg, Role::student, nullptr, true);
    CHECK(t0.val(out0.recon_blocks).isZero());

    // Moving one stage-3 token changes only its own 8^3 voxel block.
    ad::Tape tp(false);
    const Mat stage3 = out.stage3.tokens;
    Mat moved = stage3;
    moved.row(3).array() += 1.0;
    const Mat blocks_a = tp.val(enc.predict_image(tp, tp.input(stage3)));
    const Mat blocks_b = tp.val(enc.predict_image(tp, tp.input(moved)));
    for (long r = 0; r < blocks_a.rows(); ++r) {
        if (r == 3)
            CHECK(blocks_a.row(r) != blocks_b.row(r));
        else
            CHECK(blocks_a.row(r) == blocks_b.row(r));
    }
    const GridD ga = enc.assemble_reconstruction(blocks_a);
    const GridD gb = enc.assemble_reconstruction(blocks_b);
    long diff_voxels = 0;
    for (size_t i = 0; i < ga.size(); ++i) diff_voxels += (ga[i] != gb[i]) ? 1 : 0;
    CHECK(diff_voxels == 8 * 8 * 8);

    // Targets in block layout match a direct re-read of the crop.
    const Mat targets = enc.view_to_stage3_blocks(crop);
    CHECK(assemble_patches(targets, out.stage3_dims, 8) == crop);
}

TEST_CASE("masked embedding path routes gradients to the mask token") {
    SwinEncoder enc(tiny_config(), 23);
    const auto crop = random_crop(16, 7);
    const auto blocks = extract_patches(crop, 2);

    ad::Tape t;
    ad::Value tokens = enc.embed_blocks(t, blocks.blocks);
    std::vector<int> masked{0, 5, 100, 200};
    tokens = t.replace_rows(tokens, masked, enc.mask_token_value(t));
    const auto out = enc.forward_tokens(t, tokens, {8, 8, 8}, Role::student, nullptr, true);
    t.backward(t.sum_squares(out.recon_blocks));
    CHECK(t.external_grad(enc.params().at("mask_token")).norm() > 0.0);
    CHECK(t.external_grad(enc.params().at("embed.w")).norm() > 0.0);
}

}  // TEST_SUITE

TEST_SUITE("semantic_attention") {

namespace {
SaAttentionParams identity_params(long d, int heads) {
    SaAttentionParams p;
    p.wq = Mat::Identity(d, d);
    p.wk = Mat::Identity(d, d);
    p.wv = Mat::Identity(d, d);
    p.wo = Mat::Identity(d, d);
    p.bq = Mat::Zero(1, d);
    p.bk = Mat::Zero(1, d);
    p.bv = Mat::Zero(1, d);
    p.bo = Mat::Zero(1, d);
    p.heads = heads;
    return p;
}
}  // namespace

TEST_CASE("identical tokens give the uniform attention row") {
    const long n = 9, d = 4;
    Mat z = Mat::Ones(n + 1, d) * 0.7;
    const auto out = semantic_attention(z, identity_params(d, 2));
    CHECK(out.satt.size() == n);
    for (long i = 0; i < n; ++i)
        CHECK(out.satt[i] == doctest::Approx(1.0 / (n + 1)).epsilon(1e-12));
}

TEST_CASE("scalar case matches the closed-form softmax") {
    // D=1, h=1, N=1: identity weights give logits (z_cls*z_patch, z_cls^2).
    Mat z(2, 1);
    z << 2.0, 1.0;  // patch token 2, CLS 1
    const auto out = semantic_attention(z, identity_params(1, 1));
    const auto probs = oracle::softmax({2.0, 1.0});  // (patch, cls)
    CHECK(out.satt[0] == doctest::Approx(probs[0]).epsilon(1e-12));
    CHECK(out.per_head_rows(0, 1) == doctest::Approx(probs[1]).epsilon(1e-12));
}

TEST_CASE("per-head rows sum to one and satt complements CLS self-attention") {
    RngStream rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const int heads_choices[] = {1, 2, 4};
        const int heads = heads_choices[rng.uniform_int(3)];
        const long dh = 2 + rng.uniform_int(6);
        const long d = heads * dh;
        const long n = 1 + rng.uniform_int(30);
        Mat z(n + 1, d);
        for (long i = 0; i < n + 1; ++i)
            for (long j = 0; j < d; ++j) z(i, j) = rng.normal();
        SaAttentionParams p;
        const auto mk = [&](long r, long c) {
            Mat m(r, c);
            for (long jj = 0; jj < c; ++jj)
                for (long ii = 0; ii < r; ++ii) m(ii, jj) = rng.normal() * 0.3;
            return m;
        };
        p.wq = mk(d, d); p.wk = mk(d, d); p.wv = mk(d, d); p.wo = mk(d, d);
        p.bq = mk(1, d); p.bk = mk(1, d); p.bv = mk(1, d); p.bo = mk(1, d);
        p.heads = heads;

        const auto out = semantic_attention(z, p);
        for (int h = 0; h < heads; ++h)
            CHECK(out.per_head_rows.row(h).sum() == doctest::Approx(1.0).epsilon(1e-5));
        const double cls_share = out.per_head_rows.col(n).mean();
        CHECK(out.satt.sum() == doctest::Approx(1.0 - cls_share).epsilon(1e-5));
        CHECK(out.satt.minCoeff() >= 0.0);
        CHECK(out.satt.maxCoeff() <= 1.0);
    }
}

TEST_CASE("key scaling preserves ranking of already-ordered logits") {
    Mat z(4, 2);
    z << 3.0, 0.1,
         2.0, 0.2,
         1.0, 0.3,
         1.0, 1.0;  // CLS
    auto p = identity_params(2, 1);
    const auto base = semantic_attention(z, p);
    // Scale all keys by 2 through the key projection.
    p.wk *= 2.0;
    const auto scaled = semantic_attention(z, p);
    CHECK(base.satt != scaled.satt);
    std::vector<int> rank_a{0, 1, 2}, rank_b{0, 1, 2};
    std::sort(rank_a.begin(), rank_a.end(), [&](int a, int b) { return base.satt[a] > base.satt[b]; });
    std::sort(rank_b.begin(), rank_b.end(), [&](int a, int b) { return scaled.satt[a] > scaled.satt[b]; });
    CHECK(rank_a == rank_b);
}

TEST_CASE("tape and plain implementations agree") {
    RngStream rng(31);
    const long n1 = 8, d = 6;
    Mat z(n1, d);
    for (long i = 0; i < n1; ++i)
        for (long j = 0; j < d; ++j) z(i, j) = rng.normal();
    SaAttentionParams p = identity_params(d, 2);
    p.wq = Mat::Random(d, d);
    p.wk = Mat::Random(d, d);
    p.wv = Mat::Random(d, d);
    p.wo = Mat::Random(d, d);

    const auto plain = semantic_attention(z, p);
    ad::Tape t(false);
    Eigen::RowVectorXd probs;
    Mat per_head;
    const auto out = t.cls_attention(t.input(z), t.param(p.wq), t.param(p.bq), t.param(p.wk),
                                     t.param(p.bk), t.param(p.wv), t.param(p.bv), t.param(p.wo),
                                     t.param(p.bo), 2, &probs, &per_head);
    CHECK(t.val(out).row(0).transpose().isApprox(plain.cls_embedding, 1e-12));
    CHECK(per_head.isApprox(plain.per_head_rows, 1e-12));
    CHECK(probs.head(n1 - 1).transpose().isApprox(plain.satt, 1e-12));
}

TEST_CASE("dimension mismatch raises a shape error") {
    Mat z = Mat::Ones(4, 6);
    auto p = identity_params(4, 2);  // wrong width
    CHECK_THROWS_AS(semantic_attention(z, p), ShapeError);
    auto p2 = identity_params(6, 4);
    p2.heads = 5;  // 6 % 5 != 0
    CHECK_THROWS_AS(semantic_attention(z, p2), ShapeError);
}

}  // TEST_SUITE

TEST_SUITE("encoder_grad") {

TEST_CASE("encoder gradients match finite differences on a sampled subset") {
    SwinEncoder enc(tiny_config(), 29);
    const auto crop = random_crop(16, 8);
    const auto blocks = extract_patches(crop, 2);
    const Mat targets = enc.view_to_stage3_blocks(crop);

    std::vector<int> masked;
    for (int i = 0; i < 512; i += 7) masked.push_back(i);
    std::vector<std::pair<int, int>> elems;
    for (int i : masked) append_stage3_elems_for_input_token(i, {8, 8, 8}, 2, elems);

    const auto build = [&](ad::Tape& t) {
        ad::Value tokens = enc.embed_blocks(t, blocks.blocks);
        tokens = t.replace_rows(tokens, masked, enc.mask_token_value(t));
        const auto out = enc.forward_tokens(t, tokens, {8, 8, 8}, Role::student, nullptr, true);
        const auto cls_logits = enc.project_cls(t, out.cls_value);
        const auto patch_logits = enc.project_patch_tokens(t, out.stage3_tokens);
        const auto global_logits = enc.project_global(t, out.global_value);
        Mat cls_target = Mat::Constant(1, 8, 0.125);
        Mat patch_target = Mat::Constant(t.val(patch_logits).rows(), 8, 0.125);
        ad::Value l1 = t.ce_const_mean(cls_logits, cls_target, {0}, 10.0);
        ad::Value l2 = t.ce_const_mean(patch_logits, patch_target, {1, 5, 7}, 10.0);
        ad::Value l3 = t.ce_const_mean(global_logits, cls_target, {0}, 10.0);
        ad::Value l4 = t.l1_mean_at(out.recon_blocks, targets, elems);
        return t.weighted_sum({{l4, 1.0}, {l2, 0.1}, {l1, 0.1}, {l3, 0.1}});
    };

    std::vector<Mat*> probe_params;
    for (const char* name :
         {"embed.w", "mask_token", "pos_embed", "s1.b0.attn.wq", "s1.b0.attn.rel_bias",
          "merge1.w", "s2.b0.mlp.w1", "s3.b0.attn.wv", "sa.cls_token", "sa.l0.attn.wk",
          "sa.l1.ls1", "sa.l1.mlp.w2", "head_cls.w", "head_patch.w", "head_global.w", "pred.w",
          "norm_final.g", "s4.b0.norm2.b"})
        probe_params.push_back(&enc.params().at(name));

    RngStream rng(1234);
    const auto rep = gradcheck::check(probe_params, build, rng, 2, 1e-5, 1e-3, 1e-7);
    CHECK(rep.checked >= 32);
    MESSAGE("encoder grad check max rel err: ", rep.max_rel_err);
}

}  // TEST_SUITE
