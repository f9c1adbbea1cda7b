#include <doctest.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "smart/autodiff.hpp"

using namespace smart;
using ad::Mat;
using ad::Tape;
using ad::Value;

namespace {

Mat randn(long r, long c, RngStream& rng) {
    Mat m(r, c);
    for (long j = 0; j < c; ++j)
        for (long i = 0; i < r; ++i) m(i, j) = rng.normal();
    return m;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("elementwise and broadcast ops match finite differences") {
    RngStream rng(42);
    Mat a = randn(5, 7, rng), b = randn(5, 7, rng), row = randn(1, 7, rng);

    gradcheck::check({&a, &b, &row}, [&](Tape& t) {
        Value va = t.param(a), vb = t.param(b), vr = t.param(row);
        Value x = t.add(va, vb);
        x = t.add_row(x, vr);
        x = t.mul_row(x, vr);
        x = t.sub(x, vb);
        x = t.scale(x, 0.37);
        return t.sum_squares(x);
    }, rng);
}

TEST_CASE("matmul and linear match finite differences") {
    RngStream rng(1);
    Mat x = randn(4, 6, rng), w = randn(6, 3, rng), b = randn(1, 3, rng);
    gradcheck::check({&x, &w, &b}, [&](Tape& t) {
        return t.sum_squares(t.linear(t.param(x), t.param(w), t.param(b)));
    }, rng);
}

TEST_CASE("layer_norm matches finite differences and normalizes rows") {
    RngStream rng(2);
    Mat x = randn(6, 8, rng), g = randn(1, 8, rng), b = randn(1, 8, rng);
    g.array() += 2.0;  // keep the scale away from zero

    Tape t;
    Value y = t.layer_norm(t.param(x), t.param(g), t.param(b));
    for (long r = 0; r < 6; ++r) {
        const auto row = (t.val(y).row(r) - b.row(0)).cwiseQuotient(g.row(0));
        CHECK(row.mean() == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(row.array().square().mean() == doctest::Approx(1.0).epsilon(1e-4));
    }

    gradcheck::check({&x, &g, &b}, [&](Tape& t2) {
        return t2.sum_squares(t2.layer_norm(t2.param(x), t2.param(g), t2.param(b)));
    }, rng, 4);
}

TEST_CASE("gelu matches finite differences") {
    RngStream rng(3);
    Mat x = randn(5, 5, rng);
    gradcheck::check({&x}, [&](Tape& t) { return t.sum_squares(t.gelu(t.param(x))); }, rng, 6);
}

TEST_CASE("row reorganization ops match finite differences") {
    RngStream rng(4);
    Mat x = randn(8, 4, rng), y = randn(8, 4, rng), row = randn(1, 4, rng);
    const std::vector<int> perm{3, 1, 4, 1, 5, 0, 7, 2};  // includes a repeat

    gradcheck::check({&x, &y, &row}, [&](Tape& t) {
        Value vx = t.param(x);
        Value g = t.gather_rows(vx, perm);
        Value cat = t.concat_rows({g, t.param(y)});
        Value rep = t.replace_rows(cat, {0, 5, 9}, t.param(row));
        Value cols = t.concat_cols({rep, rep});
        Value s = t.slice_rows(cols, 2, 10);
        return t.sum_squares(t.mean_rows(s));
    }, rng, 4);
}

TEST_CASE("replace_rows sends masked-row gradients to the replacement row") {
    RngStream rng(5);
    Mat x = randn(4, 3, rng), row = randn(1, 3, rng);
    Tape t;
    Value vx = t.param(x), vr = t.param(row);
    Value y = t.replace_rows(vx, {1, 2}, vr);
    t.backward(t.sum_squares(y));
    const Mat gx = t.external_grad(x);
    CHECK(gx.row(1).isZero());
    CHECK(gx.row(2).isZero());
    CHECK(gx.row(0) == x.row(0));  // d(0.5 x^2) = x
    const Mat gr = t.external_grad(row);
    CHECK(gr.isApprox(2.0 * row));
}

TEST_CASE("windowed attention matches finite differences") {
    RngStream rng(6);
    const int heads = 2, win = 4;
    Mat q = randn(8, 6, rng), k = randn(8, 6, rng), v = randn(8, 6, rng);
    Mat bias = randn(16, heads, rng);

    SUBCASE("without masks") {
        gradcheck::check({&q, &k, &v, &bias}, [&](Tape& t) {
            Value a = t.windowed_attention(t.param(q), t.param(k), t.param(v), heads, win,
                                           t.param(bias), nullptr);
            return t.sum_squares(a);
        }, rng, 4, 1e-6, 1e-4);
    }

    SUBCASE("with additive masks") {
        auto masks = std::make_shared<std::vector<Mat>>();
        for (int w = 0; w < 2; ++w) {
            Mat m = Mat::Zero(win, win);
            m(0, 3) = m(3, 0) = -1e9;
            masks->push_back(m);
        }
        gradcheck::check({&q, &k, &v}, [&](Tape& t) {
            Value a = t.windowed_attention(t.param(q), t.param(k), t.param(v), heads, win,
                                           t.param(bias), masks);
            return t.sum_squares(a);
        }, rng, 4, 1e-6, 1e-4);
    }
}

TEST_CASE("windowed attention is block-diagonal") {
    RngStream rng(7);
    const int win = 3;
    Mat q = randn(9, 4, rng), k = randn(9, 4, rng), v = randn(9, 4, rng);
    Tape t;
    Value a0 = t.windowed_attention(t.param(q), t.param(k), t.param(v), 1, win);
    const Mat base = t.val(a0);

    // Changing tokens of one window leaves other windows untouched.
    Mat k2 = k;
    k2.row(0).setConstant(9.0);
    Mat v2 = v;
    v2.row(1).setConstant(-3.0);
    Tape t2;
    Value a1 = t2.windowed_attention(t2.param(q), t2.param(k2), t2.param(v2), 1, win);
    CHECK(t2.val(a1).bottomRows(6) == base.bottomRows(6));
    CHECK(t2.val(a1).topRows(3) != base.topRows(3));
}

TEST_CASE("cls attention matches finite differences and the plain softmax") {
    RngStream rng(8);
    const int heads = 2;
    const long n1 = 6, d = 8;
    Mat z = randn(n1, d, rng);
    Mat wq = randn(d, d, rng), wk = randn(d, d, rng), wv = randn(d, d, rng), wo = randn(d, d, rng);
    Mat bq = randn(1, d, rng), bk = randn(1, d, rng), bv = randn(1, d, rng), bo = randn(1, d, rng);

    Eigen::RowVectorXd probs;
    Mat per_head;
    Tape t;
    Value out = t.cls_attention(t.param(z), t.param(wq), t.param(bq), t.param(wk), t.param(bk),
                                t.param(wv), t.param(bv), t.param(wo), t.param(bo), heads, &probs,
                                &per_head);
    CHECK(t.val(out).rows() == 1);
    CHECK(per_head.rows() == heads);
    for (int h = 0; h < heads; ++h)
        CHECK(per_head.row(h).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-12));

    gradcheck::check({&z, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}, [&](Tape& t2) {
        Value o = t2.cls_attention(t2.param(z), t2.param(wq), t2.param(bq), t2.param(wk),
                                   t2.param(bk), t2.param(wv), t2.param(bv), t2.param(wo),
                                   t2.param(bo), heads, nullptr, nullptr);
        return t2.sum_squares(o);
    }, rng, 3, 1e-6, 1e-4);
}

TEST_CASE("ce_const_mean value and gradient") {
    RngStream rng(9);
    Mat logits = randn(4, 5, rng);
    Mat targets(4, 5);
    for (long r = 0; r < 4; ++r) {
        Eigen::RowVectorXd t = randn(1, 5, rng).array().exp();
        targets.row(r) = t / t.sum();
    }

    // Value agrees with a direct evaluation.
    Tape t;
    Value l = t.ce_const_mean(t.param(logits), targets, {0, 2}, 2.0);
    double expect = 0;
    for (int r : {0, 2}) {
        std::vector<double> lv(5), tv(5);
        for (int j = 0; j < 5; ++j) {
            lv[static_cast<size_t>(j)] = logits(r, j) * 2.0;
            tv[static_cast<size_t>(j)] = targets(r, j);
        }
        expect += oracle::cross_entropy(tv, oracle::softmax(lv));
    }
    expect /= 2.0;
    CHECK(t.scalar(l) == doctest::Approx(expect).epsilon(1e-12));

    gradcheck::check({&logits}, [&](Tape& t2) {
        return t2.ce_const_mean(t2.param(logits), targets, {0, 2, 3}, 2.0);
    }, rng, 8, 1e-6, 1e-5);

    // Empty row set is exactly zero with no gradient.
    Tape t3;
    Value z = t3.ce_const_mean(t3.param(logits), targets, {}, 1.0);
    CHECK(t3.scalar(z) == 0.0);
}

TEST_CASE("l1_mean_at value and gradient") {
    RngStream rng(10);
    Mat pred = randn(4, 6, rng);
    Mat target = randn(4, 6, rng);
    std::vector<std::pair<int, int>> elems{{0, 0}, {1, 3}, {2, 5}, {3, 2}};

    Tape t;
    Value l = t.l1_mean_at(t.param(pred), target, elems);
    double expect = 0;
    for (auto [r, c] : elems) expect += std::abs(pred(r, c) - target(r, c));
    expect /= 4.0;
    CHECK(t.scalar(l) == doctest::Approx(expect).epsilon(1e-12));

    gradcheck::check({&pred}, [&](Tape& t2) {
        return t2.l1_mean_at(t2.param(pred), target, elems);
    }, rng, 6, 1e-7, 1e-5);
}

TEST_CASE("weighted_sum composes scalars linearly") {
    RngStream rng(11);
    Mat a = randn(3, 3, rng), b = randn(3, 3, rng);
    Tape t;
    Value la = t.sum_squares(t.param(a));
    Value lb = t.sum_squares(t.param(b));
    Value total = t.weighted_sum({{la, 1.0}, {lb, 0.1}});
    CHECK(t.scalar(total) == doctest::Approx(t.scalar(la) + 0.1 * t.scalar(lb)));
    t.backward(total);
    CHECK(t.external_grad(a).isApprox(a));
    CHECK(t.external_grad(b).isApprox(0.1 * b));
}

TEST_CASE("no-grad tape records no backward closures") {
    RngStream rng(12);
    Mat a = randn(3, 3, rng);
    Tape t(false);
    Value x = t.param(a);
    Value y = t.sum_squares(t.gelu(x));
    CHECK(t.scalar(y) > 0.0);
    CHECK_THROWS_AS(t.backward(y), Error);
    CHECK(t.external_grad(a).isZero());
}

}  // TEST_SUITE
