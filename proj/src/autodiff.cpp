#include "smart/autodiff.hpp"

#include <cmath>

namespace smart::ad {

const Mat Tape::empty_;

Mat& softmax_rows_inplace(Mat& m) {
    for (long r = 0; r < m.rows(); ++r) {
        const double mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp();
        m.row(r) /= m.row(r).sum();
    }
    return m;
}

const Mat& Tape::val(Value v) const {
    const Node& n = nodes_[static_cast<size_t>(v.idx)];
    return n.external ? *n.external : n.owned;
}

double Tape::scalar(Value v) const {
    const Mat& m = val(v);
    if (m.size() != 1) throw ShapeError("Tape::scalar: value is not 1x1");
    return m(0, 0);
}

const Mat& Tape::grad(Value v) const {
    const Node& n = nodes_[static_cast<size_t>(v.idx)];
    return n.grad.size() ? n.grad : empty_;
}

Mat& Tape::grad_ref(Value v) {
    Node& n = nodes_[static_cast<size_t>(v.idx)];
    if (n.grad.size() == 0) {
        const Mat& value = n.external ? *n.external : n.owned;
        n.grad = Mat::Zero(value.rows(), value.cols());
    }
    return n.grad;
}

Mat Tape::external_grad(const Mat& m) const {
    Mat total = Mat::Zero(m.rows(), m.cols());
    for (const Node& n : nodes_) {
        if (n.external == &m && n.grad.size() != 0) total += n.grad;
    }
    return total;
}

void Tape::for_each_external_grad(
    const std::function<void(const Mat* external, const Mat& grad)>& fn) const {
    for (const Node& n : nodes_) {
        if (n.external && n.grad.size() != 0) fn(n.external, n.grad);
    }
}

void Tape::backward(Value loss) {
    if (!grad_enabled_) throw Error("Tape::backward called with gradients disabled");
    grad_ref(loss).setConstant(1.0);
    for (int i = loss.idx; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.backward && n.grad.size() != 0) n.backward(*this);
    }
}

Value Tape::param(const Mat& external) {
    nodes_.push_back(Node{{}, &external, {}, {}});
    return Value{static_cast<int>(nodes_.size()) - 1};
}

Value Tape::input(Mat v) { return push(std::move(v)); }

Value Tape::matmul(Value a, Value b) {
    Value out = push(val(a) * val(b));
    set_backward(out, [out, a, b](Tape& t) {
        const Mat& g = t.grad(out);
        t.grad_ref(a).noalias() += g * t.val(b).transpose();
        t.grad_ref(b).noalias() += t.val(a).transpose() * g;
    });
    return out;
}

Value Tape::add(Value a, Value b) {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
        throw ShapeError("Tape::add: shape mismatch");
    Value out = push(val(a) + val(b));
    set_backward(out, [out, a, b](Tape& t) {
        t.grad_ref(a) += t.grad(out);
        t.grad_ref(b) += t.grad(out);
    });
    return out;
}

Value Tape::sub(Value a, Value b) {
    Value out = push(val(a) - val(b));
    set_backward(out, [out, a, b](Tape& t) {
        t.grad_ref(a) += t.grad(out);
        t.grad_ref(b) -= t.grad(out);
    });
    return out;
}

Value Tape::add_row(Value x, Value row) {
    if (val(row).rows() != 1 || val(row).cols() != val(x).cols())
        throw ShapeError("Tape::add_row: row must be 1 x cols(x)");
    Mat v = val(x);
    v.rowwise() += val(row).row(0);
    Value out = push(std::move(v));
    set_backward(out, [out, x, row](Tape& t) {
        const Mat& g = t.grad(out);
        t.grad_ref(x) += g;
        t.grad_ref(row) += g.colwise().sum();
    });
    return out;
}

Value Tape::mul_row(Value x, Value row) {
    if (val(row).rows() != 1 || val(row).cols() != val(x).cols())
        throw ShapeError("Tape::mul_row: row must be 1 x cols(x)");
    Mat v = val(x);
    v.array().rowwise() *= val(row).row(0).array();
    Value out = push(std::move(v));
    set_backward(out, [out, x, row](Tape& t) {
        const Mat& g = t.grad(out);
        t.grad_ref(x).array() += g.array().rowwise() * t.val(row).row(0).array();
        t.grad_ref(row).array() += (g.array() * t.val(x).array()).colwise().sum();
    });
    return out;
}

Value Tape::scale(Value x, double c) {
    Value out = push(val(x) * c);
    set_backward(out, [out, x, c](Tape& t) { t.grad_ref(x) += t.grad(out) * c; });
    return out;
}

Value Tape::layer_norm(Value x, Value gamma, Value beta, double eps) {
    const Mat& v = val(x);
    const long rows = v.rows(), cols = v.cols();
    if (val(gamma).cols() != cols || val(beta).cols() != cols)
        throw ShapeError("Tape::layer_norm: affine width mismatch");

    // Cache normalized rows and inverse std for backward.
    auto xhat = std::make_shared<Mat>(rows, cols);
    auto inv_sd = std::make_shared<Eigen::VectorXd>(rows);
    Mat out_v(rows, cols);
    for (long r = 0; r < rows; ++r) {
        const double mean = v.row(r).mean();
        const double var = (v.row(r).array() - mean).square().mean();
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sd)(r) = is;
        xhat->row(r) = (v.row(r).array() - mean) * is;
        out_v.row(r) =
            (xhat->row(r).array() * val(gamma).row(0).array()) + val(beta).row(0).array();
    }
    Value out = push(std::move(out_v));
    set_backward(out, [out, x, gamma, beta, xhat, inv_sd](Tape& t) {
        const Mat& g = t.grad(out);
        t.grad_ref(beta) += g.colwise().sum();
        t.grad_ref(gamma).array() += (g.array() * xhat->array()).colwise().sum();
        Mat& gx = t.grad_ref(x);
        const auto gamma_row = t.val(gamma).row(0);
        for (long r = 0; r < g.rows(); ++r) {
            const Eigen::RowVectorXd gy = g.row(r).cwiseProduct(gamma_row);
            const double m1 = gy.mean();
            const double m2 = gy.cwiseProduct(xhat->row(r)).mean();
            gx.row(r).array() +=
                (*inv_sd)(r) * (gy.array() - m1 - xhat->row(r).array() * m2);
        }
    });
    return out;
}

namespace {
inline double gauss_cdf(double v) { return 0.5 * (1.0 + std::erf(v * 0.7071067811865475244)); }
inline double gauss_pdf(double v) { return 0.3989422804014326779 * std::exp(-0.5 * v * v); }
}  // namespace

Value Tape::gelu(Value x) {
    Mat out_v = val(x).unaryExpr([](double v) { return v * gauss_cdf(v); });
    Value out = push(std::move(out_v));
    set_backward(out, [out, x](Tape& t) {
        const Mat& v = t.val(x);
        t.grad_ref(x).array() +=
            t.grad(out).array() *
            v.unaryExpr([](double u) { return gauss_cdf(u) + u * gauss_pdf(u); }).array();
    });
    return out;
}

Value Tape::gather_rows(Value x, std::vector<int> idx) {
    const Mat& v = val(x);
    Mat out_v(static_cast<long>(idx.size()), v.cols());
    for (size_t i = 0; i < idx.size(); ++i) out_v.row(static_cast<long>(i)) = v.row(idx[i]);
    Value out = push(std::move(out_v));
    auto shared = std::make_shared<std::vector<int>>(std::move(idx));
    set_backward(out, [out, x, shared](Tape& t) {
        const Mat& g = t.grad(out);
        Mat& gx = t.grad_ref(x);
        for (size_t i = 0; i < shared->size(); ++i)
            gx.row((*shared)[i]) += g.row(static_cast<long>(i));
    });
    return out;
}

Value Tape::slice_rows(Value x, int begin, int count) {
    Value out = push(val(x).middleRows(begin, count));
    set_backward(out, [out, x, begin, count](Tape& t) {
        t.grad_ref(x).middleRows(begin, count) += t.grad(out);
    });
    return out;
}

Value Tape::concat_cols(const std::vector<Value>& xs) {
    long cols = 0;
    const long rows = val(xs.front()).rows();
    for (Value v : xs) {
        if (val(v).rows() != rows) throw ShapeError("Tape::concat_cols: row mismatch");
        cols += val(v).cols();
    }
    Mat out_v(rows, cols);
    long off = 0;
    for (Value v : xs) {
        out_v.middleCols(off, val(v).cols()) = val(v);
        off += val(v).cols();
    }
    Value out = push(std::move(out_v));
    auto parts = std::make_shared<std::vector<Value>>(xs);
    set_backward(out, [out, parts](Tape& t) {
        const Mat& g = t.grad(out);
        long off = 0;
        for (Value v : *parts) {
            const long c = t.val(v).cols();
            t.grad_ref(v) += g.middleCols(off, c);
            off += c;
        }
    });
    return out;
}

Value Tape::concat_rows(const std::vector<Value>& xs) {
    long rows = 0;
    const long cols = val(xs.front()).cols();
    for (Value v : xs) {
        if (val(v).cols() != cols) throw ShapeError("Tape::concat_rows: col mismatch");
        rows += val(v).rows();
    }
    Mat out_v(rows, cols);
    long off = 0;
    for (Value v : xs) {
        out_v.middleRows(off, val(v).rows()) = val(v);
        off += val(v).rows();
    }
    Value out = push(std::move(out_v));
    auto parts = std::make_shared<std::vector<Value>>(xs);
    set_backward(out, [out, parts](Tape& t) {
        const Mat& g = t.grad(out);
        long off = 0;
        for (Value v : *parts) {
            const long r = t.val(v).rows();
            t.grad_ref(v) += g.middleRows(off, r);
            off += r;
        }
    });
    return out;
}

Value Tape::replace_rows(Value x, std::vector<int> idx, Value row) {
    if (val(row).rows() != 1 || val(row).cols() != val(x).cols())
        throw ShapeError("Tape::replace_rows: row must be 1 x cols(x)");
    Mat v = val(x);
    for (int i : idx) v.row(i) = val(row).row(0);
    Value out = push(std::move(v));
    auto shared = std::make_shared<std::vector<int>>(std::move(idx));
    set_backward(out, [out, x, row, shared](Tape& t) {
        Mat g = t.grad(out);
        Mat& gr = t.grad_ref(row);
        for (int i : *shared) {
            gr += g.row(i);
            g.row(i).setZero();
        }
        t.grad_ref(x) += g;
    });
    return out;
}

Value Tape::mean_rows(Value x) {
    // val() references die on push (nodes_ may reallocate): read everything first.
    const double inv_n = 1.0 / static_cast<double>(val(x).rows());
    Mat out_v = val(x).colwise().mean();
    Value out = push(std::move(out_v));
    set_backward(out, [out, x, inv_n](Tape& t) {
        const Mat& g = t.grad(out);
        t.grad_ref(x).rowwise() += (g.row(0) * inv_n);
    });
    return out;
}

Value Tape::windowed_attention(Value q, Value k, Value v, int heads, int win_len, Value bias,
                               std::shared_ptr<const std::vector<Mat>> win_masks) {
    const Mat& qv = val(q);
    const long n = qv.rows(), c = qv.cols();
    if (n % win_len != 0) throw ShapeError("windowed_attention: rows not divisible by window length");
    if (c % heads != 0) throw ShapeError("windowed_attention: width not divisible by heads");
    const long n_win = n / win_len;
    const long dh = c / heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool with_bias = bias.valid();
    if (with_bias &&
        (val(bias).rows() != static_cast<long>(win_len) * win_len || val(bias).cols() != heads))
        throw ShapeError("windowed_attention: bias must be win_len^2 x heads");
    if (win_masks && static_cast<long>(win_masks->size()) != n_win)
        throw ShapeError("windowed_attention: one mask per window required");

    auto probs = std::make_shared<std::vector<Mat>>();
    probs->reserve(static_cast<size_t>(n_win * heads));
    Mat out_v(n, c);
    Mat bias_mat;
    for (long w = 0; w < n_win; ++w) {
        for (int h = 0; h < heads; ++h) {
            const auto qb = qv.block(w * win_len, h * dh, win_len, dh);
            const auto kb = val(k).block(w * win_len, h * dh, win_len, dh);
            const auto vb = val(v).block(w * win_len, h * dh, win_len, dh);
            Mat logits = (qb * kb.transpose()) * scl;
            if (with_bias) {
                const auto& bcol = val(bias).col(h);
                for (int i = 0; i < win_len; ++i)
                    for (int j = 0; j < win_len; ++j)
                        logits(i, j) += bcol(static_cast<long>(i) * win_len + j);
            }
            if (win_masks) logits += (*win_masks)[static_cast<size_t>(w)];
            softmax_rows_inplace(logits);
            out_v.block(w * win_len, h * dh, win_len, dh).noalias() = logits * vb;
            if (grad_enabled_) probs->push_back(std::move(logits));
        }
    }
    Value out = push(std::move(out_v));
    set_backward(out, [out, q, k, v, bias, heads, win_len, probs, scl, with_bias](Tape& t) {
        const Mat& g = t.grad(out);
        const long c = g.cols();
        const long dh = c / heads;
        const long n_win = g.rows() / win_len;
        Mat& gq = t.grad_ref(q);
        Mat& gk = t.grad_ref(k);
        Mat& gv = t.grad_ref(v);
        Mat* gb = with_bias ? &t.grad_ref(bias) : nullptr;
        for (long w = 0; w < n_win; ++w) {
            for (int h = 0; h < heads; ++h) {
                const Mat& p = (*probs)[static_cast<size_t>(w * heads + h)];
                const auto gy = g.block(w * win_len, h * dh, win_len, dh);
                const auto qb = t.val(q).block(w * win_len, h * dh, win_len, dh);
                const auto kb = t.val(k).block(w * win_len, h * dh, win_len, dh);
                const auto vb = t.val(v).block(w * win_len, h * dh, win_len, dh);

                gv.block(w * win_len, h * dh, win_len, dh).noalias() += p.transpose() * gy;
                Mat dp = gy * vb.transpose();
                const Eigen::VectorXd dot = (dp.array() * p.array()).rowwise().sum();
                Mat dl = (dp.colwise() - dot).array() * p.array();
                gq.block(w * win_len, h * dh, win_len, dh).noalias() += (dl * kb) * scl;
                gk.block(w * win_len, h * dh, win_len, dh).noalias() +=
                    (dl.transpose() * qb) * scl;
                if (gb) {
                    for (int i = 0; i < win_len; ++i)
                        for (int j = 0; j < win_len; ++j)
                            (*gb)(static_cast<long>(i) * win_len + j, h) += dl(i, j);
                }
            }
        }
    });
    return out;
}

Value Tape::cls_attention(Value z, Value wq, Value bq, Value wk, Value bk, Value wv, Value bv,
                          Value wo, Value bo, int heads, Eigen::RowVectorXd* probs_out,
                          Mat* per_head_out) {
    const Mat& zv = val(z);
    const long n1 = zv.rows(), d = zv.cols();
    if (d % heads != 0) throw ShapeError("cls_attention: width not divisible by heads");
    const long dh = d / heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

    // Forward: query from the last row (CLS), keys/values from all rows.
    Mat qrow = zv.row(n1 - 1) * val(wq) + val(bq);
    Mat kmat = (zv * val(wk)).rowwise() + val(bk).row(0);
    Mat vmat = (zv * val(wv)).rowwise() + val(bv).row(0);

    auto probs = std::make_shared<Mat>(heads, n1);
    Mat ctx(1, d);
    for (int h = 0; h < heads; ++h) {
        Eigen::RowVectorXd logits =
            (qrow.middleCols(h * dh, dh) * kmat.middleCols(h * dh, dh).transpose()) * scl;
        const double mx = logits.maxCoeff();
        logits = (logits.array() - mx).exp();
        logits /= logits.sum();
        probs->row(h) = logits;
        ctx.middleCols(h * dh, dh).noalias() = logits * vmat.middleCols(h * dh, dh);
    }
    Mat out_v = ctx * val(wo) + val(bo);
    if (probs_out) *probs_out = probs->colwise().mean();
    if (per_head_out) *per_head_out = *probs;

    Value out = push(std::move(out_v));
    auto qr = std::make_shared<Mat>(std::move(qrow));
    auto km = std::make_shared<Mat>(std::move(kmat));
    auto vm = std::make_shared<Mat>(std::move(vmat));
    auto cx = std::make_shared<Mat>(std::move(ctx));
    set_backward(out, [=](Tape& t) {
        const Mat& g = t.grad(out);  // 1 x d
        const Mat& zv = t.val(z);
        const long n1 = zv.rows(), d = zv.cols();
        const long dh = d / heads;

        t.grad_ref(bo) += g;
        t.grad_ref(wo).noalias() += cx->transpose() * g;
        const Mat dctx = g * t.val(wo).transpose();  // 1 x d

        Mat dq(1, d);
        Mat dk = Mat::Zero(n1, d);
        Mat dv = Mat::Zero(n1, d);
        for (int h = 0; h < heads; ++h) {
            const auto p = probs->row(h);  // 1 x n1
            const auto gy = dctx.middleCols(h * dh, dh);
            dv.middleCols(h * dh, dh).noalias() += p.transpose() * gy;
            Eigen::RowVectorXd dp = (gy * vm->middleCols(h * dh, dh).transpose());
            const double dot = dp.cwiseProduct(p).sum();
            Eigen::RowVectorXd dl = (dp.array() - dot) * p.array();
            dq.middleCols(h * dh, dh).noalias() = (dl * km->middleCols(h * dh, dh)) * scl;
            dk.middleCols(h * dh, dh).noalias() +=
                dl.transpose() * qr->middleCols(h * dh, dh) * scl;
        }

        Mat& gz = t.grad_ref(z);
        t.grad_ref(bq) += dq;
        t.grad_ref(wq).noalias() += zv.row(n1 - 1).transpose() * dq;
        gz.row(n1 - 1).noalias() += dq * t.val(wq).transpose();
        t.grad_ref(bk) += dk.colwise().sum();
        t.grad_ref(wk).noalias() += zv.transpose() * dk;
        gz.noalias() += dk * t.val(wk).transpose();
        t.grad_ref(bv) += dv.colwise().sum();
        t.grad_ref(wv).noalias() += zv.transpose() * dv;
        gz.noalias() += dv * t.val(wv).transpose();
    });
    return out;
}

Value Tape::ce_const_mean(Value logits, Mat targets, std::vector<int> rows, double inv_tau,
                          double clamp) {
    if (rows.empty()) return zero_scalar();
    const Mat& lv = val(logits);
    if (targets.rows() != lv.rows() || targets.cols() != lv.cols())
        throw ShapeError("ce_const_mean: target shape mismatch");

    auto probs = std::make_shared<Mat>(static_cast<long>(rows.size()), lv.cols());
    double loss = 0.0;
    for (size_t i = 0; i < rows.size(); ++i) {
        Eigen::RowVectorXd p = lv.row(rows[i]) * inv_tau;
        const double mx = p.maxCoeff();
        p = (p.array() - mx).exp();
        p /= p.sum();
        probs->row(static_cast<long>(i)) = p;
        loss -= (targets.row(rows[i]).array() * p.array().max(clamp).log()).sum();
    }
    loss /= static_cast<double>(rows.size());

    Value out = push(Mat::Constant(1, 1, loss));
    auto tgt = std::make_shared<Mat>(std::move(targets));
    auto rws = std::make_shared<std::vector<int>>(std::move(rows));
    set_backward(out, [out, logits, tgt, rws, probs, inv_tau, clamp](Tape& t) {
        const double gscale = t.grad(out)(0, 0) / static_cast<double>(rws->size());
        Mat& gl = t.grad_ref(logits);
        for (size_t i = 0; i < rws->size(); ++i) {
            const int r = (*rws)[i];
            const auto p = probs->row(static_cast<long>(i)).array();
            // dL/dp with the clamp: zero where the clamp is active.
            const Eigen::ArrayXd gp =
                ((p > clamp).cast<double>() * (-tgt->row(r).array() / p.max(clamp))).transpose();
            const double dot = (gp * p.transpose()).sum();
            gl.row(r).array() += gscale * inv_tau * (gp.transpose() - dot) * p;
        }
    });
    return out;
}

Value Tape::l1_mean_at(Value pred, Mat target, std::vector<std::pair<int, int>> elems) {
    if (elems.empty()) return zero_scalar();
    const Mat& pv = val(pred);
    if (target.rows() != pv.rows() || target.cols() != pv.cols())
        throw ShapeError("l1_mean_at: target shape mismatch");
    double loss = 0.0;
    for (const auto& [r, c] : elems) loss += std::abs(pv(r, c) - target(r, c));
    loss /= static_cast<double>(elems.size());

    Value out = push(Mat::Constant(1, 1, loss));
    auto tgt = std::make_shared<Mat>(std::move(target));
    auto el = std::make_shared<std::vector<std::pair<int, int>>>(std::move(elems));
    set_backward(out, [out, pred, tgt, el](Tape& t) {
        const double gscale = t.grad(out)(0, 0) / static_cast<double>(el->size());
        Mat& gp = t.grad_ref(pred);
        const Mat& pv = t.val(pred);
        for (const auto& [r, c] : *el) {
            const double d = pv(r, c) - (*tgt)(r, c);
            gp(r, c) += gscale * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
        }
    });
    return out;
}

Value Tape::weighted_sum(const std::vector<std::pair<Value, double>>& terms) {
    double total = 0.0;
    for (const auto& [v, w] : terms) total += scalar(v) * w;
    Value out = push(Mat::Constant(1, 1, total));
    auto shared = std::make_shared<std::vector<std::pair<Value, double>>>(terms);
    set_backward(out, [out, shared](Tape& t) {
        const double g = t.grad(out)(0, 0);
        for (const auto& [v, w] : *shared) t.grad_ref(v)(0, 0) += g * w;
    });
    return out;
}

Value Tape::zero_scalar() { return push(Mat::Zero(1, 1)); }

Value Tape::sum_squares(Value x) {
    Value out = push(Mat::Constant(1, 1, 0.5 * val(x).squaredNorm()));
    set_backward(out, [out, x](Tape& t) {
        t.grad_ref(x) += t.grad(out)(0, 0) * t.val(x);
    });
    return out;
}

}  // namespace smart::ad
