#include "smart/optimizer.hpp"

#include <cmath>

namespace smart {

bool AdamW::decay_applies(const std::string& name) {
    for (const char* tag : {"norm", "bias", ".b", "ls1", "ls2", "cls_token", "mask_token",
                            "pos_embed", "rel_bias"}) {
        if (name.find(tag) != std::string::npos) return false;
    }
    return true;
}

AdamW::AdamW(const Parameters& params, AdamWConfig cfg) : cfg_(cfg) {
    m_.reserve(params.count());
    v_.reserve(params.count());
    decay_.reserve(params.count());
    for (size_t i = 0; i < params.count(); ++i) {
        const Mat& p = params.value(static_cast<int>(i));
        m_.push_back(Mat::Zero(p.rows(), p.cols()));
        v_.push_back(Mat::Zero(p.rows(), p.cols()));
        decay_.push_back(decay_applies(params.names()[i]));
    }
}

void AdamW::step(Parameters& params, const Gradients& grads, double lr) {
    if (grads.count() != params.count()) throw Error("AdamW: gradient store mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.count(); ++i) {
        Mat& p = params.value(static_cast<int>(i));
        const Mat& g = grads.at(static_cast<int>(i));
        Mat& m = m_[i];
        Mat& v = v_[i];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        const Mat mhat = m / bc1;
        const Mat vhat = v / bc2;
        if (decay_[i] && cfg_.weight_decay > 0.0) p -= lr * cfg_.weight_decay * p;
        p.array() -= lr * mhat.array() / (vhat.array().sqrt() + cfg_.eps);
    }
}

}  // namespace smart
