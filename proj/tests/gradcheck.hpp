// Central finite-difference gradient checking shared by autodiff and model
// tests. Loss builders must be pure functions of the referenced parameter
// matrices (bound on the tape via Tape::param).
#pragma once

#include <doctest.h>

#include <functional>
#include <vector>

#include "smart/autodiff.hpp"
#include "smart/rng.hpp"

namespace gradcheck {

using Mat = smart::ad::Mat;
using BuildFn = std::function<smart::ad::Value(smart::ad::Tape&)>;

inline double eval_loss(const BuildFn& build) {
    smart::ad::Tape t(false);
    return t.scalar(build(t));
}

struct Report {
    int checked = 0;
    double max_rel_err = 0.0;
};

// Probes `per_param` random entries of each parameter matrix: analytic
// gradient from one backward pass vs central finite differences from two
// no-grad evaluations. Relative error uses max(|fd|, |analytic|, floor).
inline Report check(const std::vector<Mat*>& params, const BuildFn& build, smart::RngStream& rng,
                    int per_param = 3, double eps = 1e-6, double tol = 1e-5,
                    double denom_floor = 1e-8) {
    smart::ad::Tape t;
    auto loss = build(t);
    t.backward(loss);
    std::vector<Mat> analytic;
    analytic.reserve(params.size());
    for (const Mat* p : params) analytic.push_back(t.external_grad(*p));

    Report rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Mat& p = *params[pi];
        for (int probe = 0; probe < per_param; ++probe) {
            const long r = rng.uniform_int(static_cast<int>(p.rows()));
            const long c = rng.uniform_int(static_cast<int>(p.cols()));
            const double orig = p(r, c);
            p(r, c) = orig + eps;
            const double lp = eval_loss(build);
            p(r, c) = orig - eps;
            const double lm = eval_loss(build);
            p(r, c) = orig;

            const double fd = (lp - lm) / (2 * eps);
            const double an = analytic[pi](r, c);
            const double rel =
                std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), denom_floor});
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
            ++rep.checked;
            CHECK_MESSAGE(rel <= tol, "param ", pi, " entry (", r, ",", c, "): fd=", fd,
                          " analytic=", an);
        }
    }
    return rep;
}

}  // namespace gradcheck
