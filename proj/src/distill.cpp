#include "smart/distill.hpp"

#include <cmath>
#include <numbers>

namespace smart {

void SharpenConfig::validate() const {
    if (!(tau_s > 0.0)) throw ValidationError("SharpenConfig: tau_s must be positive");
    if (!(tau_t_start > 0.0) || !(tau_t_end > 0.0))
        throw ValidationError("SharpenConfig: teacher temperatures must be positive");
    if (center_momentum < 0.0 || center_momentum >= 1.0)
        throw ValidationError("SharpenConfig: center momentum must be in [0,1)");
    if (tau_t_warmup_frac < 0.0 || tau_t_warmup_frac > 1.0)
        throw ValidationError("SharpenConfig: warmup fraction must be in [0,1]");
}

double SharpenConfig::tau_t(long step, long total_steps) const {
    const double warmup = tau_t_warmup_frac * static_cast<double>(total_steps);
    if (warmup <= 0.0 || static_cast<double>(step) >= warmup) return tau_t_end;
    return tau_t_start + (tau_t_end - tau_t_start) * static_cast<double>(step) / warmup;
}

Vec sharpen(const Vec& logits, double tau, const Vec* center) {
    if (!(tau > 0.0)) throw ValidationError("sharpen: tau must be positive");
    Vec shifted = logits;
    if (center) {
        if (center->size() != logits.size()) throw ShapeError("sharpen: center length mismatch");
        shifted -= *center;
    }
    shifted /= tau;
    const double mx = shifted.maxCoeff();
    Vec out = (shifted.array() - mx).exp();
    out /= out.sum();
    return out;
}

void update_center(TeacherState& state, const Mat& batch_teacher_logits, double momentum) {
    if (!batch_teacher_logits.allFinite())
        throw ValidationError("update_center: non-finite teacher logits");
    const Vec mean = batch_teacher_logits.colwise().mean().transpose();
    if (state.center.size() == 0) state.center = Vec::Zero(mean.size());
    if (state.center.size() != mean.size())
        throw ShapeError("update_center: center length mismatch");
    state.center = momentum * state.center + (1.0 - momentum) * mean;
}

namespace {

void check_probability(const Vec& p, const char* what) {
    if (std::abs(p.sum() - 1.0) > 1e-4)
        throw ValidationError(std::string(what) + ": input is not a probability vector");
}

double cross_entropy(const Vec& p_t, const Vec& p_s) {
    if (p_t.size() != p_s.size()) throw ShapeError("cross_entropy: length mismatch");
    check_probability(p_t, "cross_entropy teacher");
    check_probability(p_s, "cross_entropy student");
    return -(p_t.array() * p_s.array().max(kLogClamp).log()).sum();
}

}  // namespace

double aitd_loss(const Vec& p_teacher, const Vec& p_student) {
    return cross_entropy(p_teacher, p_student);
}

double gitd_loss(const Vec& p_teacher, const Vec& p_student) {
    return cross_entropy(p_teacher, p_student);
}

double ampd_loss(const Mat& p_teacher, const Mat& p_student, const MaskVector& stage3_mask) {
    if (p_teacher.rows() != p_student.rows() || p_teacher.cols() != p_student.cols())
        throw ShapeError("ampd_loss: distribution shape mismatch");
    if (stage3_mask.count() != p_teacher.rows())
        throw ShapeError("ampd_loss: mask length differs from row count");
    if (stage3_mask.masked_idx.empty()) return 0.0;
    double loss = 0.0;
    for (int r : stage3_mask.masked_idx)
        loss += cross_entropy(p_teacher.row(r).transpose(), p_student.row(r).transpose());
    return loss / static_cast<double>(stage3_mask.masked_idx.size());
}

double amip_loss(const GridD& reconstruction, const GridD& target, const MaskVector& input_mask,
                 int patch_size) {
    if (!reconstruction.same_shape(target)) throw ShapeError("amip_loss: grid shape mismatch");
    if (input_mask.masked_idx.empty()) return 0.0;
    const std::array<int, 3> grid{target.dims()[0] / patch_size, target.dims()[1] / patch_size,
                                  target.dims()[2] / patch_size};
    if (static_cast<long>(grid[0]) * grid[1] * grid[2] != input_mask.count())
        throw ShapeError("amip_loss: mask does not match the patch grid");

    double loss = 0.0;
    long n = 0;
    for (int idx : input_mask.masked_idx) {
        const int z = idx / (grid[1] * grid[2]);
        const int y = (idx / grid[2]) % grid[1];
        const int x = idx % grid[2];
        for (int dz = 0; dz < patch_size; ++dz)
            for (int dy = 0; dy < patch_size; ++dy)
                for (int dx = 0; dx < patch_size; ++dx) {
                    const int vz = z * patch_size + dz;
                    const int vy = y * patch_size + dy;
                    const int vx = x * patch_size + dx;
                    loss += std::abs(reconstruction.at(vz, vy, vx) - target.at(vz, vy, vx));
                    ++n;
                }
    }
    return loss / static_cast<double>(n);
}

LossBundle total_loss(double amip, double ampd, double aitd, double gitd,
                      const LossWeights& weights) {
    for (double v : {amip, ampd, aitd, gitd}) {
        if (!std::isfinite(v)) throw NumericError("total_loss: non-finite component");
    }
    LossBundle b;
    b.amip = amip;
    b.ampd = ampd;
    b.aitd = aitd;
    b.gitd = gitd;
    b.weights = weights;
    b.total = amip + weights.ampd * ampd + weights.aitd * aitd + weights.gitd * gitd;
    return b;
}

double momentum_schedule(long step, long total_steps) {
    if (step < 0 || step > total_steps || total_steps <= 0)
        throw ValidationError("momentum_schedule: step out of range");
    const double phase = std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps);
    return 1.0 - (1.0 - 0.996) * (std::cos(phase) + 1.0) / 2.0;
}

void ema_update(TeacherState& teacher, const Parameters& student, double lambda) {
    if (!teacher.params.same_shapes(student))
        throw Error("ema_update: teacher/student parameter sets differ");
    for (size_t i = 0; i < student.count(); ++i) {
        auto& t = teacher.params.value(static_cast<int>(i));
        t = lambda * t + (1.0 - lambda) * student.value(static_cast<int>(i));
    }
    teacher.step += 1;
}

}  // namespace smart
