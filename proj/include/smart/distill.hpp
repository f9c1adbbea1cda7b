#pragma once

#include "smart/masking.hpp"
#include "smart/model.hpp"

namespace smart {

struct SharpenConfig {
    double tau_s = 0.1;
    double tau_t_start = 0.04;
    double tau_t_end = 0.07;
    double tau_t_warmup_frac = 0.1;  // fraction of total steps
    double center_momentum = 0.9;

    void validate() const;
    // Linear warmup of the teacher temperature over the first warmup fraction.
    double tau_t(long step, long total_steps) const;
};

// EMA mirror of the student plus the centering vector.
struct TeacherState {
    Parameters params;
    Vec center;  // length K
    long step = 0;
    long total_steps = 0;
};

struct LossWeights {
    double ampd = 0.1;
    double aitd = 0.1;
    double gitd = 0.1;
};

struct LossBundle {
    double amip = 0.0;
    double ampd = 0.0;
    double aitd = 0.0;
    double gitd = 0.0;
    double total = 0.0;
    LossWeights weights;
};

// softmax((logits - center) / tau); center is the teacher-side centering
// vector and may be null.
Vec sharpen(const Vec& logits, double tau, const Vec* center = nullptr);

// center <- m * center + (1 - m) * column mean of the batch teacher logits.
void update_center(TeacherState& state, const Mat& batch_teacher_logits, double momentum);

// Cross-entropy -sum p_t log p_s with the log clamped at 1e-12. Inputs must
// be probability vectors (sums within 1e-4 of one).
double aitd_loss(const Vec& p_teacher, const Vec& p_student);
double gitd_loss(const Vec& p_teacher, const Vec& p_student);

// Mean over masked rows of the per-row cross-entropy; zero with nothing masked.
double ampd_loss(const Mat& p_teacher, const Mat& p_student, const MaskVector& stage3_mask);

// Mean absolute error over voxels of masked input patches; zero when empty.
double amip_loss(const GridD& reconstruction, const GridD& target, const MaskVector& input_mask,
                 int patch_size);

LossBundle total_loss(double amip, double ampd, double aitd, double gitd,
                      const LossWeights& weights);

// Cosine EMA momentum from 0.996 to 1 over the run.
double momentum_schedule(long step, long total_steps);

// theta_t <- lambda * theta_t + (1 - lambda) * theta_s; increments step.
void ema_update(TeacherState& teacher, const Parameters& student, double lambda);

constexpr double kLogClamp = 1e-12;

}  // namespace smart
