#pragma once

#include "smart/model.hpp"

namespace smart {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

// Decoupled-weight-decay Adam. Decay is skipped for normalization affines,
// biases, LayerScale, tokens, and position/relative-position tables.
class AdamW {
  public:
    AdamW(const Parameters& params, AdamWConfig cfg);

    void step(Parameters& params, const Gradients& grads, double lr);

    long steps_taken() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

    // Moment tensors for checkpointing, parallel to the parameter order.
    std::vector<Mat>& first_moments() { return m_; }
    std::vector<Mat>& second_moments() { return v_; }
    void set_steps_taken(long t) { t_ = t; }

    static bool decay_applies(const std::string& name);

  private:
    AdamWConfig cfg_;
    std::vector<Mat> m_, v_;
    std::vector<bool> decay_;
    long t_ = 0;
};

}  // namespace smart
