#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace w2w {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // L2 penalty folded into the gradient (coupled decay).
    double weight_decay = 0.0;
};

/// Adam over a flat parameter buffer.
class Adam {
public:
    Adam(std::size_t size, AdamConfig config) : config_(config), m_(size, 0.0), v_(size, 0.0) {}

    void step(std::span<double> params, std::span<const double> grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grads[i] + config_.weight_decay * params[i];
            m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
            v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g * g;
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            params[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }

    std::size_t steps() const noexcept { return t_; }
    double lr() const noexcept { return config_.lr; }
    void set_lr(double lr) noexcept { config_.lr = lr; }

private:
    AdamConfig config_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::size_t t_ = 0;
};

}  // namespace w2w
