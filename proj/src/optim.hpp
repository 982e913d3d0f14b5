#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace resflow {

// Adam with weight decay applied outside the adaptive step:
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - weight_decay * theta
class Adam {
public:
    struct Params {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.99;
        double eps = 1e-8;
        double weight_decay = 5e-4;
    };

    Adam() = default;
    Adam(std::size_t n, Params params);

    void step(std::span<double> theta, std::span<const double> grad);

    const Params& params() const { return params_; }
    long long steps() const { return t_; }
    const std::vector<double>& first_moment() const { return m_; }
    const std::vector<double>& second_moment() const { return v_; }
    void restore(long long t, std::vector<double> m, std::vector<double> v);

private:
    Params params_;
    std::vector<double> m_;
    std::vector<double> v_;
    long long t_ = 0;
};

// Exponential moving average of parameters: shadow <- d * shadow + (1 - d) * theta.
class PolyakAverage {
public:
    PolyakAverage() = default;
    PolyakAverage(std::span<const double> initial, double decay);

    void update(std::span<const double> theta);
    const std::vector<double>& shadow() const { return shadow_; }
    double decay() const { return decay_; }

private:
    std::vector<double> shadow_;
    double decay_ = 0.999;
};

}  // namespace resflow
