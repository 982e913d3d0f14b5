#include "optim.hpp"

#include <cmath>

#include "common.hpp"

namespace resflow {

Adam::Adam(std::size_t n, Params params) : params_(params), m_(n, 0.0), v_(n, 0.0) {
    require(params.lr >= 0.0, ErrorCode::config, "learning rate must be non-negative");
    require(params.weight_decay >= 0.0 && params.weight_decay < 1.0, ErrorCode::config,
            "weight decay must lie in [0, 1)");
    require(params.beta1 >= 0.0 && params.beta1 < 1.0 && params.beta2 >= 0.0 && params.beta2 < 1.0,
            ErrorCode::config, "Adam betas must lie in [0, 1)");
}

void Adam::step(std::span<double> theta, std::span<const double> grad) {
    require(theta.size() == m_.size() && grad.size() == m_.size(), ErrorCode::structural,
            "Adam parameter/gradient size mismatch");
    ++t_;
    const auto& p = params_;
    const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        m_[i] = p.beta1 * m_[i] + (1.0 - p.beta1) * grad[i];
        v_[i] = p.beta2 * v_[i] + (1.0 - p.beta2) * grad[i] * grad[i];
        const double update = (m_[i] / c1) / (std::sqrt(v_[i] / c2) + p.eps);
        theta[i] = (1.0 - p.weight_decay) * theta[i] - p.lr * update;
    }
}

void Adam::restore(long long t, std::vector<double> m, std::vector<double> v) {
    require(m.size() == m_.size() && v.size() == v_.size(), ErrorCode::structural, "Adam state size mismatch");
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

PolyakAverage::PolyakAverage(std::span<const double> initial, double decay)
    : shadow_(initial.begin(), initial.end()), decay_(decay) {
    require(decay >= 0.0 && decay < 1.0, ErrorCode::config, "Polyak decay must lie in [0, 1)");
}

void PolyakAverage::update(std::span<const double> theta) {
    require(theta.size() == shadow_.size(), ErrorCode::structural, "Polyak size mismatch");
    for (std::size_t i = 0; i < theta.size(); ++i) shadow_[i] = decay_ * shadow_[i] + (1.0 - decay_) * theta[i];
}

}  // namespace resflow
