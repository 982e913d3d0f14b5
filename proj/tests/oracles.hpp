#pragma once

// Independent reference computations used by the tests. Nothing here calls
// into the library's derivative code.

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "diffkit.hpp"
#include "lipconstraint.hpp"

namespace oracle {

using resflow::BlockParams;
using resflow::Mat;
using resflow::Rng;
using resflow::Vec;

inline double act(resflow::Activation a, double z, double beta) {
    switch (a) {
        case resflow::Activation::lipswish: return z / (1.0 + std::exp(-beta * z)) / 1.1;
        case resflow::Activation::softplus: return std::log(1.0 + std::exp(z));
        case resflow::Activation::elu: return z > 0 ? z : std::exp(z) - 1.0;
        case resflow::Activation::identity: return z;
    }
    return 0.0;
}

inline double softplus(double z) { return std::log(1.0 + std::exp(z)); }

// Straight-line evaluation of g(x) with explicit loops.
inline Vec ref_forward(const BlockParams& p, const Vec& x) {
    std::vector<double> h(x.data(), x.data() + x.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& L = p.layers[l];
        std::vector<double> z(L.weight.rows(), 0.0);
        for (Eigen::Index i = 0; i < L.weight.rows(); ++i) {
            double s = L.bias(i);
            for (Eigen::Index j = 0; j < L.weight.cols(); ++j) s += L.weight(i, j) * h[j];
            z[i] = s;
        }
        if (l + 1 < p.layers.size()) {
            const double beta = softplus(L.raw_beta);
            for (auto& v : z) v = act(p.activation, v, beta);
        }
        h = z;
    }
    return Eigen::Map<Vec>(h.data(), static_cast<Eigen::Index>(h.size()));
}

// Central-difference Jacobian of g.
inline Mat fd_jacobian(const BlockParams& p, const Vec& x, double h = 1e-5) {
    Mat J(x.size(), x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        Vec a = x, b = x;
        a(j) += h;
        b(j) -= h;
        J.col(j) = (ref_forward(p, a) - ref_forward(p, b)) / (2 * h);
    }
    return J;
}

// log det(I + J) from a finite-difference Jacobian.
inline double fd_logdet(const BlockParams& p, const Vec& x) {
    const Mat J = fd_jacobian(p, x);
    return std::log((Mat::Identity(x.size(), x.size()) + J).determinant());
}

inline double top_singular_value(const Mat& w) {
    if (w.size() == 0) return 0.0;
    Eigen::JacobiSVD<Mat> svd(w);
    return svd.singularValues()(0);
}

inline double max_col_abs_sum(const Mat& w) {
    double best = 0.0;
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
        double s = 0.0;
        for (Eigen::Index r = 0; r < w.rows(); ++r) s += std::abs(w(r, c));
        best = std::max(best, s);
    }
    return best;
}

inline double max_row_abs_sum(const Mat& w) { return max_col_abs_sum(w.transpose()); }

// Central differences of a scalar function of the flattened block
// parameters.
inline std::vector<double> fd_param_grad(const BlockParams& p, const std::function<double(const BlockParams&)>& f,
                                         double h = 1e-5) {
    auto theta = resflow::flatten_params(p);
    std::vector<double> g(theta.size());
    BlockParams q = p;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double t0 = theta[i];
        theta[i] = t0 + h;
        resflow::assign_params(q, theta);
        const double fp = f(q);
        theta[i] = t0 - h;
        resflow::assign_params(q, theta);
        const double fm = f(q);
        theta[i] = t0;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

// Random block with every layer norm set to `coeff` (spectral unless
// `order` says otherwise).
inline BlockParams random_block(Rng& rng, int dim, int hidden, double coeff, double order = 2.0,
                                resflow::Activation a = resflow::Activation::lipswish) {
    resflow::BlockInit init;
    init.dim = dim;
    init.hidden_width = hidden;
    init.activation = a;
    init.norm_order = order;
    init.target_norm = coeff;
    auto p = resflow::make_block(init, rng);
    std::normal_distribution<double> n(0.0, 0.5);
    for (auto& l : p.layers) {
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = n(rng);
        l.raw_beta += n(rng);
    }
    return p;
}

// 2 -> 8 -> 8 -> 2 block whose layers are aligned so J_g is close to a
// negative multiple of the identity with spectral radius around 0.3-0.6.
// Random blocks have tiny Jacobians, which makes series tests vacuous.
inline BlockParams diagnostic_like(Rng& rng, double coeff = 0.95) {
    std::normal_distribution<double> n;
    auto orth = [&](int r, int c) {
        Mat m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
        return Mat(Eigen::HouseholderQR<Mat>(m).householderQ() * Mat::Identity(r, c));
    };
    const Mat q1 = orth(8, 2), r = orth(8, 8);
    BlockParams p;
    resflow::LayerParams l0, l1, l2;
    l0.weight = coeff * q1;
    l1.weight = coeff * r;
    l2.weight = -coeff * (r * q1).transpose();
    l0.bias = Vec::Constant(8, 1.5) + 0.1 * Vec::NullaryExpr(8, [&] { return n(rng); });
    l1.bias = Vec::Constant(8, 1.5) + 0.1 * Vec::NullaryExpr(8, [&] { return n(rng); });
    l2.bias = Vec::Zero(2);
    l0.raw_beta = l1.raw_beta = l2.raw_beta = resflow::softplus_inverse(1.0);
    p.layers = {l0, l1, l2};
    return p;
}

// Block with a single affine layer g(x) = A x + b.
inline BlockParams linear_block(const Mat& A, const Vec& b) {
    BlockParams p;
    resflow::LayerParams l;
    l.weight = A;
    l.bias = b;
    p.layers.push_back(l);
    return p;
}

// Empirical sup of ||g(x) - g(y)||_p / ||x - y||_p over random pairs.
inline double empirical_lipschitz(const BlockParams& p, Rng& rng, int pairs, double order = 2.0, double scale = 3.0) {
    std::normal_distribution<double> n(0.0, scale);
    const int d = p.dim();
    double best = 0.0;
    for (int k = 0; k < pairs; ++k) {
        Vec x(d), y(d);
        for (int i = 0; i < d; ++i) {
            x(i) = n(rng);
            y(i) = x(i) + n(rng) * (k % 2 ? 1e-2 : 1.0);
        }
        const double num = resflow::vector_norm(ref_forward(p, x) - ref_forward(p, y), order);
        const double den = resflow::vector_norm(x - y, order);
        if (den > 0) best = std::max(best, num / den);
    }
    return best;
}

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= static_cast<double>(xs.size() - 1);
    return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

}  // namespace oracle
