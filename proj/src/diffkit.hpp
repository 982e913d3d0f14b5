#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "activation.hpp"
#include "common.hpp"

namespace resflow {

// One dense layer of the residual branch. `raw_beta` parameterizes the
// activation that follows this layer (beta = softplus(raw_beta)); the last
// layer has no activation and its raw_beta is inert.
struct LayerParams {
    Mat weight;  // out x in
    Vec bias;    // out
    double raw_beta = 0.0;
    double norm_in = 2.0;   // in [1, inf]
    double norm_out = 2.0;  // in [1, inf]

    double beta() const { return softplus(raw_beta); }
};

// Residual branch g: z_0 = W_0 x + b_0, h_l = act(z_l), z_l = W_l h_{l-1} + b_l,
// g(x) = z_{L-1}. With L = 1 the branch is affine.
struct BlockParams {
    std::vector<LayerParams> layers;
    Activation activation = Activation::lipswish;

    int dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols()); }
    int hidden_width() const { return layers.size() < 2 ? 0 : static_cast<int>(layers.front().weight.rows()); }
    std::size_t num_activations() const { return layers.empty() ? 0 : layers.size() - 1; }

    // Throws ErrorCode::structural on inconsistent shapes or norm chains.
    void validate() const;
};

struct BlockInit {
    int dim = 2;
    int hidden_width = 128;
    int num_linear = 3;
    Activation activation = Activation::lipswish;
    double norm_order = 2.0;  // applied to every layer boundary
    double target_norm = 0.7 * 0.98;
    double initial_beta = 0.5;
};

// Semi-orthogonal weights (QR of a uniform draw) rescaled so each layer's
// induced norm equals target_norm; biases uniform in +-1/sqrt(fan_in).
BlockParams make_block(const BlockInit& init, Rng& rng);

// Gradient with the same layout as BlockParams (norm orders excluded).
struct ParamGradient {
    std::vector<Mat> weight;
    std::vector<Vec> bias;
    std::vector<double> raw_beta;

    static ParamGradient zeros_like(const BlockParams& params);

    ParamGradient& operator+=(const ParamGradient& other);
    ParamGradient& operator*=(double s);
    std::size_t size() const;
    std::vector<double> flatten() const;
};

// Flat views used by the optimizer and the finite-difference oracles. Order:
// per layer, weight (column-major), bias, then raw_beta for layers followed
// by an activation.
std::size_t param_count(const BlockParams& params);
std::vector<double> flatten_params(const BlockParams& params);
void assign_params(BlockParams& params, std::span<const double> flat);

// Pre-activations, activations and slopes for a batch (columns are samples).
// This is the only per-block state held while iterating JVP/VJP chains.
struct BlockTrace {
    Mat input;
    std::vector<Mat> pre;    // z_l, l = 0..L-1
    std::vector<Mat> post;   // act(z_l), l = 0..L-2
    std::vector<Mat> slope;  // act'(z_l), l = 0..L-2

    const Mat& output() const { return pre.back(); }
};

BlockTrace trace_block(const BlockParams& params, const Mat& x);
Mat block_forward(const BlockParams& params, const Mat& x);

// J_g(x) v per column.
Mat jvp(const BlockParams& params, const BlockTrace& trace, const Mat& v);
// u^T J_g(x) per column (returned as a column).
Mat vjp(const BlockParams& params, const BlockTrace& trace, const Mat& u);

// Adds d/dtheta sum_b u_b^T g(x_b) into grad; input_grad (if given) receives
// d/dx_b u_b^T g(x_b) per column.
void accumulate_output_grad(const BlockParams& params, const BlockTrace& trace, const Mat& u,
                            ParamGradient& grad, Mat* input_grad = nullptr);

// Adds d/dtheta sum_b u_b^T J_g(x_b) v_b into grad; input_grad (if given)
// receives d/dx_b u_b^T J_g(x_b) v_b. u and v are held fixed.
void accumulate_bilinear_grad(const BlockParams& params, const BlockTrace& trace, const Mat& u, const Mat& v,
                              ParamGradient& grad, Mat* input_grad = nullptr);

// Single-point conveniences.
Vec block_forward(const BlockParams& params, const Vec& x);
Vec block_jvp(const BlockParams& params, const Vec& x, const Vec& v);
Vec block_vjp(const BlockParams& params, const Vec& x, const Vec& u);
ParamGradient bilinear_param_grad(const BlockParams& params, const Vec& x, const Vec& u, const Vec& v);
ParamGradient block_param_grad_of_output(const BlockParams& params, const Vec& x, const Vec& u);

inline constexpr int kMaxDenseDim = 16;

// Column j is J_g(x) e_j. Refuses dim > kMaxDenseDim.
Mat block_dense_jacobian(const BlockParams& params, const Vec& x);

}  // namespace resflow
