#include "diffkit.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/QR>

#include "lipconstraint.hpp"

namespace resflow {

namespace {

bool same_order(double a, double b) { return a == b; }

const Mat& layer_input(const BlockTrace& trace, std::size_t l) {
    return l == 0 ? trace.input : trace.post[l - 1];
}

void check_batch(const BlockParams& params, const BlockTrace& trace, const Mat& m, const char* what) {
    require(m.rows() == params.dim() && m.cols() == trace.input.cols(), ErrorCode::structural,
            std::string(what) + ": shape does not match block dimension/batch");
}

}  // namespace

void BlockParams::validate() const {
    require(!layers.empty(), ErrorCode::structural, "block has no layers");
    const auto d = layers.front().weight.cols();
    require(d > 0, ErrorCode::structural, "block input dimension is zero");
    require(layers.back().weight.rows() == d, ErrorCode::structural, "block output dimension differs from input");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        require(layer.bias.size() == layer.weight.rows(), ErrorCode::structural,
                "layer " + std::to_string(l) + ": bias size does not match weight rows");
        require(layer.norm_in >= 1.0 && layer.norm_out >= 1.0, ErrorCode::structural,
                "layer " + std::to_string(l) + ": norm order below 1");
        if (l > 0) {
            require(layer.weight.cols() == layers[l - 1].weight.rows(), ErrorCode::structural,
                    "layer " + std::to_string(l) + ": input dimension does not chain");
            require(same_order(layer.norm_in, layers[l - 1].norm_out), ErrorCode::structural,
                    "layer " + std::to_string(l) + ": norm orders do not chain");
        }
    }
    require(same_order(layers.front().norm_in, layers.back().norm_out), ErrorCode::structural,
            "block must map back to the normed space it starts in");
}

BlockParams make_block(const BlockInit& init, Rng& rng) {
    require(init.dim > 0 && init.num_linear >= 1, ErrorCode::structural, "invalid block shape");
    require(init.num_linear == 1 || init.hidden_width > 0, ErrorCode::structural, "hidden width must be positive");
    BlockParams params;
    params.activation = init.activation;
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double raw_beta = softplus_inverse(init.initial_beta);
    for (int l = 0; l < init.num_linear; ++l) {
        const int in = l == 0 ? init.dim : init.hidden_width;
        const int out = l == init.num_linear - 1 ? init.dim : init.hidden_width;
        LayerParams layer;
        Mat raw(std::max(out, in), std::min(out, in));
        for (Eigen::Index c = 0; c < raw.cols(); ++c)
            for (Eigen::Index r = 0; r < raw.rows(); ++r) raw(r, c) = unit(rng);
        // semi-orthogonal factor of the uniform draw
        const Mat q = Eigen::HouseholderQR<Mat>(raw).householderQ() * Mat::Identity(raw.rows(), raw.cols());
        layer.weight = out >= in ? q : Mat(q.transpose());
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        layer.bias = Vec(out);
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = bound * unit(rng);
        layer.raw_beta = raw_beta;
        layer.norm_in = init.norm_order;
        layer.norm_out = init.norm_order;
        const double norm = induced_norm(layer.weight, init.norm_order, init.norm_order);
        layer.weight *= init.target_norm / norm;
        params.layers.push_back(std::move(layer));
    }
    return params;
}

ParamGradient ParamGradient::zeros_like(const BlockParams& params) {
    ParamGradient g;
    for (const auto& layer : params.layers) {
        g.weight.push_back(Mat::Zero(layer.weight.rows(), layer.weight.cols()));
        g.bias.push_back(Vec::Zero(layer.bias.size()));
    }
    g.raw_beta.assign(params.num_activations(), 0.0);
    return g;
}

ParamGradient& ParamGradient::operator+=(const ParamGradient& other) {
    require(weight.size() == other.weight.size(), ErrorCode::structural, "gradient layouts differ");
    for (std::size_t l = 0; l < weight.size(); ++l) {
        weight[l] += other.weight[l];
        bias[l] += other.bias[l];
    }
    for (std::size_t l = 0; l < raw_beta.size(); ++l) raw_beta[l] += other.raw_beta[l];
    return *this;
}

ParamGradient& ParamGradient::operator*=(double s) {
    for (auto& w : weight) w *= s;
    for (auto& b : bias) b *= s;
    for (auto& r : raw_beta) r *= s;
    return *this;
}

std::size_t ParamGradient::size() const {
    std::size_t n = raw_beta.size();
    for (std::size_t l = 0; l < weight.size(); ++l) n += weight[l].size() + bias[l].size();
    return n;
}

std::vector<double> ParamGradient::flatten() const {
    std::vector<double> out;
    out.reserve(size());
    for (std::size_t l = 0; l < weight.size(); ++l) {
        out.insert(out.end(), weight[l].data(), weight[l].data() + weight[l].size());
        out.insert(out.end(), bias[l].data(), bias[l].data() + bias[l].size());
        if (l < raw_beta.size()) out.push_back(raw_beta[l]);
    }
    return out;
}

std::size_t param_count(const BlockParams& params) {
    std::size_t n = params.num_activations();
    for (const auto& layer : params.layers) n += layer.weight.size() + layer.bias.size();
    return n;
}

std::vector<double> flatten_params(const BlockParams& params) {
    std::vector<double> out;
    out.reserve(param_count(params));
    const auto n_act = params.num_activations();
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& layer = params.layers[l];
        out.insert(out.end(), layer.weight.data(), layer.weight.data() + layer.weight.size());
        out.insert(out.end(), layer.bias.data(), layer.bias.data() + layer.bias.size());
        if (l < n_act) out.push_back(layer.raw_beta);
    }
    return out;
}

void assign_params(BlockParams& params, std::span<const double> flat) {
    require(flat.size() == param_count(params), ErrorCode::structural, "flat parameter vector has wrong length");
    const auto n_act = params.num_activations();
    std::size_t pos = 0;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        auto& layer = params.layers[l];
        std::copy_n(flat.begin() + pos, layer.weight.size(), layer.weight.data());
        pos += layer.weight.size();
        std::copy_n(flat.begin() + pos, layer.bias.size(), layer.bias.data());
        pos += layer.bias.size();
        if (l < n_act) layer.raw_beta = flat[pos++];
    }
}

BlockTrace trace_block(const BlockParams& params, const Mat& x) {
    require(!params.layers.empty(), ErrorCode::structural, "block has no layers");
    require(x.rows() == params.dim(), ErrorCode::structural,
            "input dimension " + std::to_string(x.rows()) + " does not match block dimension " +
                std::to_string(params.dim()));
    BlockTrace t;
    t.input = x;
    const auto L = params.layers.size();
    t.pre.reserve(L);
    t.post.reserve(L - 1);
    t.slope.reserve(L - 1);
    for (std::size_t l = 0; l < L; ++l) {
        const auto& layer = params.layers[l];
        Mat z = layer.weight * layer_input(t, l);
        z.colwise() += layer.bias;
        if (l + 1 < L) {
            const double beta = layer.beta();
            Mat h(z.rows(), z.cols());
            Mat s(z.rows(), z.cols());
            for (Eigen::Index i = 0; i < z.size(); ++i) {
                h.data()[i] = activation_value(params.activation, z.data()[i], beta);
                s.data()[i] = activation_d1(params.activation, z.data()[i], beta);
            }
            t.post.push_back(std::move(h));
            t.slope.push_back(std::move(s));
        }
        t.pre.push_back(std::move(z));
    }
    return t;
}

Mat block_forward(const BlockParams& params, const Mat& x) { return trace_block(params, x).output(); }

Mat jvp(const BlockParams& params, const BlockTrace& trace, const Mat& v) {
    check_batch(params, trace, v, "jvp tangent");
    Mat t = params.layers[0].weight * v;
    for (std::size_t l = 1; l < params.layers.size(); ++l) {
        t = params.layers[l].weight * trace.slope[l - 1].cwiseProduct(t);
    }
    return t;
}

Mat vjp(const BlockParams& params, const BlockTrace& trace, const Mat& u) {
    check_batch(params, trace, u, "vjp cotangent");
    Mat a = u;
    for (std::size_t l = params.layers.size() - 1; l > 0; --l) {
        a = trace.slope[l - 1].cwiseProduct(params.layers[l].weight.transpose() * a);
    }
    return params.layers[0].weight.transpose() * a;
}

void accumulate_output_grad(const BlockParams& params, const BlockTrace& trace, const Mat& u,
                            ParamGradient& grad, Mat* input_grad) {
    check_batch(params, trace, u, "output cotangent");
    Mat zbar = u;
    for (std::size_t l = params.layers.size(); l-- > 0;) {
        const auto& layer = params.layers[l];
        grad.weight[l].noalias() += zbar * layer_input(trace, l).transpose();
        grad.bias[l] += zbar.rowwise().sum();
        if (l == 0) {
            if (input_grad) *input_grad = layer.weight.transpose() * zbar;
            break;
        }
        const Mat hbar = layer.weight.transpose() * zbar;
        const auto m = l - 1;
        const auto& prev = params.layers[m];
        const double beta = prev.beta();
        if (params.activation == Activation::lipswish) {
            const Mat& z = trace.pre[m];
            double dbeta = 0.0;
            for (Eigen::Index i = 0; i < z.size(); ++i)
                dbeta += hbar.data()[i] * lipswish_dbeta(z.data()[i], beta);
            grad.raw_beta[m] += dbeta * sigmoid(prev.raw_beta);
        }
        zbar = trace.slope[m].cwiseProduct(hbar);
    }
}

void accumulate_bilinear_grad(const BlockParams& params, const BlockTrace& trace, const Mat& u, const Mat& v,
                              ParamGradient& grad, Mat* input_grad) {
    check_batch(params, trace, u, "bilinear left vector");
    check_batch(params, trace, v, "bilinear right vector");
    const auto L = params.layers.size();

    // Tangent pass: tz[l] = d z_l along v, th[l] = d h_l along v.
    std::vector<Mat> tz(L);
    std::vector<Mat> th(L - 1);
    tz[0] = params.layers[0].weight * v;
    for (std::size_t l = 1; l < L; ++l) {
        th[l - 1] = trace.slope[l - 1].cwiseProduct(tz[l - 1]);
        tz[l] = params.layers[l].weight * th[l - 1];
    }

    // Reverse pass over the joint (primal, tangent) computation of s = u^T tz[L-1].
    Mat tz_bar = u;
    Mat z_bar;  // adjoint of primal z_l; identically zero at the output layer
    bool z_bar_zero = true;
    for (std::size_t l = L; l-- > 0;) {
        const auto& layer = params.layers[l];
        const Mat& tangent_in = l == 0 ? v : th[l - 1];
        grad.weight[l].noalias() += tz_bar * tangent_in.transpose();
        if (!z_bar_zero) {
            grad.weight[l].noalias() += z_bar * layer_input(trace, l).transpose();
            grad.bias[l] += z_bar.rowwise().sum();
        }
        if (l == 0) {
            if (input_grad) {
                *input_grad = z_bar_zero ? Mat::Zero(v.rows(), v.cols()) : Mat(layer.weight.transpose() * z_bar);
            }
            break;
        }
        const Mat th_bar = layer.weight.transpose() * tz_bar;
        Mat h_bar;
        if (!z_bar_zero) h_bar = layer.weight.transpose() * z_bar;

        const auto m = l - 1;
        const auto& prev = params.layers[m];
        const double beta = prev.beta();
        const Mat& z = trace.pre[m];
        Mat new_z_bar(z.rows(), z.cols());
        double dbeta = 0.0;
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            const auto dv = activation_derivs(params.activation, z.data()[i], beta);
            const double tb = th_bar.data()[i];
            const double tzi = tz[m].data()[i];
            double zb = dv.d2 * tzi * tb;
            dbeta += dv.d1_dbeta * tzi * tb;
            if (!z_bar_zero) {
                const double hb = h_bar.data()[i];
                zb += dv.d1 * hb;
                dbeta += dv.dbeta * hb;
            }
            new_z_bar.data()[i] = zb;
        }
        if (params.activation == Activation::lipswish) grad.raw_beta[m] += dbeta * sigmoid(prev.raw_beta);
        tz_bar = trace.slope[m].cwiseProduct(th_bar);
        z_bar = std::move(new_z_bar);
        z_bar_zero = false;
    }
}

Vec block_forward(const BlockParams& params, const Vec& x) {
    return block_forward(params, Mat(x)).col(0);
}

Vec block_jvp(const BlockParams& params, const Vec& x, const Vec& v) {
    const auto t = trace_block(params, Mat(x));
    return jvp(params, t, Mat(v)).col(0);
}

Vec block_vjp(const BlockParams& params, const Vec& x, const Vec& u) {
    const auto t = trace_block(params, Mat(x));
    return vjp(params, t, Mat(u)).col(0);
}

ParamGradient bilinear_param_grad(const BlockParams& params, const Vec& x, const Vec& u, const Vec& v) {
    const auto t = trace_block(params, Mat(x));
    auto g = ParamGradient::zeros_like(params);
    accumulate_bilinear_grad(params, t, Mat(u), Mat(v), g);
    return g;
}

ParamGradient block_param_grad_of_output(const BlockParams& params, const Vec& x, const Vec& u) {
    const auto t = trace_block(params, Mat(x));
    auto g = ParamGradient::zeros_like(params);
    accumulate_output_grad(params, t, Mat(u), g);
    return g;
}

Mat block_dense_jacobian(const BlockParams& params, const Vec& x) {
    const int d = params.dim();
    require(d <= kMaxDenseDim, ErrorCode::refusal,
            "dense Jacobian refused for dimension " + std::to_string(d) + " (limit " + std::to_string(kMaxDenseDim) +
                ")");
    const auto t = trace_block(params, x.replicate(1, d));
    return jvp(params, t, Mat::Identity(d, d));
}

}  // namespace resflow
