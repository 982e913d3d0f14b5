#include "lipconstraint.hpp"

#include <cmath>

namespace resflow {

namespace {

double conjugate(double p) {
    if (p == 1.0) return kInf;
    if (std::isinf(p)) return 1.0;
    return p / (p - 1.0);
}

// a_i = sign(y_i) (|y_i| / ||y||_r)^(r-1). Has unit conjugate(r)-norm and
// a^T y = ||y||_r.
Vec dual_direction(const Vec& y, double r) {
    const double n = vector_norm(y, r);
    if (r == 2.0) return y / n;
    Vec out(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double a = std::abs(y(i)) / n;
        out(i) = std::copysign(std::pow(a, r - 1.0), y(i));
    }
    return out;
}

Vec cold_start(Eigen::Index n) {
    Rng rng(0x5eed);
    std::normal_distribution<double> normal;
    Vec u(n);
    for (Eigen::Index i = 0; i < n; ++i) u(i) = normal(rng);
    return u;
}

bool orders_equal(double a, double b) { return a == b; }

}  // namespace

void NormSpec::validate() const {
    require(p_in >= 1.0 && p_out >= 1.0, ErrorCode::config, "norm orders must lie in [1, inf]");
    if (method == NormMethod::exact) {
        const bool ok = (p_in == 1.0 && p_out == 1.0) || (std::isinf(p_in) && std::isinf(p_out));
        require(ok, ErrorCode::config, "exact norm evaluation requires (1,1) or (inf,inf)");
    }
    require(tol > 0 && max_iters > 0, ErrorCode::config, "power iteration needs tol > 0 and max_iters > 0");
}

NormPreset parse_norm_preset(std::string_view name) {
    if (name == "spectral") return NormPreset::spectral;
    if (name == "inf") return NormPreset::inf;
    if (name == "one") return NormPreset::one;
    throw Error(ErrorCode::config, "unknown norm preset '" + std::string(name) + "' (spectral|inf|one)");
}

std::string to_string(NormPreset p) {
    switch (p) {
        case NormPreset::spectral: return "spectral";
        case NormPreset::inf: return "inf";
        case NormPreset::one: return "one";
    }
    return "?";
}

double preset_order(NormPreset p) {
    switch (p) {
        case NormPreset::spectral: return 2.0;
        case NormPreset::inf: return kInf;
        case NormPreset::one: return 1.0;
    }
    return 2.0;
}

std::vector<NormSpec> preset_specs(NormPreset preset, std::size_t num_layers, double tol, int max_iters) {
    const double p = preset_order(preset);
    NormSpec spec{p, p, preset == NormPreset::spectral ? NormMethod::power_iteration : NormMethod::exact, tol,
                  max_iters};
    return std::vector<NormSpec>(num_layers, spec);
}

double vector_norm(const Vec& x, double p) {
    if (std::isinf(p)) return x.size() == 0 ? 0.0 : x.cwiseAbs().maxCoeff();
    if (p == 1.0) return x.cwiseAbs().sum();
    if (p == 2.0) return x.norm();
    const double scale = x.size() == 0 ? 0.0 : x.cwiseAbs().maxCoeff();
    if (scale == 0.0) return 0.0;
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) s += std::pow(std::abs(x(i)) / scale, p);
    return scale * std::pow(s, 1.0 / p);
}

double exact_induced_norm(const Mat& w, double p) {
    if (w.size() == 0) return 0.0;
    if (p == 1.0) return w.cwiseAbs().colwise().sum().maxCoeff();
    if (std::isinf(p)) return w.cwiseAbs().rowwise().sum().maxCoeff();
    throw Error(ErrorCode::refusal, "exact induced norm only available for p in {1, inf}");
}

double mixed_norm_power_iteration(const Mat& w, const NormSpec& spec, PowerIterState& state) {
    require(spec.method == NormMethod::power_iteration, ErrorCode::refusal, "spec does not request power iteration");
    const bool classic = spec.p_in == 2.0 && spec.p_out == 2.0;
    const bool interior = spec.p_in > 1.0 && spec.p_out > 1.0 && !std::isinf(spec.p_in) && !std::isinf(spec.p_out);
    require(classic || interior, ErrorCode::refusal, "power iteration requires 1 < p_in, p_out < inf");

    if (w.isZero(0.0)) {
        state.last_estimate = 0.0;
        state.iters_used = 0;
        return 0.0;
    }
    const bool warm = state.u.size() == w.cols();
    Vec x = warm ? state.u : cold_start(w.cols());
    x = x / vector_norm(x, spec.p_in);
    const double p_dual = conjugate(spec.p_in);

    double prev = warm ? state.last_estimate : -1.0;
    double estimate = 0.0;
    int it = 0;
    while (it < spec.max_iters) {
        ++it;
        const Vec y = w * x;
        estimate = vector_norm(y, spec.p_out);
        if (estimate == 0.0) {
            // x fell in the null space; restart from the deterministic vector
            x = cold_start(w.cols()) + Vec::Ones(w.cols());
            x /= vector_norm(x, spec.p_in);
            prev = -1.0;
            continue;
        }
        const Vec z = w.transpose() * dual_direction(y, spec.p_out);
        if (z.isZero(0.0)) break;
        x = dual_direction(z, p_dual);
        if (prev > 0.0 && std::abs(estimate - prev) <= spec.tol * estimate) break;
        prev = estimate;
    }
    state.u = x;
    state.last_estimate = estimate;
    state.iters_used = it;
    return estimate;
}

int adaptive_iters_policy(const Mat& w, PowerIterState& state, const NormSpec& spec) {
    mixed_norm_power_iteration(w, spec, state);
    return state.iters_used;
}

double induced_norm(const Mat& w, double p_in, double p_out) {
    if (orders_equal(p_in, p_out) && (p_in == 1.0 || std::isinf(p_in))) return exact_induced_norm(w, p_in);
    PowerIterState state;
    NormSpec spec{p_in, p_out, NormMethod::power_iteration, 1e-12, 5000};
    return mixed_norm_power_iteration(w, spec, state);
}

double layer_norm(const Mat& w, const NormSpec& spec, PowerIterState& state) {
    if (spec.method == NormMethod::exact) {
        state.iters_used = 0;
        state.last_estimate = exact_induced_norm(w, spec.p_in);
        return state.last_estimate;
    }
    return mixed_norm_power_iteration(w, spec, state);
}

namespace {

void check_specs(const BlockParams& params, std::span<const NormSpec> specs) {
    require(specs.size() == params.layers.size(), ErrorCode::config, "need one norm spec per layer");
    for (const auto& s : specs) s.validate();
    for (std::size_t l = 1; l < specs.size(); ++l) {
        require(orders_equal(specs[l].p_in, specs[l - 1].p_out), ErrorCode::config,
                "norm specs do not chain between layers " + std::to_string(l - 1) + " and " + std::to_string(l));
    }
    require(orders_equal(specs.front().p_in, specs.back().p_out), ErrorCode::config,
            "norm specs must map the block back to its input norm");
}

}  // namespace

ConstraintReport apply_lipschitz_constraint(BlockParams& params, double coeff, std::span<const NormSpec> specs,
                                            std::vector<PowerIterState>& states) {
    require(coeff > 0.0 && coeff < 1.0, ErrorCode::config, "Lipschitz coefficient must lie in (0, 1)");
    check_specs(params, specs);
    states.resize(params.layers.size());
    ConstraintReport report;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        auto& layer = params.layers[l];
        const double norm = layer_norm(layer.weight, specs[l], states[l]);
        if (norm == 0.0) {
            require(layer.weight.isZero(0.0), ErrorCode::inconsistency,
                    "norm estimate is zero for a nonzero weight in layer " + std::to_string(l));
        }
        double factor = norm > coeff ? coeff / norm : 1.0;
        if (factor < 1.0) {
            const Mat original = layer.weight;
            layer.weight = original * factor;
            // exact norms must land at or below coeff despite rounding
            const double p = specs[l].p_in;
            if (p == specs[l].p_out && (p == 1.0 || p == kInf)) {
                while (exact_induced_norm(layer.weight, p) > coeff) {
                    factor = std::nextafter(factor, 0.0);
                    layer.weight = original * factor;
                }
            }
            states[l].last_estimate *= factor;
        }
        layer.norm_in = specs[l].p_in;
        layer.norm_out = specs[l].p_out;
        report.norms_before.push_back(norm);
        report.norms_after.push_back(norm * factor);
        report.iters.push_back(states[l].iters_used);
    }
    return report;
}

void rescale_to_norm(BlockParams& params, double coeff, std::span<const NormSpec> specs) {
    check_specs(params, specs);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        auto& layer = params.layers[l];
        const double norm = induced_norm(layer.weight, specs[l].p_in, specs[l].p_out);
        require(norm > 0.0, ErrorCode::inconsistency, "cannot rescale a zero weight to a target norm");
        layer.weight *= coeff / norm;
        layer.norm_in = specs[l].p_in;
        layer.norm_out = specs[l].p_out;
    }
}

double lipschitz_bound(const BlockParams& params) {
    double bound = 1.0;
    for (const auto& layer : params.layers) bound *= induced_norm(layer.weight, layer.norm_in, layer.norm_out);
    return bound;
}

}  // namespace resflow
