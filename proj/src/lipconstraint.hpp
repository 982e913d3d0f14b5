#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "common.hpp"
#include "diffkit.hpp"

namespace resflow {

enum class NormMethod { exact, power_iteration };

struct NormSpec {
    double p_in = 2.0;
    double p_out = 2.0;
    NormMethod method = NormMethod::power_iteration;
    double tol = 1e-3;
    int max_iters = 200;

    // Exact evaluation is only available for the (1,1) and (inf,inf) pairs.
    void validate() const;
};

// Warm-start state of the power iteration for one weight matrix.
struct PowerIterState {
    Vec u;  // unit p_in-norm iterate; empty means cold
    double last_estimate = 0.0;
    int iters_used = 0;
};

enum class NormPreset { spectral, inf, one };

NormPreset parse_norm_preset(std::string_view name);
std::string to_string(NormPreset p);
double preset_order(NormPreset p);

// One spec per layer. tol/max_iters only matter for power-iteration presets.
std::vector<NormSpec> preset_specs(NormPreset preset, std::size_t num_layers, double tol, int max_iters);

double vector_norm(const Vec& x, double p);

// p = 1: max column abs sum. p = inf: max row abs sum.
double exact_induced_norm(const Mat& w, double p);

// Generalized power iteration for ||W||_{p_in -> p_out} (1 < p < inf, or
// p_in = p_out = 2 where it is the classic power method on W^T W). The result
// is a lower bound on the true norm. Stops when the relative change of the
// estimate drops below spec.tol, or after spec.max_iters; a warm state whose
// first estimate matches last_estimate stops after one iteration.
double mixed_norm_power_iteration(const Mat& w, const NormSpec& spec, PowerIterState& state);

// Iterations spent by one warm-started call (also updates the state).
int adaptive_iters_policy(const Mat& w, PowerIterState& state, const NormSpec& spec);

// Dispatches to the exact formula when available, otherwise runs a converged
// cold power iteration.
double induced_norm(const Mat& w, double p_in, double p_out);
double layer_norm(const Mat& w, const NormSpec& spec, PowerIterState& state);

struct ConstraintReport {
    std::vector<double> norms_before;
    std::vector<double> norms_after;  // reported norm of each rescaled weight
    std::vector<int> iters;
};

// Rescales W_l <- W_l * min(1, coeff / ||W_l||). Records the specs' norm
// orders on the layers. Rejects non-chaining specs and coeff outside (0, 1).
ConstraintReport apply_lipschitz_constraint(BlockParams& params, double coeff, std::span<const NormSpec> specs,
                                            std::vector<PowerIterState>& states);

// Sets each layer's norm to exactly `coeff` (used for matched comparisons
// across coefficients).
void rescale_to_norm(BlockParams& params, double coeff, std::span<const NormSpec> specs);

// Product of per-layer induced norms, an upper bound on Lip(g).
double lipschitz_bound(const BlockParams& params);

}  // namespace resflow
