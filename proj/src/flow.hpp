#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "common.hpp"
#include "diffkit.hpp"
#include "estimators.hpp"
#include "lipconstraint.hpp"

namespace resflow {

// y = scale * (x + shift), scale = exp(log_scale).
struct ActNorm {
    Vec shift;
    Vec log_scale;
    bool initialized = false;

    Vec scale() const { return log_scale.array().exp(); }
    double logdet() const { return log_scale.sum(); }
};

// y = x + g(x). norm_state warm-starts the power iteration of each layer.
struct ResidualBlock {
    BlockParams params;
    std::vector<PowerIterState> norm_state;
};

using FlowLayer = std::variant<ActNorm, ResidualBlock>;

struct LipschitzConfig {
    double coeff = 0.98;
    NormPreset preset = NormPreset::spectral;
    double tol = 1e-3;
    int max_iters = 200;       // cold start
    int max_iters_warm = 10;   // per training step

    std::vector<NormSpec> specs(std::size_t num_layers, bool warm) const;
};

struct FlowModel {
    int dim = 2;
    std::vector<FlowLayer> layers;
    LipschitzConfig lipschitz;

    std::size_t num_blocks() const;
    bool initialized() const;
};

struct FlowInit {
    int dim = 2;
    int blocks = 10;
    int hidden_width = 128;
    int num_linear = 3;
    Activation activation = Activation::lipswish;
};

// ActNorm, then (ResidualBlock, ActNorm) per block; blocks = 0 yields an
// empty model (pure standard normal). Constraints are applied on return.
FlowModel make_flow(const FlowInit& init, const LipschitzConfig& lip, Rng& rng);

// Re-applies the Lipschitz constraint to every block. `converged` runs the
// power iteration to 1e-9 instead of the per-step tolerance.
std::vector<ConstraintReport> apply_constraints(FlowModel& model, bool converged);

std::size_t param_count(const FlowModel& model);
std::vector<double> flatten_params(const FlowModel& model);
void assign_params(FlowModel& model, std::span<const double> flat);

double standard_normal_logpdf(const Vec& z);

// log|det(I + J_g)| for every column of the trace (dim <= kMaxDenseDim).
Vec exact_logdet_columns(const BlockParams& params, const BlockTrace& trace);

enum class LogDetMode { exact, estimator };

struct LogDensityResult {
    double logp = 0.0;  // nats
    double base_logp = 0.0;
    std::vector<double> per_layer_logdet;
    std::vector<LogDetSample> estimator_meta;
};

struct ForwardResult {
    Vec z;
    LogDensityResult result;
};

// f(x) and log p(x). In estimator mode `rng` must be non-null.
ForwardResult forward(const FlowModel& model, const Vec& x, LogDetMode mode = LogDetMode::exact,
                      const EstimatorConfig& cfg = {}, Rng* rng = nullptr);

// f applied to every column.
Mat transform(const FlowModel& model, const Mat& x);

struct DensityOptions {
    LogDetMode mode = LogDetMode::exact;
    EstimatorConfig estimator;
    int repeats = 1;  // independent estimates averaged per point
    std::uint64_t seed = 0;
    int threads = 1;
};

struct BatchDensity {
    Vec logp;
    double mean_terms = 0.0;  // series terms per estimate (estimator mode)
};

// log p for every column. Estimator mode draws an independent (v, n) per
// point and repeat from streams keyed by (seed, chunk), so results do not
// depend on the thread count.
BatchDensity log_density(const FlowModel& model, const Mat& x, const DensityOptions& opts);

struct InverseLog {
    // ||x_{k+1} - x_k|| per fixed-point iteration, one list per residual
    // block in the order they are inverted.
    std::vector<std::vector<double>> residuals;
};

Vec inverse(const FlowModel& model, const Vec& z, double tol = 1e-10, int max_iters = 200,
            InverseLog* log = nullptr);
Mat inverse(const FlowModel& model, const Mat& z, double tol = 1e-10, int max_iters = 200);

Mat sample(const FlowModel& model, Rng& rng, int n);

// Data-dependent initialization of every uninitialized ActNorm, in order,
// using the batch as it propagates through the model.
void actnorm_initialize(FlowModel& model, const Mat& batch);

}  // namespace resflow
