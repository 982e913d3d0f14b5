#include "flow.hpp"

#include <cmath>
#include <iostream>

#include "parallel.hpp"

namespace resflow {

namespace {

constexpr int kChunk = 256;
constexpr double kActNormVarianceFloor = 1e-6;

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

const ActNorm& checked(const ActNorm& a) {
    require(a.initialized, ErrorCode::uninitialized, "actnorm layer used before data-dependent initialization");
    return a;
}

Mat actnorm_apply(const ActNorm& a, const Mat& x) {
    Mat y = x;
    y.colwise() += a.shift;
    return a.scale().asDiagonal() * y;
}

Mat actnorm_invert(const ActNorm& a, const Mat& y) {
    Mat x = a.scale().cwiseInverse().asDiagonal() * y;
    x.colwise() -= a.shift;
    return x;
}

}  // namespace

Vec exact_logdet_columns(const BlockParams& params, const BlockTrace& trace) {
    const int d = params.dim();
    require(d <= kMaxDenseDim, ErrorCode::refusal, "exact log-det refused above the dense dimension limit");
    const auto B = trace.input.cols();
    std::vector<Mat> cols;
    cols.reserve(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        Mat e = Mat::Zero(d, B);
        e.row(j).setOnes();
        cols.push_back(jvp(params, trace, e));
    }
    Vec out(B);
    if (d == 2) {
        for (Eigen::Index b = 0; b < B; ++b) {
            const double a11 = 1.0 + cols[0](0, b), a21 = cols[0](1, b);
            const double a12 = cols[1](0, b), a22 = 1.0 + cols[1](1, b);
            out(b) = std::log(std::abs(a11 * a22 - a12 * a21));
        }
        return out;
    }
    Mat m(d, d);
    for (Eigen::Index b = 0; b < B; ++b) {
        for (int j = 0; j < d; ++j) m.col(j) = cols[static_cast<std::size_t>(j)].col(b);
        m += Mat::Identity(d, d);
        out(b) = std::log(std::abs(m.partialPivLu().determinant()));
    }
    return out;
}

std::vector<NormSpec> LipschitzConfig::specs(std::size_t num_layers, bool warm) const {
    return preset_specs(preset, num_layers, tol, warm ? max_iters_warm : max_iters);
}

std::size_t FlowModel::num_blocks() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += std::holds_alternative<ResidualBlock>(l) ? 1 : 0;
    return n;
}

bool FlowModel::initialized() const {
    for (const auto& l : layers) {
        if (const auto* a = std::get_if<ActNorm>(&l); a && !a->initialized) return false;
    }
    return true;
}

FlowModel make_flow(const FlowInit& init, const LipschitzConfig& lip, Rng& rng) {
    require(init.dim > 0 && init.blocks >= 0, ErrorCode::config, "invalid flow shape");
    FlowModel model;
    model.dim = init.dim;
    model.lipschitz = lip;
    if (init.blocks == 0) return model;
    auto fresh_actnorm = [&] { return ActNorm{Vec::Zero(init.dim), Vec::Zero(init.dim), false}; };
    BlockInit binit;
    binit.dim = init.dim;
    binit.hidden_width = init.hidden_width;
    binit.num_linear = init.num_linear;
    binit.activation = init.activation;
    binit.norm_order = preset_order(lip.preset);
    binit.target_norm = 0.7 * lip.coeff;
    model.layers.emplace_back(fresh_actnorm());
    for (int b = 0; b < init.blocks; ++b) {
        model.layers.emplace_back(ResidualBlock{make_block(binit, rng), {}});
        model.layers.emplace_back(fresh_actnorm());
    }
    apply_constraints(model, true);
    return model;
}

std::vector<ConstraintReport> apply_constraints(FlowModel& model, bool converged) {
    std::vector<ConstraintReport> reports;
    const auto& lip = model.lipschitz;
    for (auto& layer : model.layers) {
        auto* block = std::get_if<ResidualBlock>(&layer);
        if (!block) continue;
        const auto L = block->params.layers.size();
        block->norm_state.resize(L);
        std::vector<NormSpec> specs = lip.specs(L, false);
        for (std::size_t l = 0; l < L; ++l) {
            if (converged) {
                specs[l].tol = 1e-9;
                specs[l].max_iters = std::max(1000, lip.max_iters);
            } else if (block->norm_state[l].u.size() > 0) {
                specs[l].max_iters = lip.max_iters_warm;
            }
        }
        reports.push_back(apply_lipschitz_constraint(block->params, lip.coeff, specs, block->norm_state));
    }
    return reports;
}

std::size_t param_count(const FlowModel& model) {
    std::size_t n = 0;
    for (const auto& layer : model.layers) {
        std::visit(overloaded{[&](const ActNorm& a) { n += static_cast<std::size_t>(a.shift.size() * 2); },
                              [&](const ResidualBlock& b) { n += param_count(b.params); }},
                   layer);
    }
    return n;
}

std::vector<double> flatten_params(const FlowModel& model) {
    std::vector<double> out;
    out.reserve(param_count(model));
    for (const auto& layer : model.layers) {
        std::visit(overloaded{[&](const ActNorm& a) {
                                  out.insert(out.end(), a.shift.data(), a.shift.data() + a.shift.size());
                                  out.insert(out.end(), a.log_scale.data(), a.log_scale.data() + a.log_scale.size());
                              },
                              [&](const ResidualBlock& b) {
                                  const auto flat = flatten_params(b.params);
                                  out.insert(out.end(), flat.begin(), flat.end());
                              }},
                   layer);
    }
    return out;
}

void assign_params(FlowModel& model, std::span<const double> flat) {
    require(flat.size() == param_count(model), ErrorCode::structural, "flat parameter vector has wrong length");
    std::size_t pos = 0;
    for (auto& layer : model.layers) {
        std::visit(overloaded{[&](ActNorm& a) {
                                  const auto d = static_cast<std::size_t>(a.shift.size());
                                  std::copy_n(flat.begin() + pos, d, a.shift.data());
                                  std::copy_n(flat.begin() + pos + d, d, a.log_scale.data());
                                  pos += 2 * d;
                              },
                              [&](ResidualBlock& b) {
                                  const auto n = param_count(b.params);
                                  assign_params(b.params, flat.subspan(pos, n));
                                  pos += n;
                              }},
                   layer);
    }
}

double standard_normal_logpdf(const Vec& z) {
    return -0.5 * static_cast<double>(z.size()) * kLog2Pi - 0.5 * z.squaredNorm();
}

ForwardResult forward(const FlowModel& model, const Vec& x, LogDetMode mode, const EstimatorConfig& cfg, Rng* rng) {
    require(x.size() == model.dim, ErrorCode::structural, "input dimension does not match model");
    require(mode == LogDetMode::exact || rng != nullptr, ErrorCode::refusal, "estimator mode needs a generator");
    ForwardResult out;
    Vec cur = x;
    double total = 0.0;
    for (const auto& layer : model.layers) {
        if (const auto* a = std::get_if<ActNorm>(&layer)) {
            cur = actnorm_apply(checked(*a), cur).col(0);
            out.result.per_layer_logdet.push_back(a->logdet());
        } else {
            const auto& block = std::get<ResidualBlock>(layer);
            double ld;
            if (mode == LogDetMode::exact) {
                ld = exact_logdet(block.params, cur);
            } else {
                auto s = estimate_logdet(block.params, cur, cfg, *rng);
                ld = s.value;
                out.result.estimator_meta.push_back(std::move(s));
            }
            out.result.per_layer_logdet.push_back(ld);
            cur = cur + block_forward(block.params, cur);
        }
        total += out.result.per_layer_logdet.back();
    }
    out.z = cur;
    out.result.base_logp = standard_normal_logpdf(cur);
    out.result.logp = out.result.base_logp + total;
    return out;
}

Mat transform(const FlowModel& model, const Mat& x) {
    Mat cur = x;
    for (const auto& layer : model.layers) {
        if (const auto* a = std::get_if<ActNorm>(&layer)) {
            cur = actnorm_apply(checked(*a), cur);
        } else {
            cur += block_forward(std::get<ResidualBlock>(layer).params, cur);
        }
    }
    return cur;
}

BatchDensity log_density(const FlowModel& model, const Mat& x, const DensityOptions& opts) {
    require(x.rows() == model.dim, ErrorCode::structural, "input dimension does not match model");
    require(opts.repeats >= 1, ErrorCode::config, "repeats must be positive");
    if (opts.mode == LogDetMode::estimator) opts.estimator.validate();
    const auto n = x.cols();
    const int n_chunks = static_cast<int>((n + kChunk - 1) / kChunk);
    BatchDensity out;
    out.logp = Vec::Zero(n);
    std::vector<double> chunk_terms(static_cast<std::size_t>(n_chunks), 0.0);
    const int reps = opts.repeats * opts.estimator.n_hutchinson;

    parallel_for(n_chunks, opts.threads, [&](int c) {
        const auto begin = static_cast<Eigen::Index>(c) * kChunk;
        const auto cols = std::min<Eigen::Index>(kChunk, n - begin);
        Rng rng = stream_rng(opts.seed, static_cast<std::uint64_t>(c));
        Mat cur = x.middleCols(begin, cols);
        Vec logp = Vec::Zero(cols);
        double terms = 0.0;
        for (const auto& layer : model.layers) {
            if (const auto* a = std::get_if<ActNorm>(&layer)) {
                cur = actnorm_apply(checked(*a), cur);
                logp.array() += a->logdet();
                continue;
            }
            const auto& params = std::get<ResidualBlock>(layer).params;
            const auto trace = trace_block(params, cur);
            if (opts.mode == LogDetMode::exact) {
                logp += exact_logdet_columns(params, trace);
            } else {
                const auto& ec = opts.estimator;
                Vec acc = Vec::Zero(cols);
                for (int r = 0; r < reps; ++r) {
                    std::vector<SeriesPlan> plans;
                    plans.reserve(static_cast<std::size_t>(cols));
                    int k_max = 0;
                    for (Eigen::Index b = 0; b < cols; ++b) {
                        plans.push_back(draw_plan(ec, rng));
                        k_max = std::max(k_max, plans.back().n_terms());
                        terms += plans.back().n_terms();
                    }
                    Mat weights = Mat::Zero(k_max, cols);
                    for (Eigen::Index b = 0; b < cols; ++b) {
                        const auto& w = plans[static_cast<std::size_t>(b)].logdet_weights;
                        for (std::size_t k = 0; k < w.size(); ++k) weights(static_cast<Eigen::Index>(k), b) = w[k];
                    }
                    const Mat v = draw_tangents(ec.hutchinson, model.dim, static_cast<int>(cols), rng);
                    acc += series_logdet(params, trace, v, weights);
                }
                logp += acc / reps;
            }
            cur += trace.output();
        }
        for (Eigen::Index b = 0; b < cols; ++b) {
            logp(b) += standard_normal_logpdf(cur.col(b));
        }
        out.logp.segment(begin, cols) = logp;
        chunk_terms[static_cast<std::size_t>(c)] = terms;
    });

    if (opts.mode == LogDetMode::estimator && model.num_blocks() > 0 && n > 0) {
        double terms = 0.0;
        for (double t : chunk_terms) terms += t;
        out.mean_terms = terms / (static_cast<double>(n) * reps * static_cast<double>(model.num_blocks()));
    }
    return out;
}

Vec inverse(const FlowModel& model, const Vec& z, double tol, int max_iters, InverseLog* log) {
    require(z.size() == model.dim, ErrorCode::structural, "input dimension does not match model");
    Vec cur = z;
    for (auto it = model.layers.rbegin(); it != model.layers.rend(); ++it) {
        if (const auto* a = std::get_if<ActNorm>(&*it)) {
            cur = actnorm_invert(checked(*a), cur).col(0);
            continue;
        }
        const auto& params = std::get<ResidualBlock>(*it).params;
        std::vector<double> residuals;
        Vec xk = cur;
        bool converged = false;
        for (int k = 0; k < max_iters; ++k) {
            const Vec next = cur - block_forward(params, xk);
            const double res = (next - xk).norm();
            residuals.push_back(res);
            xk = next;
            if (res < tol) {
                converged = true;
                break;
            }
        }
        require(converged, ErrorCode::non_convergence,
                "fixed-point inversion did not converge in " + std::to_string(max_iters) +
                    " iterations (Lipschitz constraint violated?)");
        if (log) log->residuals.push_back(std::move(residuals));
        cur = xk;
    }
    return cur;
}

Mat inverse(const FlowModel& model, const Mat& z, double tol, int max_iters) {
    require(z.rows() == model.dim, ErrorCode::structural, "input dimension does not match model");
    Mat cur = z;
    for (auto it = model.layers.rbegin(); it != model.layers.rend(); ++it) {
        if (const auto* a = std::get_if<ActNorm>(&*it)) {
            cur = actnorm_invert(checked(*a), cur);
            continue;
        }
        const auto& params = std::get<ResidualBlock>(*it).params;
        Mat xk = cur;
        bool converged = cur.cols() == 0;
        for (int k = 0; k < max_iters && !converged; ++k) {
            Mat next = cur - block_forward(params, xk);
            const double res = (next - xk).colwise().norm().maxCoeff();
            xk = std::move(next);
            converged = res < tol;
        }
        require(converged, ErrorCode::non_convergence,
                "fixed-point inversion did not converge in " + std::to_string(max_iters) +
                    " iterations (Lipschitz constraint violated?)");
        cur = std::move(xk);
    }
    return cur;
}

Mat sample(const FlowModel& model, Rng& rng, int n) {
    require(n >= 0, ErrorCode::refusal, "sample count must be non-negative");
    std::normal_distribution<double> normal;
    Mat z(model.dim, n);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = normal(rng);
    return inverse(model, z);
}

void actnorm_initialize(FlowModel& model, const Mat& batch) {
    require(batch.cols() > 0, ErrorCode::refusal, "actnorm initialization needs a nonempty batch");
    require(batch.rows() == model.dim, ErrorCode::structural, "batch dimension does not match model");
    Mat cur = batch;
    for (auto& layer : model.layers) {
        if (auto* a = std::get_if<ActNorm>(&layer)) {
            if (!a->initialized) {
                const Vec mean = cur.rowwise().mean();
                const Vec var = (cur.colwise() - mean).array().square().rowwise().mean();
                Vec log_scale(model.dim);
                for (int i = 0; i < model.dim; ++i) {
                    double v = var(i);
                    if (v < kActNormVarianceFloor) {
                        std::cerr << "warning: actnorm dimension " << i << " has variance " << v
                                  << "; flooring at " << kActNormVarianceFloor << "\n";
                        v = kActNormVarianceFloor;
                    }
                    log_scale(i) = -0.5 * std::log(v);
                }
                a->shift = -mean;
                a->log_scale = log_scale;
                a->initialized = true;
            }
            cur = actnorm_apply(*a, cur);
        } else {
            cur += block_forward(std::get<ResidualBlock>(layer).params, cur);
        }
    }
}

}  // namespace resflow
