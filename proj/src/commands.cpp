#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "parallel.hpp"

namespace resflow {

namespace {

constexpr int kDiagnoseChunk = 4096;

std::string num(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::vector<NormSpec> specs_of(const BlockParams& p) {
    std::vector<NormSpec> specs;
    for (const auto& l : p.layers) {
        NormSpec s;
        s.p_in = l.norm_in;
        s.p_out = l.norm_out;
        const bool exact = (s.p_in == 1.0 && s.p_out == 1.0) || (s.p_in == kInf && s.p_out == kInf);
        s.method = exact ? NormMethod::exact : NormMethod::power_iteration;
        s.tol = 1e-12;
        s.max_iters = 5000;
        specs.push_back(s);
    }
    return specs;
}

Mat orthogonal(int n, Rng& rng) {
    std::normal_distribution<double> normal;
    Mat g(n, n);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
    Eigen::HouseholderQR<Mat> qr(g);
    Mat q = qr.householderQ();
    // Sign fix so the factorization is unique.
    const Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int i = 0; i < n; ++i)
        if (r(i, i) < 0) q.col(i) *= -1.0;
    return q;
}

struct MomentSums {
    double sum = 0.0;
    double sumsq = 0.0;
    double terms = 0.0;
};

}  // namespace

double DensityGrid::integral() const { return values.array().exp().sum() * cell_area(); }

DensityGrid compute_grid(const FlowModel& model, const GridOptions& opts) {
    require(model.dim == 2, ErrorCode::refusal, "density grids need a 2D model");
    require(opts.nx >= 1 && opts.ny >= 1, ErrorCode::config, "grid resolution must be positive");
    const auto& b = opts.bounds;
    require(b.x_max > b.x_min && b.y_max > b.y_min, ErrorCode::config, "grid bounds must be increasing");
    DensityGrid grid;
    grid.bounds = b;
    grid.nx = opts.nx;
    grid.ny = opts.ny;
    grid.mode = opts.mode;
    Mat pts(2, static_cast<Eigen::Index>(opts.nx) * opts.ny);
    for (int j = 0; j < opts.ny; ++j)
        for (int i = 0; i < opts.nx; ++i) {
            const auto c = static_cast<Eigen::Index>(j) * opts.nx + i;
            pts(0, c) = grid.x_at(i);
            pts(1, c) = grid.y_at(j);
        }
    DensityOptions d;
    d.mode = opts.mode;
    d.estimator = opts.estimator;
    d.seed = opts.seed;
    d.threads = opts.threads;
    const auto dens = log_density(model, pts, d);
    grid.values.resize(opts.ny, opts.nx);
    for (int j = 0; j < opts.ny; ++j)
        for (int i = 0; i < opts.nx; ++i) grid.values(j, i) = dens.logp(static_cast<Eigen::Index>(j) * opts.nx + i);
    return grid;
}

std::string grid_csv(const DensityGrid& grid) {
    std::string out = "x,y,logp\n";
    for (int j = 0; j < grid.ny; ++j)
        for (int i = 0; i < grid.nx; ++i) out += num(grid.x_at(i)) + "," + num(grid.y_at(j)) + "," + num(grid.values(j, i)) + "\n";
    return out;
}

std::string grid_pgm(const DensityGrid& grid) {
    std::string out = "P5\n" + std::to_string(grid.nx) + " " + std::to_string(grid.ny) + "\n255\n";
    const double vmax = grid.values.size() > 0 ? grid.values.maxCoeff() : 0.0;
    for (int r = 0; r < grid.ny; ++r) {
        const int j = grid.ny - 1 - r;
        for (int i = 0; i < grid.nx; ++i) {
            const double level = std::exp(grid.values(j, i) - vmax);
            out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * level))));
        }
    }
    return out;
}

SampleResult draw_samples(const FlowModel& model, int n, std::uint64_t seed, bool check_inverse) {
    require(n >= 0, ErrorCode::refusal, "sample count must be non-negative");
    Rng rng = stream_rng(seed, 0x5a);
    Rng replay = rng;
    SampleResult out;
    out.x = sample(model, rng, n);
    if (check_inverse && n > 0) {
        std::normal_distribution<double> normal;
        Mat z(model.dim, n);
        for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = normal(replay);
        out.max_inverse_error = (transform(model, out.x) - z).colwise().norm().maxCoeff();
    }
    return out;
}

std::string samples_csv(const Mat& x) {
    std::string out;
    const auto d = x.rows();
    if (d == 2) {
        out = "x,y\n";
    } else {
        for (Eigen::Index i = 0; i < d; ++i) out += (i ? ",x" : "x") + std::to_string(i);
        out += "\n";
    }
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        for (Eigen::Index i = 0; i < d; ++i) out += (i ? "," : "") + num(x(i, c));
        out += "\n";
    }
    return out;
}

BlockParams diagnostic_block(int dim, int hidden_width, const Vec& x, std::uint64_t seed, double coeff) {
    require(dim >= 1 && hidden_width >= dim, ErrorCode::config, "diagnostic block needs hidden_width >= dim");
    require(x.size() == dim, ErrorCode::structural, "diagnostic point has the wrong dimension");
    Rng rng = stream_rng(seed, 0xd1a9);
    const Mat q1 = orthogonal(hidden_width, rng);
    const Mat q2 = orthogonal(hidden_width, rng);
    const Mat a = q1.leftCols(dim);
    std::uniform_real_distribution<double> target(1.2, 2.0);

    BlockParams p;
    p.activation = Activation::lipswish;
    LayerParams l0, l1, l2;
    l0.weight = coeff * a;
    l1.weight = coeff * q2;
    l2.weight = -coeff * (q2 * a).transpose();
    l0.raw_beta = l1.raw_beta = l2.raw_beta = softplus_inverse(0.5);
    Vec t0(hidden_width), t1(hidden_width);
    for (int i = 0; i < hidden_width; ++i) t0(i) = target(rng);
    for (int i = 0; i < hidden_width; ++i) t1(i) = target(rng);
    l0.bias = t0 - l0.weight * x;
    Vec h0(hidden_width);
    for (int i = 0; i < hidden_width; ++i) h0(i) = lipswish(t0(i), l0.beta());
    l1.bias = t1 - l1.weight * h0;
    l2.bias = Vec::Zero(dim);
    p.layers = {l0, l1, l2};
    p.validate();
    return p;
}

std::vector<DiagnoseRow> diagnose(const BlockParams& base, const Vec& x, const DiagnoseOptions& opts) {
    base.validate();
    require(base.dim() <= kMaxDenseDim, ErrorCode::refusal, "diagnostics need the exact dense log-det");
    require(opts.samples >= 2, ErrorCode::config, "diagnose needs at least two samples");
    RouletteDist roulette{opts.q, opts.n_exact};
    roulette.validate();
    for (int n : opts.biased_terms) require(n >= 1, ErrorCode::config, "biased truncation must be positive");
    const auto specs = specs_of(base);
    const int d = base.dim();
    std::vector<DiagnoseRow> rows;

    for (std::size_t ci = 0; ci < opts.coeffs.size(); ++ci) {
        const double coeff = opts.coeffs[ci];
        require(coeff > 0.0 && coeff < 1.0, ErrorCode::config, "coefficients must lie in (0, 1)");
        BlockParams p = base;
        rescale_to_norm(p, coeff, specs);
        const double exact = exact_logdet(p, x);
        const Mat j = block_dense_jacobian(p, x);
        const double bound = lipschitz_bound(p);

        std::vector<std::string> names;
        for (int n : opts.biased_terms) names.push_back("biased-" + std::to_string(n));
        names.emplace_back("unbiased");

        for (std::size_t ei = 0; ei < names.size(); ++ei) {
            const bool unbiased = ei == opts.biased_terms.size();
            const int fixed = unbiased ? 0 : opts.biased_terms[ei];
            const std::uint64_t pair_seed = stream_rng(opts.seed, ci * 64 + ei)();
            const int n_chunks = (opts.samples + kDiagnoseChunk - 1) / kDiagnoseChunk;
            std::vector<MomentSums> sums(static_cast<std::size_t>(n_chunks));
            parallel_for(n_chunks, opts.threads, [&](int c) {
                const int cols = std::min(kDiagnoseChunk, opts.samples - c * kDiagnoseChunk);
                Rng rng = stream_rng(pair_seed, static_cast<std::uint64_t>(c));
                const auto trace = trace_block(p, x.replicate(1, cols));
                auto& s = sums[static_cast<std::size_t>(c)];
                Mat weights;
                if (unbiased) {
                    std::vector<SeriesPlan> plans;
                    int k_max = 0;
                    for (int b = 0; b < cols; ++b) {
                        plans.push_back(plan_roulette(roulette, roulette.sample(rng)));
                        k_max = std::max(k_max, plans.back().n_terms());
                        s.terms += plans.back().n_terms();
                    }
                    weights = Mat::Zero(k_max, cols);
                    for (int b = 0; b < cols; ++b) {
                        const auto& w = plans[static_cast<std::size_t>(b)].logdet_weights;
                        for (std::size_t k = 0; k < w.size(); ++k) weights(static_cast<Eigen::Index>(k), b) = w[k];
                    }
                } else {
                    weights = Mat::Ones(fixed, cols);
                    s.terms += static_cast<double>(fixed) * cols;
                }
                const Mat v = draw_tangents(opts.hutchinson, d, cols, rng);
                const Vec est = series_logdet(p, trace, v, weights);
                s.sum = est.sum();
                s.sumsq = est.squaredNorm();
            });
            MomentSums total;
            for (const auto& s : sums) {
                total.sum += s.sum;
                total.sumsq += s.sumsq;
                total.terms += s.terms;
            }
            const double n = opts.samples;
            DiagnoseRow row;
            row.coeff = coeff;
            row.estimator = names[ei];
            row.samples = opts.samples;
            row.mc_mean = total.sum / n;
            row.exact = exact;
            row.bias = row.mc_mean - exact;
            const double var = std::max(0.0, (total.sumsq - n * row.mc_mean * row.mc_mean) / (n - 1));
            row.se = std::sqrt(var / n);
            row.mean_terms = total.terms / n;
            if (!unbiased) {
                double truncated = 0.0;
                Mat power = Mat::Identity(d, d);
                for (int k = 1; k <= fixed; ++k) {
                    power = power * j;
                    truncated += (k % 2 == 1 ? 1.0 : -1.0) * power.trace() / k;
                }
                row.expected_bias = truncated - exact;
            }
            row.lipschitz_bound = bound;
            rows.push_back(row);
        }
    }
    return rows;
}

std::string diagnose_csv(const std::vector<DiagnoseRow>& rows) {
    std::string out = "coeff,estimator,samples,mc_mean,exact,bias,se,mean_terms,expected_bias,lipschitz_bound\n";
    for (const auto& r : rows) {
        out += num(r.coeff) + "," + r.estimator + "," + std::to_string(r.samples) + "," + num(r.mc_mean) + "," +
               num(r.exact) + "," + num(r.bias) + "," + num(r.se) + "," + num(r.mean_terms) + "," +
               num(r.expected_bias) + "," + num(r.lipschitz_bound) + "\n";
    }
    return out;
}

std::string eval_json(const EvalRecord& r) {
    nlohmann::json j;
    j["mode"] = r.mode;
    j["dataset"] = r.dataset;
    j["step"] = r.step;
    j["n_eval"] = r.n_eval;
    j["nll_nats"] = r.result.nll_nats;
    j["nll_bits"] = r.result.nll_bits();
    j["se_nats"] = r.result.se_nats;
    j["mean_terms"] = r.result.mean_terms;
    return j.dump();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write '" + path + "'");
    out << content;
    require(static_cast<bool>(out), ErrorCode::io, "error writing '" + path + "'");
}

}  // namespace resflow
