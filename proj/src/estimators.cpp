#include "estimators.hpp"

#include <algorithm>
#include <cmath>

namespace resflow {

namespace {

double sign_pow(int k) { return (k % 2 == 0) ? 1.0 : -1.0; }  // (-1)^k

Mat weights_column(const std::vector<double>& w, Eigen::Index cols) {
    Mat m(static_cast<Eigen::Index>(w.size()), cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).setConstant(w[static_cast<std::size_t>(r)]);
    return m;
}

LogDetSample estimate_with_plan(const BlockParams& params, const Vec& x, const EstimatorConfig& cfg,
                                const SeriesPlan& plan, Rng& rng) {
    const int d = params.dim();
    const Mat v = draw_tangents(cfg.hutchinson, d, cfg.n_hutchinson, rng);
    const auto trace = trace_block(params, x.replicate(1, cfg.n_hutchinson));
    Mat per_term;
    const Vec est = series_logdet(params, trace, v, weights_column(plan.logdet_weights, v.cols()), &per_term);

    LogDetSample s;
    s.value = est.mean();
    s.n_terms_evaluated = plan.n_terms();
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
        s.seeds.push_back({v.col(c), static_cast<std::uint64_t>(c)});
    }
    s.per_term.resize(static_cast<std::size_t>(plan.n_terms()));
    for (int k = 0; k < plan.n_terms(); ++k) s.per_term[static_cast<std::size_t>(k)] = per_term.row(k).mean();
    return s;
}

}  // namespace

void RouletteDist::validate() const {
    require(q > 0.0 && q < 1.0, ErrorCode::config, "roulette success probability must lie in (0, 1)");
    require(n_exact >= 0, ErrorCode::config, "n_exact must be non-negative");
}

double RouletteDist::survival(int k) const { return k <= 1 ? 1.0 : std::pow(1.0 - q, k - 1); }

int RouletteDist::sample(Rng& rng) const {
    std::geometric_distribution<int> geom(q);
    return geom(rng) + 1;
}

double RouletteDist::term_weight(int k) const { return k <= n_exact ? 1.0 : 1.0 / survival(k - n_exact); }

HutchinsonDist parse_hutchinson(std::string_view name) {
    if (name == "gaussian") return HutchinsonDist::gaussian;
    if (name == "rademacher") return HutchinsonDist::rademacher;
    throw Error(ErrorCode::config, "unknown Hutchinson distribution '" + std::string(name) + "'");
}

EstimatorKind parse_estimator_kind(std::string_view name) {
    if (name == "unbiased") return EstimatorKind::unbiased;
    if (name == "biased") return EstimatorKind::biased;
    throw Error(ErrorCode::config, "unknown estimator kind '" + std::string(name) + "' (unbiased|biased)");
}

std::string to_string(HutchinsonDist d) { return d == HutchinsonDist::gaussian ? "gaussian" : "rademacher"; }
std::string to_string(EstimatorKind k) { return k == EstimatorKind::unbiased ? "unbiased" : "biased"; }

void EstimatorConfig::validate() const {
    roulette.validate();
    require(n_hutchinson >= 1, ErrorCode::config, "n_hutchinson must be at least 1");
    require(n_fixed >= 1, ErrorCode::config, "n_fixed must be at least 1");
}

SeriesPlan plan_roulette(const RouletteDist& dist, int n_tail) {
    require(n_tail >= 0, ErrorCode::refusal, "negative roulette tail length");
    SeriesPlan plan;
    const int K = dist.n_exact + n_tail;
    for (int k = 1; k <= K; ++k) {
        plan.logdet_weights.push_back(dist.term_weight(k));
        plan.neumann_weights.push_back(dist.term_weight(k));
    }
    return plan;
}

SeriesPlan plan_fixed(int n_fixed) {
    require(n_fixed >= 1, ErrorCode::refusal, "fixed truncation needs at least one term");
    SeriesPlan plan;
    plan.logdet_weights.assign(static_cast<std::size_t>(n_fixed), 1.0);
    // d/dtheta of n terms of the log-det series is n terms (k = 0..n-1) of
    // the gradient series.
    plan.neumann_weights.assign(static_cast<std::size_t>(n_fixed), 1.0);
    plan.neumann_weights.back() = 0.0;
    return plan;
}

SeriesPlan draw_plan(const EstimatorConfig& cfg, Rng& rng) {
    if (cfg.kind == EstimatorKind::biased) return plan_fixed(cfg.n_fixed);
    return plan_roulette(cfg.roulette, cfg.roulette.sample(rng));
}

Vec draw_tangent(HutchinsonDist dist, int dim, Rng& rng) { return draw_tangents(dist, dim, 1, rng).col(0); }

Mat draw_tangents(HutchinsonDist dist, int dim, int count, Rng& rng) {
    Mat v(dim, count);
    if (dist == HutchinsonDist::gaussian) {
        std::normal_distribution<double> normal;
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = normal(rng);
    } else {
        std::bernoulli_distribution coin(0.5);
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = coin(rng) ? 1.0 : -1.0;
    }
    return v;
}

double exact_logdet(const BlockParams& params, const Vec& x) {
    const Mat j = block_dense_jacobian(params, x);
    const Mat a = Mat::Identity(j.rows(), j.cols()) + j;
    return std::log(std::abs(a.partialPivLu().determinant()));
}

double exact_series_logdet(const BlockParams& params, const Vec& x, double tol) {
    const Mat j = block_dense_jacobian(params, x);
    const double d = static_cast<double>(j.rows());
    Mat power = j;
    double sum = 0.0;
    double prev_norm = j.norm();
    for (int k = 1; k <= 10000; ++k) {
        sum += sign_pow(k + 1) * power.trace() / k;
        const Mat next = power * j;
        const double norm = next.norm();
        const double ratio = prev_norm > 0 ? std::min(norm / prev_norm, 0.999) : 0.0;
        if (d * norm / (k + 1) / (1.0 - ratio) < tol) return sum;
        prev_norm = norm;
        power = next;
    }
    throw Error(ErrorCode::contractivity, "log-det power series did not converge within 10^4 terms");
}

Vec series_logdet(const BlockParams& params, const BlockTrace& trace, const Mat& v, const Mat& weights,
                  Mat* per_term) {
    const auto K = weights.rows();
    require(weights.cols() == v.cols(), ErrorCode::structural, "weights must have one column per tangent");
    Vec est = Vec::Zero(v.cols());
    if (per_term) *per_term = Mat::Zero(K, v.cols());
    Mat w = v;
    for (Eigen::Index k = 1; k <= K; ++k) {
        w = jvp(params, trace, w);
        const Vec quad = v.cwiseProduct(w).colwise().sum().transpose();
        const Vec term = (sign_pow(static_cast<int>(k) + 1) / static_cast<double>(k)) *
                         quad.cwiseProduct(weights.row(k - 1).transpose());
        est += term;
        if (per_term) per_term->row(k - 1) = term.transpose();
    }
    return est;
}

LogDetSample biased_truncated_logdet(const BlockParams& params, const Vec& x, const EstimatorConfig& cfg, Rng& rng) {
    return estimate_with_plan(params, x, cfg, plan_fixed(cfg.n_fixed), rng);
}

LogDetSample roulette_logdet(const BlockParams& params, const Vec& x, const EstimatorConfig& cfg, Rng& rng) {
    cfg.roulette.validate();
    const auto plan = plan_roulette(cfg.roulette, cfg.roulette.sample(rng));
    return estimate_with_plan(params, x, cfg, plan, rng);
}

LogDetSample estimate_logdet(const BlockParams& params, const Vec& x, const EstimatorConfig& cfg, Rng& rng) {
    return cfg.kind == EstimatorKind::biased ? biased_truncated_logdet(params, x, cfg, rng)
                                             : roulette_logdet(params, x, cfg, rng);
}

Vec neumann_logdet_and_grad(const BlockParams& params, const BlockTrace& trace, const Mat& v,
                            const SeriesPlan& plan, ParamGradient& grad, Mat* input_grad, StorageProbe* probe) {
    const int K = plan.n_terms();
    if (probe) probe->retain(4);  // v, r, w, block trace
    Mat r = v;
    Mat w = v;
    Vec est = Vec::Zero(v.cols());
    for (int k = 1; k <= K; ++k) {
        r = vjp(params, trace, r);
        const auto idx = static_cast<std::size_t>(k - 1);
        est += (sign_pow(k + 1) / k * plan.logdet_weights[idx]) * r.cwiseProduct(v).colwise().sum().transpose();
        const double nw = plan.neumann_weights[idx];
        if (nw != 0.0) w += (sign_pow(k) * nw) * r;
    }
    accumulate_bilinear_grad(params, trace, w, v, grad, input_grad);
    if (probe) probe->release(4);
    return est;
}

LogDetGradient neumann_logdet_grad(const BlockParams& params, const Vec& x, const Vec& v, const SeriesPlan& plan,
                                   StorageProbe* probe) {
    LogDetGradient out;
    out.params = ParamGradient::zeros_like(params);
    const auto trace = trace_block(params, Mat(x));
    Mat input;
    const Vec est = neumann_logdet_and_grad(params, trace, Mat(v), plan, out.params, &input, probe);
    out.input = input.col(0);
    out.logdet_estimate = est(0);
    out.n_terms = plan.n_terms();
    return out;
}

LogDetGradient neumann_logdet_grad(const BlockParams& params, const Vec& x, const EstimatorConfig& cfg, Rng& rng,
                                   StorageProbe* probe) {
    cfg.validate();
    const auto plan = draw_plan(cfg, rng);
    const int d = params.dim();
    const Mat vs = draw_tangents(cfg.hutchinson, d, cfg.n_hutchinson, rng);
    LogDetGradient out;
    out.params = ParamGradient::zeros_like(params);
    const auto trace = trace_block(params, x.replicate(1, cfg.n_hutchinson));
    Mat input;
    const Vec est = neumann_logdet_and_grad(params, trace, vs, plan, out.params, &input, probe);
    const double inv = 1.0 / cfg.n_hutchinson;
    out.params *= inv;
    out.input = input.rowwise().sum() * inv;
    out.logdet_estimate = est.mean();
    out.n_terms = plan.n_terms();
    return out;
}

ParamGradient naive_series_grad(const BlockParams& params, const Vec& x, const Vec& v, int n_terms,
                                StorageProbe* probe) {
    require(n_terms >= 1 && n_terms <= kMaxNaiveTerms, ErrorCode::refusal,
            "naive series gradient limited to 1.." + std::to_string(kMaxNaiveTerms) + " terms");
    const auto trace = trace_block(params, Mat(x));
    if (probe) probe->retain(1);  // block trace

    // Forward tangent chain J^m v, m = 0..n-1, kept alive for all terms.
    std::vector<Mat> chain;
    chain.reserve(static_cast<std::size_t>(n_terms));
    chain.emplace_back(v);
    if (probe) probe->retain(1);
    for (int m = 1; m < n_terms; ++m) {
        chain.push_back(jvp(params, trace, chain.back()));
        if (probe) probe->retain(1);
    }

    // d(v^T J^k v) = sum_{j<k} (v^T J^j) dJ (J^(k-1-j) v).
    auto grad = ParamGradient::zeros_like(params);
    Mat left = v;
    if (probe) probe->retain(1);
    for (int j = 0; j < n_terms; ++j) {
        if (j > 0) left = vjp(params, trace, left);
        for (int k = j + 1; k <= n_terms; ++k) {
            auto term = ParamGradient::zeros_like(params);
            accumulate_bilinear_grad(params, trace, left, chain[static_cast<std::size_t>(k - 1 - j)], term);
            term *= sign_pow(k + 1) / k;
            grad += term;
        }
    }
    if (probe) probe->release(n_terms + 2);
    return grad;
}

ParamGradient naive_series_grad(const BlockParams& params, const Vec& x, int n_terms, StorageProbe* probe) {
    const int d = params.dim();
    require(d <= kMaxDenseDim, ErrorCode::refusal, "exact-trace gradient refused above the dense dimension limit");
    auto grad = ParamGradient::zeros_like(params);
    for (int i = 0; i < d; ++i) grad += naive_series_grad(params, x, Vec::Unit(d, i), n_terms, probe);
    return grad;
}

ParamGradient exact_neumann_grad(const BlockParams& params, const Vec& x, int n_terms) {
    const int d = params.dim();
    require(d <= kMaxDenseDim, ErrorCode::refusal, "exact-trace gradient refused above the dense dimension limit");
    require(n_terms >= 1, ErrorCode::refusal, "need at least one gradient term");
    const auto trace = trace_block(params, x.replicate(1, d));
    const Mat basis = Mat::Identity(d, d);
    Mat r = basis;
    Mat w = basis;
    for (int k = 1; k < n_terms; ++k) {
        r = vjp(params, trace, r);
        w += sign_pow(k) * r;
    }
    auto grad = ParamGradient::zeros_like(params);
    accumulate_bilinear_grad(params, trace, w, basis, grad);
    return grad;
}

}  // namespace resflow
