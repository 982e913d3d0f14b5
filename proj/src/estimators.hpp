#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "common.hpp"
#include "diffkit.hpp"

namespace resflow {

// Geometric truncation law on {1, 2, ...} applied after `n_exact` terms that
// are always evaluated.
struct RouletteDist {
    double q = 0.5;  // success probability
    int n_exact = 2;

    void validate() const;
    // P(N >= k) = (1 - q)^(k - 1); 1 for k <= 1.
    double survival(int k) const;
    int sample(Rng& rng) const;
    // Reweighting of series term k (1-based): 1 while k <= n_exact, then
    // 1 / P(N >= k - n_exact).
    double term_weight(int k) const;
};

enum class HutchinsonDist { gaussian, rademacher };
enum class EstimatorKind { unbiased, biased };

HutchinsonDist parse_hutchinson(std::string_view name);
EstimatorKind parse_estimator_kind(std::string_view name);
std::string to_string(HutchinsonDist d);
std::string to_string(EstimatorKind k);

struct EstimatorConfig {
    EstimatorKind kind = EstimatorKind::unbiased;
    RouletteDist roulette;
    HutchinsonDist hutchinson = HutchinsonDist::gaussian;
    int n_hutchinson = 1;
    int n_fixed = 5;

    void validate() const;
};

struct TangentSeed {
    Vec direction;
    std::uint64_t rng_stream_id = 0;
};

struct LogDetSample {
    double value = 0.0;  // nats
    int n_terms_evaluated = 0;
    std::vector<TangentSeed> seeds;
    std::vector<double> per_term;
};

// Counts intermediate buffers held alive by an estimator; `peak` is the
// figure of merit for the memory contract.
class StorageProbe {
public:
    void retain(int n = 1) {
        live_ += n;
        if (live_ > peak_) peak_ = live_;
    }
    void release(int n = 1) { live_ -= n; }
    int live() const { return live_; }
    int peak() const { return peak_; }

private:
    int live_ = 0;
    int peak_ = 0;
};

// Per-term weights of one estimate; terms are k = 1..n_terms.
// logdet_weights[k-1] multiplies (-1)^(k+1)/k v^T J^k v and
// neumann_weights[k-1] multiplies (-1)^k v^T J^k in the gradient series
// (whose k = 0 term always has weight 1).
struct SeriesPlan {
    std::vector<double> logdet_weights;
    std::vector<double> neumann_weights;

    int n_terms() const { return static_cast<int>(logdet_weights.size()); }
};

SeriesPlan plan_roulette(const RouletteDist& dist, int n_tail);
SeriesPlan plan_fixed(int n_fixed);
SeriesPlan draw_plan(const EstimatorConfig& cfg, Rng& rng);

Vec draw_tangent(HutchinsonDist dist, int dim, Rng& rng);
Mat draw_tangents(HutchinsonDist dist, int dim, int count, Rng& rng);

// log|det(I + J_g(x))| from the dense Jacobian (dim <= kMaxDenseDim).
double exact_logdet(const BlockParams& params, const Vec& x);
// Mercator series with exact traces of dense powers, summed until the tail
// bound drops below tol. Throws ErrorCode::contractivity after 10^4 terms.
double exact_series_logdet(const BlockParams& params, const Vec& x, double tol = 1e-12);

LogDetSample biased_truncated_logdet(const BlockParams& params, const Vec& x, const EstimatorConfig& cfg, Rng& rng);
LogDetSample roulette_logdet(const BlockParams& params, const Vec& x, const EstimatorConfig& cfg, Rng& rng);
// Dispatches on cfg.kind.
LogDetSample estimate_logdet(const BlockParams& params, const Vec& x, const EstimatorConfig& cfg, Rng& rng);

// Batched JVP-chain estimate: column b uses tangent v.col(b) and weights
// column b (rows are terms; a zero weight past a column's truncation simply
// drops the term). Returns the per-column estimate.
Vec series_logdet(const BlockParams& params, const BlockTrace& trace, const Mat& v, const Mat& weights,
                  Mat* per_term = nullptr);

struct LogDetGradient {
    ParamGradient params;
    Vec input;                    // d/dx of the log-det estimate
    double logdet_estimate = 0.0;  // from the same chain
    int n_terms = 0;
};

// Backward-in-forward kernel: runs the VJP chain r_k = v^T J^k, k = 1..K,
// accumulating w = v + sum_k (-1)^k neumann_weights[k-1] r_k without
// differentiating through it, then adds d/dtheta w^T J(x, theta) v into grad.
// Only v, the current r, w, and the block trace are held. Returns the
// per-column log-det estimate from the same chain.
Vec neumann_logdet_and_grad(const BlockParams& params, const BlockTrace& trace, const Mat& v,
                            const SeriesPlan& plan, ParamGradient& grad, Mat* input_grad,
                            StorageProbe* probe = nullptr);

LogDetGradient neumann_logdet_grad(const BlockParams& params, const Vec& x, const EstimatorConfig& cfg, Rng& rng,
                                   StorageProbe* probe = nullptr);
// Same with the tangent and the tail length pinned.
LogDetGradient neumann_logdet_grad(const BlockParams& params, const Vec& x, const Vec& v, const SeriesPlan& plan,
                                   StorageProbe* probe = nullptr);

inline constexpr int kMaxNaiveTerms = 20;

// Differentiates every term of the truncated series separately:
// sum_{k=1}^{n} (-1)^(k+1)/k d(v^T J^k v)/dtheta. Holds the whole tangent
// chain J^m v, so retained storage grows with n_terms.
ParamGradient naive_series_grad(const BlockParams& params, const Vec& x, const Vec& v, int n_terms,
                                StorageProbe* probe = nullptr);
// Exact-trace version (sums the fixed-v version over basis vectors).
ParamGradient naive_series_grad(const BlockParams& params, const Vec& x, int n_terms, StorageProbe* probe = nullptr);

// sum_{j=0}^{n_terms-1} (-1)^j tr(J^j dJ/dtheta) with exact traces. Equals the
// exact-trace naive series gradient at the same truncation.
ParamGradient exact_neumann_grad(const BlockParams& params, const Vec& x, int n_terms);

}  // namespace resflow
