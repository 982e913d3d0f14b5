#include "train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "parallel.hpp"

namespace resflow {

namespace {

constexpr int kChunk = 256;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct LayerState {
    Mat input;
    BlockTrace trace;
    ParamGradient logdet_grad;
    Mat logdet_input_grad;
};

// Gradient of sum_b log p(x_b) over one chunk, plus the summed log p.
struct ChunkResult {
    std::vector<double> grad;
    double logp = 0.0;
    double logp_exact = 0.0;
};

ChunkResult chunk_gradient(const FlowModel& model, const Mat& x, const EstimatorConfig& cfg, const SeriesPlan& plan,
                           Rng& rng, bool with_exact) {
    const auto n = x.cols();
    std::vector<LayerState> states(model.layers.size());
    Mat cur = x;
    Vec logdet = Vec::Zero(n);
    Vec logdet_exact = Vec::Zero(n);
    const double inv_h = 1.0 / cfg.n_hutchinson;

    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        auto& st = states[i];
        st.input = cur;
        if (const auto* a = std::get_if<ActNorm>(&model.layers[i])) {
            require(a->initialized, ErrorCode::uninitialized, "actnorm layer used before data-dependent initialization");
            cur.colwise() += a->shift;
            cur = a->scale().asDiagonal() * cur;
            logdet.array() += a->logdet();
            logdet_exact.array() += a->logdet();
            continue;
        }
        const auto& params = std::get<ResidualBlock>(model.layers[i]).params;
        st.trace = trace_block(params, cur);
        st.logdet_grad = ParamGradient::zeros_like(params);
        st.logdet_input_grad = Mat::Zero(model.dim, n);
        for (int h = 0; h < cfg.n_hutchinson; ++h) {
            const Mat v = draw_tangents(cfg.hutchinson, model.dim, static_cast<int>(n), rng);
            Mat ig;
            logdet += inv_h * neumann_logdet_and_grad(params, st.trace, v, plan, st.logdet_grad, &ig);
            st.logdet_input_grad += inv_h * ig;
        }
        st.logdet_grad *= inv_h;
        if (with_exact) logdet_exact += exact_logdet_columns(params, st.trace);
        cur += st.trace.output();
    }

    ChunkResult out;
    double base = 0.0;
    for (Eigen::Index b = 0; b < n; ++b) base += standard_normal_logpdf(cur.col(b));
    out.logp = base + logdet.sum();
    out.logp_exact = with_exact ? base + logdet_exact.sum() : kNaN;

    // Reverse pass; per-layer gradients are collected back to front.
    std::vector<std::vector<double>> parts(model.layers.size());
    Mat adj = -cur;
    for (std::size_t ii = model.layers.size(); ii-- > 0;) {
        auto& st = states[ii];
        if (const auto* a = std::get_if<ActNorm>(&model.layers[ii])) {
            const Vec s = a->scale();
            const Mat scaled = s.asDiagonal() * adj;
            Mat shifted = st.input;
            shifted.colwise() += a->shift;
            const Vec g_shift = scaled.rowwise().sum();
            const Vec g_log = shifted.cwiseProduct(scaled).rowwise().sum() + Vec::Constant(model.dim, double(n));
            auto& p = parts[ii];
            p.assign(g_shift.data(), g_shift.data() + g_shift.size());
            p.insert(p.end(), g_log.data(), g_log.data() + g_log.size());
            adj = scaled;
            continue;
        }
        const auto& params = std::get<ResidualBlock>(model.layers[ii]).params;
        auto g = ParamGradient::zeros_like(params);
        Mat jt_adj;
        accumulate_output_grad(params, st.trace, adj, g, &jt_adj);
        g += st.logdet_grad;
        parts[ii] = g.flatten();
        adj += jt_adj + st.logdet_input_grad;
        st = LayerState{};
    }
    for (auto& p : parts) out.grad.insert(out.grad.end(), p.begin(), p.end());
    return out;
}

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string diagnostic_dump(long long step, const NllGradient& g, const FlowModel& model) {
    std::ostringstream os;
    os << "non-finite training state at step " << step << ": nll=" << g.nll;
    std::size_t bad = 0;
    for (; bad < g.grad.size(); ++bad)
        if (!std::isfinite(g.grad[bad])) break;
    if (bad < g.grad.size()) os << ", first non-finite gradient entry " << bad << " of " << g.grad.size();
    const auto theta = flatten_params(model);
    double max_abs = 0.0;
    for (double t : theta) max_abs = std::max(max_abs, std::abs(t));
    os << ", max |theta|=" << max_abs << ", series terms=" << g.n_terms;
    return os.str();
}

}  // namespace

std::uint64_t eval_stream_seed(std::uint64_t seed) { return seed ^ 0x5eedf00dcafe1234ULL; }

EvalMode parse_eval_mode(std::string_view name) {
    if (name == "exact") return EvalMode::exact;
    if (name == "estimator" || name == "estimator20+tail") return EvalMode::estimator;
    throw Error(ErrorCode::config, "unknown eval mode '" + std::string(name) + "' (exact|estimator)");
}

std::string to_string(EvalMode m) { return m == EvalMode::exact ? "exact" : "estimator"; }

void TrainConfig::validate() const {
    require(blocks >= 0, ErrorCode::config, "blocks must be non-negative");
    require(hidden_width >= 1, ErrorCode::config, "hidden_width must be positive");
    require(steps >= 0, ErrorCode::config, "steps must be non-negative");
    require(batch_size >= 1, ErrorCode::config, "batch_size must be positive");
    require(adam.lr >= 0.0, ErrorCode::config, "lr must be non-negative");
    require(adam.weight_decay >= 0.0 && adam.weight_decay < 1.0, ErrorCode::config, "weight_decay must lie in [0, 1)");
    require(polyak_decay >= 0.0 && polyak_decay < 1.0, ErrorCode::config, "polyak_decay must lie in [0, 1)");
    require(threads >= 1, ErrorCode::config, "threads must be positive");
    require(n_eval >= 1, ErrorCode::config, "n_eval must be positive");
    require(eval_n_exact >= 0 && eval_tail_samples >= 1, ErrorCode::config, "invalid evaluation estimator settings");
    require(lipschitz.coeff > 0.0 && lipschitz.coeff < 1.0, ErrorCode::config, "lipschitz.coeff must lie in (0, 1)");
    require(lipschitz.tol > 0.0 && lipschitz.max_iters >= 1 && lipschitz.max_iters_warm >= 1, ErrorCode::config,
            "invalid power-iteration settings");
    estimator.validate();
}

TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.dataset = parse_dataset(c.get("dataset"));
    t.blocks = static_cast<int>(c.get_int("blocks"));
    t.hidden_width = static_cast<int>(c.get_int("hidden_width"));
    t.activation = parse_activation(c.get("activation"));
    t.steps = c.get_int("steps");
    t.batch_size = static_cast<int>(c.get_int("batch_size"));
    t.adam.lr = c.get_double("lr");
    t.adam.weight_decay = c.get_double("weight_decay");
    t.adam.beta1 = c.get_double("adam.beta1");
    t.adam.beta2 = c.get_double("adam.beta2");
    t.adam.eps = c.get_double("adam.eps");
    t.polyak_decay = c.get_double("polyak_decay");
    t.seed = c.get_u64("seed");
    t.threads = static_cast<int>(c.get_int("threads"));
    t.eval_every = c.get_int("eval_every");
    t.checkpoint_every = c.get_int("checkpoint_every");
    t.n_eval = static_cast<int>(c.get_int("n_eval"));
    t.eval_mode = parse_eval_mode(c.get("eval.mode"));
    t.eval_n_exact = static_cast<int>(c.get_int("eval.n_exact"));
    t.eval_tail_samples = static_cast<int>(c.get_int("eval.tail_samples"));
    t.lipschitz.coeff = c.get_double("lipschitz.coeff");
    t.lipschitz.preset = parse_norm_preset(c.get("lipschitz.norm_preset"));
    t.lipschitz.tol = c.get_double("lipschitz.tol");
    t.lipschitz.max_iters = static_cast<int>(c.get_int("lipschitz.max_iters"));
    t.lipschitz.max_iters_warm = static_cast<int>(c.get_int("lipschitz.max_iters_warm"));
    t.estimator.kind = parse_estimator_kind(c.get("estimator.kind"));
    t.estimator.roulette.q = c.get_double("estimator.q");
    t.estimator.roulette.n_exact = static_cast<int>(c.get_int("estimator.n_exact"));
    t.estimator.n_fixed = static_cast<int>(c.get_int("estimator.n_fixed"));
    t.estimator.hutchinson = parse_hutchinson(c.get("estimator.hutchinson"));
    t.estimator.n_hutchinson = static_cast<int>(c.get_int("estimator.n_hutchinson"));
    t.validate();
    return t;
}

std::string to_json_line(const Metrics& m) {
    nlohmann::json j;
    j["step"] = m.step;
    j["train_nll_nats"] = m.train_nll_nats;
    j["train_nll_exact_nats"] = m.train_nll_exact_nats;
    if (m.eval_nll_nats) {
        j["eval_nll_nats"] = *m.eval_nll_nats;
        j["eval_nll_bits"] = *m.eval_nll_bits;
        j["eval_nll_se"] = *m.eval_nll_se;
    }
    j["grad_norm"] = m.grad_norm;
    j["mean_terms_evaluated"] = m.mean_terms_evaluated;
    j["layer_norms"] = m.layer_norms;
    return j.dump();
}

NllGradient nll_gradient(const FlowModel& model, const Mat& batch, const EstimatorConfig& cfg, Rng& rng, int threads,
                         bool with_exact) {
    cfg.validate();
    require(batch.rows() == model.dim, ErrorCode::structural, "batch dimension does not match model");
    require(batch.cols() > 0, ErrorCode::usage, "empty training batch");
    const auto plan = draw_plan(cfg, rng);
    const std::uint64_t chunk_seed = rng();
    const auto n = batch.cols();
    const int n_chunks = static_cast<int>((n + kChunk - 1) / kChunk);
    std::vector<ChunkResult> results(static_cast<std::size_t>(n_chunks));
    parallel_for(n_chunks, threads, [&](int c) {
        const auto begin = static_cast<Eigen::Index>(c) * kChunk;
        const auto cols = std::min<Eigen::Index>(kChunk, n - begin);
        Rng crng = stream_rng(chunk_seed, static_cast<std::uint64_t>(c));
        results[static_cast<std::size_t>(c)] =
            chunk_gradient(model, batch.middleCols(begin, cols), cfg, plan, crng, with_exact);
    });

    NllGradient out;
    out.grad.assign(param_count(model), 0.0);
    double logp = 0.0, logp_exact = 0.0;
    for (const auto& r : results) {
        for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += r.grad[i];
        logp += r.logp;
        logp_exact += r.logp_exact;
    }
    const double scale = -1.0 / static_cast<double>(n);
    for (auto& g : out.grad) g *= scale;
    out.nll = scale * logp;
    out.nll_exact = with_exact ? scale * logp_exact : kNaN;
    out.n_terms = model.num_blocks() > 0 ? plan.n_terms() : 0;
    return out;
}

EvalResult evaluate(const FlowModel& model, DatasetKind dataset, int n_eval, EvalMode mode, std::uint64_t seed,
                    int threads, int n_exact, int tail_samples) {
    require(n_eval >= 1, ErrorCode::config, "n_eval must be positive");
    Dataset2D data(dataset, seed);
    const Mat x = data.batch(n_eval);
    DensityOptions opts;
    opts.threads = threads;
    opts.seed = seed;
    if (mode == EvalMode::estimator) {
        opts.mode = LogDetMode::estimator;
        opts.estimator.kind = EstimatorKind::unbiased;
        opts.estimator.roulette.n_exact = n_exact;
        opts.repeats = tail_samples;
    }
    const auto dens = log_density(model, x, opts);
    EvalResult r;
    const Vec nll = -dens.logp;
    r.nll_nats = nll.mean();
    if (n_eval > 1) {
        const double var = (nll.array() - r.nll_nats).square().sum() / (n_eval - 1);
        r.se_nats = std::sqrt(var / n_eval);
    }
    r.mean_terms = dens.mean_terms;
    return r;
}

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(cfg), data_(cfg.dataset, cfg.seed), rng_(stream_rng(cfg.seed, 1)) {
    cfg_.validate();
    FlowInit init;
    init.dim = 2;
    init.blocks = cfg_.blocks;
    init.hidden_width = cfg_.hidden_width;
    init.activation = cfg_.activation;
    model_ = make_flow(init, cfg_.lipschitz, rng_);
    actnorm_initialize(model_, data_.batch(cfg_.batch_size));
    const auto theta = flatten_params(model_);
    adam_ = Adam(theta.size(), cfg_.adam);
    polyak_ = PolyakAverage(theta, cfg_.polyak_decay);
}

FlowModel Trainer::averaged_model() const {
    FlowModel m = model_;
    assign_params(m, polyak_.shadow());
    apply_constraints(m, true);
    return m;
}

Metrics Trainer::step() { return step_on(data_.batch(cfg_.batch_size)); }

Metrics Trainer::step_on(const Mat& batch) {
    const bool with_exact = model_.dim <= kMaxDenseDim;
    const auto g = nll_gradient(model_, batch, cfg_.estimator, rng_, cfg_.threads, with_exact);
    if (!std::isfinite(g.nll) || !all_finite(g.grad)) throw Error(ErrorCode::numeric, diagnostic_dump(step_ + 1, g, model_));

    auto theta = flatten_params(model_);
    adam_.step(theta, g.grad);
    assign_params(model_, theta);
    const auto reports = apply_constraints(model_, false);
    theta = flatten_params(model_);
    if (!all_finite(theta)) throw Error(ErrorCode::numeric, diagnostic_dump(step_ + 1, g, model_));
    polyak_.update(theta);
    ++step_;

    Metrics m;
    m.step = step_;
    m.train_nll_nats = g.nll;
    m.train_nll_exact_nats = g.nll_exact;
    double sq = 0.0;
    for (double x : g.grad) sq += x * x;
    m.grad_norm = std::sqrt(sq);
    m.mean_terms_evaluated = g.n_terms;
    for (const auto& r : reports) m.layer_norms.insert(m.layer_norms.end(), r.norms_after.begin(), r.norms_after.end());
    return m;
}

EvalResult Trainer::evaluate_averaged(EvalMode mode) const {
    return evaluate(averaged_model(), cfg_.dataset, cfg_.n_eval, mode, eval_stream_seed(cfg_.seed), cfg_.threads,
                    cfg_.eval_n_exact, cfg_.eval_tail_samples);
}

RunSummary run_training(const TrainConfig& cfg, const std::string& out_dir, const Config* source,
                        const std::function<void(const Metrics&)>& on_step) {
    Trainer trainer(cfg);
    RunSummary summary;
    std::ofstream metrics_out;
    namespace fs = std::filesystem;
    if (!out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        require(!ec, ErrorCode::io, "cannot create output directory '" + out_dir + "': " + ec.message());
        metrics_out.open(fs::path(out_dir) / "metrics.jsonl", std::ios::trunc);
        require(static_cast<bool>(metrics_out), ErrorCode::io, "cannot write metrics in '" + out_dir + "'");
    }
    auto make_checkpoint = [&] {
        Checkpoint ck;
        ck.model = trainer.model();
        ck.polyak_shadow = trainer.polyak().shadow();
        ck.step = trainer.step_count();
        ck.seed = cfg.seed;
        if (source) ck.config = source->entries();
        return ck;
    };
    auto emit = [&](Metrics& m, bool with_eval) {
        if (with_eval) {
            const auto e = trainer.evaluate_averaged(cfg.eval_mode);
            m.eval_nll_nats = e.nll_nats;
            m.eval_nll_bits = e.nll_bits();
            m.eval_nll_se = e.se_nats;
        }
        summary.metrics.push_back(m);
        if (metrics_out.is_open()) metrics_out << to_json_line(m) << '\n' << std::flush;
        if (on_step) on_step(m);
    };

    Metrics initial;
    initial.train_nll_nats = kNaN;
    initial.train_nll_exact_nats = kNaN;
    emit(initial, true);
    summary.initial_eval_nll_nats = *initial.eval_nll_nats;
    summary.final_eval_nll_nats = summary.initial_eval_nll_nats;

    for (long long s = 1; s <= cfg.steps; ++s) {
        auto m = trainer.step();
        const bool with_eval = s == cfg.steps || (cfg.eval_every > 0 && s % cfg.eval_every == 0);
        emit(m, with_eval);
        if (with_eval) summary.final_eval_nll_nats = *m.eval_nll_nats;
        if (!out_dir.empty() && cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) {
            char name[64];
            std::snprintf(name, sizeof name, "checkpoint_%06lld.txt", s);
            save_checkpoint(make_checkpoint(), (fs::path(out_dir) / name).string());
        }
    }
    summary.final_state = make_checkpoint();
    if (!out_dir.empty()) {
        summary.final_checkpoint = (fs::path(out_dir) / "checkpoint_final.txt").string();
        save_checkpoint(summary.final_state, summary.final_checkpoint);
    }
    return summary;
}

}  // namespace resflow
