#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "datasets.hpp"
#include "estimators.hpp"
#include "flow.hpp"
#include "optim.hpp"

namespace resflow {

enum class EvalMode { exact, estimator };

EvalMode parse_eval_mode(std::string_view name);
std::string to_string(EvalMode m);

struct TrainConfig {
    DatasetKind dataset = DatasetKind::checkerboard;
    int blocks = 10;
    int hidden_width = 128;
    Activation activation = Activation::lipswish;
    long long steps = 2000;
    int batch_size = 512;
    Adam::Params adam;
    double polyak_decay = 0.999;
    EstimatorConfig estimator;
    LipschitzConfig lipschitz;
    std::uint64_t seed = 0;
    int threads = 1;
    long long eval_every = 250;
    long long checkpoint_every = 500;
    int n_eval = 4000;
    EvalMode eval_mode = EvalMode::exact;
    int eval_n_exact = 20;       // leading exact terms in estimator evaluation
    int eval_tail_samples = 10;  // independent tail estimates averaged per point

    void validate() const;
};

TrainConfig train_config_from(const Config& cfg);

struct Metrics {
    long long step = 0;
    double train_nll_nats = 0.0;        // estimator objective on the batch
    double train_nll_exact_nats = 0.0;  // same batch, exact log-dets (NaN if unavailable)
    std::optional<double> eval_nll_nats;
    std::optional<double> eval_nll_bits;
    std::optional<double> eval_nll_se;
    double grad_norm = 0.0;
    double mean_terms_evaluated = 0.0;
    std::vector<double> layer_norms;  // per block, per linear layer
};

std::string to_json_line(const Metrics& m);

struct NllGradient {
    std::vector<double> grad;  // of mean NLL in nats, flatten_params layout
    double nll = 0.0;          // estimate from the same log-det chains
    double nll_exact = 0.0;    // NaN unless requested
    int n_terms = 0;           // series terms per block
};

// Gradient of the mean negative log-likelihood over the columns of `batch`:
// exact reverse pass for log p(f(x)) and the actnorm terms, Neumann
// estimator for every block's log-det (computed while going forward). One
// truncation is drawn per call; tangents come from per-chunk streams so the
// result does not depend on `threads`.
NllGradient nll_gradient(const FlowModel& model, const Mat& batch, const EstimatorConfig& cfg, Rng& rng,
                         int threads = 1, bool with_exact = false);

// Seed of the held-out evaluation stream of a run seeded with `seed`.
std::uint64_t eval_stream_seed(std::uint64_t seed);

struct EvalResult {
    double nll_nats = 0.0;
    double se_nats = 0.0;
    double mean_terms = 0.0;
    double nll_bits() const { return nll_nats / kLn2; }
};

// Mean NLL of `model` on n_eval fresh samples from a generator seeded with
// `seed`. Estimator mode evaluates n_exact leading terms exactly and
// averages tail_samples roulette estimates per point.
EvalResult evaluate(const FlowModel& model, DatasetKind dataset, int n_eval, EvalMode mode, std::uint64_t seed,
                    int threads = 1, int n_exact = 20, int tail_samples = 10);

// Model state plus optimizer and Polyak shadow for one run.
class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg);

    const TrainConfig& config() const { return cfg_; }
    const FlowModel& model() const { return model_; }
    FlowModel& model() { return model_; }
    const PolyakAverage& polyak() const { return polyak_; }
    const Adam& optimizer() const { return adam_; }
    long long step_count() const { return step_; }

    // The model with Polyak-averaged parameters, constraints applied.
    FlowModel averaged_model() const;

    Metrics step();
    Metrics step_on(const Mat& batch);
    EvalResult evaluate_averaged(EvalMode mode) const;

private:
    TrainConfig cfg_;
    FlowModel model_;
    Dataset2D data_;
    Rng rng_;
    Adam adam_;
    PolyakAverage polyak_;
    long long step_ = 0;
};

struct RunSummary {
    std::vector<Metrics> metrics;
    double initial_eval_nll_nats = 0.0;
    double final_eval_nll_nats = 0.0;
    std::string final_checkpoint;  // empty without an out_dir
    Checkpoint final_state;
};

// Runs cfg.steps steps, writing metrics.jsonl (one record per step, eval
// fields on eval steps and the last step) and checkpoints into out_dir.
// An empty out_dir disables file output.
RunSummary run_training(const TrainConfig& cfg, const std::string& out_dir, const Config* source = nullptr,
                        const std::function<void(const Metrics&)>& on_step = {});

}  // namespace resflow
