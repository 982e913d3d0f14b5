#include "resflow/resflow.h"

#include <cstring>
#include <new>
#include <set>
#include <string>


#include "checkpoint.hpp"
#include "commands.hpp"
#include "config.hpp"
#include "train.hpp"

struct rf_config {
    resflow::Config config;
    std::set<std::string> explicit_keys;
};

struct rf_model {
    resflow::Checkpoint checkpoint;
    resflow::FlowModel eval;  // Polyak-averaged parameters when available
};

namespace {

using resflow::Error;
using resflow::ErrorCode;

thread_local std::string g_last_error;

template <class Fn>
rf_status guarded(Fn&& fn) {
    try {
        fn();
        return RF_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return static_cast<rf_status>(e.code());
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return RF_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return RF_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown failure";
        return RF_ERR_INTERNAL;
    }
}

void need(const void* p, const char* what) {
    resflow::require(p != nullptr, ErrorCode::usage, std::string(what) + " must not be NULL");
}

resflow::LogDetMode to_mode(rf_logdet_mode m) {
    resflow::require(m == RF_EXACT || m == RF_ESTIMATOR, ErrorCode::usage, "unknown log-det mode");
    return m == RF_EXACT ? resflow::LogDetMode::exact : resflow::LogDetMode::estimator;
}

// Value of `key`: explicitly set in cfg, else recorded in the checkpoint,
// else cfg's default.
std::string effective(const rf_config* cfg, const rf_model* model, const std::string& key) {
    if (cfg && cfg->explicit_keys.count(key)) return cfg->config.get(key);
    if (model) {
        const auto it = model->checkpoint.config.find(key);
        if (it != model->checkpoint.config.end()) return it->second;
    }
    return cfg ? cfg->config.get(key) : resflow::Config().get(key);
}

long long effective_int(const rf_config* cfg, const rf_model* model, const std::string& key) {
    resflow::Config tmp;
    tmp.set(key, effective(cfg, model, key));
    return tmp.get_int(key);
}

rf_model* wrap(resflow::Checkpoint ck) {
    auto* m = new rf_model{std::move(ck), {}};
    m->eval = m->checkpoint.eval_model();
    return m;
}

}  // namespace

extern "C" {

const char* rf_version(void) { return "0.1.0"; }

const char* rf_last_error(void) { return g_last_error.c_str(); }

const char* rf_status_name(rf_status status) {
    switch (status) {
        case RF_OK: return "ok";
        case RF_ERR_USAGE: return "usage";
        case RF_ERR_CONFIG: return "config";
        case RF_ERR_IO: return "io";
        case RF_ERR_STRUCTURAL: return "structural";
        case RF_ERR_REFUSAL: return "refusal";
        case RF_ERR_CONTRACTIVITY: return "contractivity";
        case RF_ERR_INCONSISTENCY: return "inconsistency";
        case RF_ERR_NON_CONVERGENCE: return "non-convergence";
        case RF_ERR_UNINITIALIZED: return "uninitialized";
        case RF_ERR_NUMERIC: return "numeric";
        case RF_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

rf_status rf_config_create(rf_config** out) {
    return guarded([&] {
        need(out, "out");
        *out = new rf_config();
    });
}

void rf_config_destroy(rf_config* cfg) { delete cfg; }

rf_status rf_config_load_file(rf_config* cfg, const char* path) {
    return guarded([&] {
        need(cfg, "cfg");
        need(path, "path");
        resflow::Config loaded = cfg->config;
        const auto keys = loaded.load_file(path);
        cfg->config = std::move(loaded);
        cfg->explicit_keys.insert(keys.begin(), keys.end());
    });
}

rf_status rf_config_set(rf_config* cfg, const char* key, const char* value) {
    return guarded([&] {
        need(cfg, "cfg");
        need(key, "key");
        need(value, "value");
        cfg->config.set(key, value);
        cfg->explicit_keys.insert(resflow::Config::canonical_key(key));
    });
}

rf_status rf_config_get(const rf_config* cfg, const char* key, char* buf, size_t buf_len, size_t* needed) {
    return guarded([&] {
        need(cfg, "cfg");
        need(key, "key");
        const auto& v = cfg->config.get(key);
        if (needed) *needed = v.size() + 1;
        if (buf && buf_len > v.size()) std::memcpy(buf, v.c_str(), v.size() + 1);
    });
}

rf_status rf_model_create_empty(int dim, rf_model** out) {
    return guarded([&] {
        need(out, "out");
        resflow::require(dim >= 1, ErrorCode::usage, "dimension must be positive");
        resflow::Checkpoint ck;
        ck.model.dim = dim;
        *out = wrap(std::move(ck));
    });
}

rf_status rf_model_load(const char* path, rf_model** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = wrap(resflow::load_checkpoint(path));
    });
}

rf_status rf_model_save(const rf_model* model, const char* path) {
    return guarded([&] {
        need(model, "model");
        need(path, "path");
        resflow::save_checkpoint(model->checkpoint, path);
    });
}

void rf_model_destroy(rf_model* model) { delete model; }

int rf_model_dim(const rf_model* model) { return model ? model->checkpoint.model.dim : 0; }

size_t rf_model_num_blocks(const rf_model* model) { return model ? model->checkpoint.model.num_blocks() : 0; }

long long rf_model_step(const rf_model* model) { return model ? model->checkpoint.step : 0; }

rf_status rf_model_log_density(const rf_model* model, const double* x, size_t n, rf_logdet_mode mode, uint64_t seed,
                               int threads, double* out_logp) {
    return guarded([&] {
        need(model, "model");
        need(out_logp, "out_logp");
        if (n > 0) need(x, "x");
        const int d = model->eval.dim;
        const resflow::Mat pts =
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                x, static_cast<Eigen::Index>(n), d)
                .transpose();
        resflow::DensityOptions opts;
        opts.mode = to_mode(mode);
        opts.seed = seed;
        opts.threads = threads;
        const auto dens = resflow::log_density(model->eval, pts, opts);
        for (size_t i = 0; i < n; ++i) out_logp[i] = dens.logp(static_cast<Eigen::Index>(i));
    });
}

rf_status rf_train(const rf_config* cfg, const char* out_dir, rf_step_callback callback, void* user,
                   rf_model** out_model) {
    return guarded([&] {
        need(cfg, "cfg");
        const auto tc = resflow::train_config_from(cfg->config);
        std::function<void(const resflow::Metrics&)> hook;
        if (callback) hook = [&](const resflow::Metrics& m) { callback(resflow::to_json_line(m).c_str(), user); };
        const std::string dir = out_dir ? out_dir : "";
        const auto summary = resflow::run_training(tc, dir, &cfg->config, hook);
        if (out_model) *out_model = wrap(summary.final_state);
    });
}

rf_status rf_eval(const rf_model* model, const rf_config* cfg, rf_logdet_mode mode, const char* json_path,
                  rf_eval_result* out) {
    return guarded([&] {
        need(model, "model");
        need(cfg, "cfg");
        const auto dataset = resflow::parse_dataset(effective(cfg, model, "dataset"));
        const auto seed = static_cast<std::uint64_t>(effective_int(cfg, model, "seed"));
        const int n_eval = static_cast<int>(cfg->config.get_int("n_eval"));
        const auto m = to_mode(mode) == resflow::LogDetMode::exact ? resflow::EvalMode::exact
                                                                   : resflow::EvalMode::estimator;
        const auto r = resflow::evaluate(model->eval, dataset, n_eval, m, resflow::eval_stream_seed(seed),
                                         static_cast<int>(cfg->config.get_int("threads")),
                                         static_cast<int>(cfg->config.get_int("eval.n_exact")),
                                         static_cast<int>(cfg->config.get_int("eval.tail_samples")));
        if (json_path) {
            resflow::EvalRecord rec{resflow::to_string(m), resflow::to_string(dataset), model->checkpoint.step,
                                    n_eval, r};
            resflow::write_text_file(json_path, resflow::eval_json(rec) + "\n");
        }
        if (out) *out = rf_eval_result{r.nll_nats, r.nll_bits(), r.se_nats, r.mean_terms, n_eval};
    });
}

rf_status rf_sample(const rf_model* model, size_t n, uint64_t seed, int check_inverse, double* out,
                    const char* csv_path, double* max_inverse_error) {
    return guarded([&] {
        need(model, "model");
        const auto s = resflow::draw_samples(model->eval, static_cast<int>(n), seed, check_inverse != 0);
        if (out) {
            for (Eigen::Index c = 0; c < s.x.cols(); ++c)
                for (Eigen::Index i = 0; i < s.x.rows(); ++i) out[c * s.x.rows() + i] = s.x(i, c);
        }
        if (csv_path) resflow::write_text_file(csv_path, resflow::samples_csv(s.x));
        if (max_inverse_error) *max_inverse_error = s.max_inverse_error;
    });
}

rf_status rf_grid(const rf_model* model, const rf_grid_spec* spec, const char* csv_path, const char* pgm_path,
                  double* integral) {
    return guarded([&] {
        need(model, "model");
        need(spec, "spec");
        resflow::GridOptions opts;
        opts.bounds = {spec->x_min, spec->x_max, spec->y_min, spec->y_max};
        opts.nx = spec->nx;
        opts.ny = spec->ny;
        opts.mode = to_mode(spec->mode);
        opts.seed = spec->seed;
        opts.threads = spec->threads;
        const auto grid = resflow::compute_grid(model->eval, opts);
        if (csv_path) resflow::write_text_file(csv_path, resflow::grid_csv(grid));
        if (pgm_path) resflow::write_text_file(pgm_path, resflow::grid_pgm(grid));
        if (integral) *integral = grid.integral();
    });
}

rf_status rf_diagnose(const rf_model* model, const rf_config* cfg, const char* csv_path) {
    return guarded([&] {
        need(cfg, "cfg");
        need(csv_path, "csv_path");
        const auto& c = cfg->config;
        resflow::Vec x(2);
        x << c.get_double("diagnose.x"), c.get_double("diagnose.y");
        resflow::BlockParams block;
        if (model) {
            const auto index = c.get_int("diagnose.block");
            long long seen = 0;
            bool found = false;
            for (const auto& layer : model->eval.layers) {
                if (const auto* b = std::get_if<resflow::ResidualBlock>(&layer)) {
                    if (seen++ == index) {
                        block = b->params;
                        found = true;
                        break;
                    }
                }
            }
            resflow::require(found, ErrorCode::usage, "model has no residual block " + std::to_string(index));
            resflow::require(block.dim() == 2, ErrorCode::refusal, "diagnose expects a 2D block");
        } else {
            block = resflow::diagnostic_block(2, static_cast<int>(c.get_int("diagnose.hidden_width")), x,
                                              c.get_u64("seed"));
        }
        resflow::DiagnoseOptions opts;
        opts.samples = static_cast<int>(c.get_int("diagnose.samples"));
        opts.q = c.get_double("estimator.q");
        opts.n_exact = static_cast<int>(c.get_int("estimator.n_exact"));
        opts.hutchinson = resflow::parse_hutchinson(c.get("estimator.hutchinson"));
        opts.seed = c.get_u64("seed");
        opts.threads = static_cast<int>(c.get_int("threads"));
        const auto rows = resflow::diagnose(block, x, opts);
        resflow::write_text_file(csv_path, resflow::diagnose_csv(rows));
    });
}

}  // extern "C"
