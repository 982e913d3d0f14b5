// resflow command-line interface. Talks to the library only through the C API.
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "resflow/resflow.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct Failure {
    int exit_code;
    std::string message;
};

int exit_code_for(rf_status s) {
    if (s == RF_OK) return kExitOk;
    return (s == RF_ERR_USAGE || s == RF_ERR_CONFIG) ? kExitUsage : kExitRuntime;
}

void check(rf_status s, const std::string& context) {
    if (s != RF_OK) throw Failure{exit_code_for(s), context + ": " + rf_last_error() + " [" + rf_status_name(s) + "]"};
}

void usage_error(const std::string& message) { throw Failure{kExitUsage, message}; }

struct ConfigHandle {
    rf_config* p = nullptr;
    ConfigHandle() { check(rf_config_create(&p), "config"); }
    ~ConfigHandle() { rf_config_destroy(p); }
    ConfigHandle(const ConfigHandle&) = delete;
    ConfigHandle& operator=(const ConfigHandle&) = delete;

    std::string get(const char* key) const {
        size_t needed = 0;
        check(rf_config_get(p, key, nullptr, 0, &needed), "config");
        std::string out(needed, '\0');
        check(rf_config_get(p, key, out.data(), out.size(), &needed), "config");
        out.resize(needed - 1);
        return out;
    }
};

struct ModelHandle {
    rf_model* p = nullptr;
    ModelHandle() = default;
    ~ModelHandle() { rf_model_destroy(p); }
    ModelHandle(const ModelHandle&) = delete;
    ModelHandle& operator=(const ModelHandle&) = delete;
};

// Unrecognized arguments are configuration overrides: --key=value or
// --key value.
void apply_overrides(const std::vector<std::string>& extras, ConfigHandle& cfg) {
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const auto& a = extras[i];
        if (a.rfind("--", 0) != 0 || a.size() < 3) usage_error("unexpected argument '" + a + "'");
        std::string key = a.substr(2), value;
        if (const auto eq = key.find('='); eq != std::string::npos) {
            value = key.substr(eq + 1);
            key.resize(eq);
        } else {
            if (i + 1 >= extras.size() || extras[i + 1].rfind("--", 0) == 0)
                usage_error("option '" + a + "' needs a value");
            value = extras[++i];
        }
        check(rf_config_set(cfg.p, key.c_str(), value.c_str()), "option --" + key);
    }
}

std::string join(const std::string& dir, const std::string& name) { return (std::filesystem::path(dir) / name).string(); }

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Failure{kExitRuntime, "cannot create output directory '" + dir + "': " + ec.message()};
}

rf_logdet_mode parse_mode(const std::string& m) {
    if (m == "exact") return RF_EXACT;
    if (m == "estimator") return RF_ESTIMATOR;
    usage_error("mode must be 'exact' or 'estimator', got '" + m + "'");
    return RF_EXACT;
}

std::vector<double> parse_list(const std::string& s, const char* what) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        char* end = nullptr;
        const double v = std::strtod(item.c_str(), &end);
        if (item.empty() || *end != '\0') usage_error(std::string("bad ") + what + " '" + s + "'");
        out.push_back(v);
    }
    return out;
}

void on_step(const char* json, void*) {
    if (std::strstr(json, "\"eval_nll_bits\"")) std::printf("%s\n", json);
    std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"resflow: residual flows with unbiased log-density estimation on 2D data"};
    app.require_subcommand(1);
    app.allow_extras();

    std::string config_path, out_dir_flag;
    std::optional<long long> seed_flag, threads_flag;
    app.add_option("--config", config_path, "key = value configuration file");
    app.add_option("--seed", seed_flag, "random seed");
    app.add_option("--out-dir", out_dir_flag, "output directory (fallback: RESFLOW_OUT_DIR, then '.')");
    app.add_option("--threads", threads_flag, "worker threads");

    auto* train = app.add_subcommand("train", "train a flow; writes metrics.jsonl and checkpoints");
    auto* eval = app.add_subcommand("eval", "evaluate NLL of a checkpoint");
    auto* sample = app.add_subcommand("sample", "draw samples to CSV");
    auto* grid = app.add_subcommand("grid", "log-density grid as CSV and PGM");
    auto* diagnose = app.add_subcommand("diagnose", "log-det estimator bias sweep over Lipschitz coefficients");

    std::string checkpoint, mode = "exact", bounds = "-4,4,-4,4", resolution = "200";
    bool empty_model = false, check_inverse = false;
    long long n_samples = 1000;
    for (auto* sub : {train, eval, sample, grid, diagnose}) {
        sub->allow_extras();
        sub->fallthrough();
    }
    for (auto* sub : {eval, sample, grid, diagnose}) sub->add_option("--checkpoint", checkpoint, "checkpoint file");
    for (auto* sub : {eval, sample, grid}) {
        sub->add_flag("--empty-model", empty_model, "use the layer-free 2D model (standard normal)");
    }
    eval->add_option("--mode", mode, "exact | estimator")->capture_default_str();
    grid->add_option("--mode", mode, "exact | estimator")->capture_default_str();
    grid->add_option("--bounds", bounds, "x_min,x_max,y_min,y_max")->capture_default_str();
    grid->add_option("--resolution", resolution, "n or nx,ny")->capture_default_str();
    sample->add_option("-n,--n", n_samples, "number of samples")->capture_default_str();
    sample->add_flag("--check-inverse", check_inverse, "report max ||f(x) - z|| over the samples");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        ConfigHandle cfg;
        if (!config_path.empty()) check(rf_config_load_file(cfg.p, config_path.c_str()), "config");
        auto* active = app.get_subcommands().front();
        apply_overrides(active->remaining(), cfg);
        apply_overrides(app.remaining(), cfg);
        if (seed_flag) check(rf_config_set(cfg.p, "seed", std::to_string(*seed_flag).c_str()), "--seed");
        if (threads_flag) check(rf_config_set(cfg.p, "threads", std::to_string(*threads_flag).c_str()), "--threads");

        std::string out_dir = out_dir_flag;
        if (out_dir.empty()) out_dir = cfg.get("out_dir");
        if (out_dir.empty()) {
            const char* env = std::getenv("RESFLOW_OUT_DIR");
            out_dir = env && *env ? env : ".";
        }
        ensure_dir(out_dir);

        const auto seed = std::strtoull(cfg.get("seed").c_str(), nullptr, 10);
        const int threads = std::atoi(cfg.get("threads").c_str());

        auto load_model = [&](ModelHandle& m, bool required) {
            if (empty_model) {
                check(rf_model_create_empty(2, &m.p), "model");
            } else if (!checkpoint.empty()) {
                check(rf_model_load(checkpoint.c_str(), &m.p), "checkpoint");
            } else if (required) {
                usage_error("--checkpoint is required (or --empty-model)");
            }
        };

        if (active == train) {
            check(rf_train(cfg.p, out_dir.c_str(), on_step, nullptr, nullptr), "train");
            std::printf("run written to %s\n", out_dir.c_str());
        } else if (active == eval) {
            ModelHandle m;
            load_model(m, true);
            rf_eval_result r{};
            const auto path = join(out_dir, "eval_" + mode + ".json");
            check(rf_eval(m.p, cfg.p, parse_mode(mode), path.c_str(), &r), "eval");
            std::printf("{\"mode\":\"%s\",\"nll_nats\":%.10g,\"nll_bits\":%.10g,\"se_nats\":%.6g,\"n_eval\":%d}\n",
                        mode.c_str(), r.nll_nats, r.nll_bits, r.se_nats, r.n_eval);
        } else if (active == sample) {
            ModelHandle m;
            load_model(m, true);
            if (n_samples < 0) usage_error("-n must be non-negative");
            const auto path = join(out_dir, "samples.csv");
            double err = 0.0;
            check(rf_sample(m.p, static_cast<size_t>(n_samples), seed, check_inverse ? 1 : 0, nullptr, path.c_str(),
                            &err),
                  "sample");
            std::printf("wrote %lld samples to %s\n", n_samples, path.c_str());
            if (check_inverse) std::printf("max inverse error %.3e\n", err);
        } else if (active == grid) {
            ModelHandle m;
            load_model(m, true);
            const auto b = parse_list(bounds, "bounds");
            const auto r = parse_list(resolution, "resolution");
            if (b.size() != 4) usage_error("--bounds needs x_min,x_max,y_min,y_max");
            if (r.empty() || r.size() > 2) usage_error("--resolution needs n or nx,ny");
            rf_grid_spec spec{b[0], b[1], b[2], b[3], static_cast<int>(r[0]),
                              static_cast<int>(r.size() == 2 ? r[1] : r[0]), parse_mode(mode), seed, threads};
            double integral = 0.0;
            const auto csv = join(out_dir, "grid.csv"), pgm = join(out_dir, "grid.pgm");
            check(rf_grid(m.p, &spec, csv.c_str(), pgm.c_str(), &integral), "grid");
            std::printf("wrote %s and %s; integral of density over grid %.6f\n", csv.c_str(), pgm.c_str(), integral);
        } else if (active == diagnose) {
            ModelHandle m;
            load_model(m, false);
            const auto path = join(out_dir, "diagnose.csv");
            check(rf_diagnose(m.p, cfg.p, path.c_str()), "diagnose");
            std::printf("wrote %s\n", path.c_str());
        }
    } catch (const Failure& f) {
        std::fprintf(stderr, "resflow: %s\n", f.message.c_str());
        return f.exit_code;
    }
    return kExitOk;
}
