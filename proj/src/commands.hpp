#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "datasets.hpp"
#include "flow.hpp"
#include "train.hpp"

namespace resflow {

// Rectangular grid of log-densities at cell midpoints:
//   x_i = x_min + (i + 1/2) (x_max - x_min) / nx, likewise y_j.
// values(j, i) holds the cell in row j (y index) and column i (x index).
struct DensityGrid {
    Bounds2D bounds;
    int nx = 0;
    int ny = 0;
    Mat values;  // ny x nx, nats
    LogDetMode mode = LogDetMode::exact;

    double x_at(int i) const { return bounds.x_min + (i + 0.5) * (bounds.x_max - bounds.x_min) / nx; }
    double y_at(int j) const { return bounds.y_min + (j + 0.5) * (bounds.y_max - bounds.y_min) / ny; }
    double cell_area() const { return (bounds.x_max - bounds.x_min) / nx * (bounds.y_max - bounds.y_min) / ny; }
    // Midpoint rule for the integral of exp(values).
    double integral() const;
};

struct GridOptions {
    Bounds2D bounds{-4, 4, -4, 4};
    int nx = 200;
    int ny = 200;
    LogDetMode mode = LogDetMode::exact;
    EstimatorConfig estimator;
    std::uint64_t seed = 0;
    int threads = 1;
};

DensityGrid compute_grid(const FlowModel& model, const GridOptions& opts);

// Header "x,y,logp", x varying fastest, then y.
std::string grid_csv(const DensityGrid& grid);
// Binary 8-bit graymap: exp(logp) scaled so the grid maximum is 255. The
// top image row is y_max.
std::string grid_pgm(const DensityGrid& grid);

struct SampleResult {
    Mat x;
    double max_inverse_error = 0.0;  // max ||f(x) - z||_2, when checked
};

SampleResult draw_samples(const FlowModel& model, int n, std::uint64_t seed, bool check_inverse);
std::string samples_csv(const Mat& x);

struct DiagnoseOptions {
    std::vector<double> coeffs{0.5, 0.7, 0.9, 0.98};
    std::vector<int> biased_terms{5, 10};
    int samples = 100000;
    double q = 0.5;
    int n_exact = 2;
    HutchinsonDist hutchinson = HutchinsonDist::gaussian;
    std::uint64_t seed = 0;
    int threads = 1;
};

struct DiagnoseRow {
    double coeff = 0.0;
    std::string estimator;  // "biased-<n>" or "unbiased"
    int samples = 0;
    double mc_mean = 0.0;
    double exact = 0.0;
    double bias = 0.0;           // mc_mean - exact
    double se = 0.0;
    double mean_terms = 0.0;
    double expected_bias = 0.0;  // with exact traces; 0 for unbiased
    double lipschitz_bound = 0.0;
};

// Block with orthogonal layers whose Jacobian at x is close to a negative
// multiple of the identity: weights are Q-aligned and the biases put every
// hidden unit in the high-slope range of its activation. Layer norms equal
// `coeff`. Used for estimator diagnostics, where random blocks have tiny
// Jacobians.
BlockParams diagnostic_block(int dim, int hidden_width, const Vec& x, std::uint64_t seed, double coeff = 0.98);

// Monte-Carlo sweep of the log-det estimators at x over copies of `base`
// rescaled so every layer norm equals each coefficient.
std::vector<DiagnoseRow> diagnose(const BlockParams& base, const Vec& x, const DiagnoseOptions& opts);
std::string diagnose_csv(const std::vector<DiagnoseRow>& rows);

struct EvalRecord {
    std::string mode;
    std::string dataset;
    long long step = 0;
    int n_eval = 0;
    EvalResult result;
};

std::string eval_json(const EvalRecord& r);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace resflow
