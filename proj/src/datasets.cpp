#include "datasets.hpp"

#include <cmath>
#include <numbers>

namespace resflow {

DatasetKind parse_dataset(std::string_view name) {
    if (name == "checkerboard") return DatasetKind::checkerboard;
    if (name == "eight_gaussians" || name == "8gaussians") return DatasetKind::eight_gaussians;
    if (name == "rings") return DatasetKind::rings;
    throw Error(ErrorCode::config, "unknown dataset '" + std::string(name) + "' (checkerboard|eight_gaussians|rings)");
}

std::string to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::checkerboard: return "checkerboard";
        case DatasetKind::eight_gaussians: return "eight_gaussians";
        case DatasetKind::rings: return "rings";
    }
    return "?";
}

bool checkerboard_cell_occupied(int col, int row) { return ((col + row) % 2 + 2) % 2 == 0; }

Dataset2D::Dataset2D(DatasetKind kind, std::uint64_t seed) : kind_(kind), rng_(stream_rng(seed, 0xda7a)) {
    switch (kind) {
        case DatasetKind::checkerboard: bounds_ = {-4, 4, -4, 4}; break;
        case DatasetKind::eight_gaussians: bounds_ = {-6, 6, -6, 6}; break;
        case DatasetKind::rings: bounds_ = {-5, 5, -5, 5}; break;
    }
}

Vec Dataset2D::next() {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal;
    Vec p(2);
    switch (kind_) {
        case DatasetKind::checkerboard: {
            const double x = -4.0 + 8.0 * unit(rng_);
            const int col = std::min(3, static_cast<int>(std::floor(x)));
            // rows with (col + row) even: parity offset then one of 4 pairs
            const int offset = ((col % 2) + 2) % 2;
            const int pick = std::uniform_int_distribution<int>(0, 3)(rng_);
            const int row = -4 + offset + 2 * pick;
            p << x, row + unit(rng_);
            return p;
        }
        case DatasetKind::eight_gaussians: {
            const double r = 2.0 * std::numbers::sqrt2;
            do {
                const int k = std::uniform_int_distribution<int>(0, 7)(rng_);
                const double a = k * std::numbers::pi / 4.0;
                p << r * std::cos(a) + 0.5 * normal(rng_), r * std::sin(a) + 0.5 * normal(rng_);
            } while (!bounds_.contains(p(0), p(1)));
            return p;
        }
        case DatasetKind::rings: {
            do {
                const int ring = std::uniform_int_distribution<int>(1, 4)(rng_);
                const double a = 2.0 * std::numbers::pi * unit(rng_);
                const double rad = ring + 0.08 * normal(rng_);
                p << rad * std::cos(a), rad * std::sin(a);
            } while (!bounds_.contains(p(0), p(1)));
            return p;
        }
    }
    return p;
}

Mat Dataset2D::batch(int n) {
    Mat out(2, n);
    for (int i = 0; i < n; ++i) out.col(i) = next();
    return out;
}

Dataset2D make_dataset(std::string_view name, std::uint64_t seed) { return Dataset2D(parse_dataset(name), seed); }

}  // namespace resflow
