#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "common.hpp"

namespace resflow {

struct Bounds2D {
    double x_min = -4.0;
    double x_max = 4.0;
    double y_min = -4.0;
    double y_max = 4.0;

    bool contains(double x, double y) const { return x >= x_min && x <= x_max && y >= y_min && y <= y_max; }
};

enum class DatasetKind { checkerboard, eight_gaussians, rings };

DatasetKind parse_dataset(std::string_view name);
std::string to_string(DatasetKind k);

// Seeded generator of 2D points.
//
// checkerboard: x ~ U(-4, 4); with column c = floor(x), the row r is drawn
//   uniformly from the four rows in {-4..3} with (c + r) even, and
//   y = r + U(0, 1). The density is 1/32 on the 32 unit squares [c, c+1) x
//   [r, r+1) of even parity and zero elsewhere (an 8x8 board, 4x4 per
//   quadrant). Entropy: ln 32 nats = 5 bits.
// eight_gaussians: one of 8 centers 2*sqrt(2)*(cos, sin)(k*pi/4) plus
//   N(0, 0.5^2 I), rejected outside [-6, 6]^2.
// rings: one of radii {1, 2, 3, 4} uniformly, angle U(0, 2pi), radius jitter
//   N(0, 0.08^2), rejected outside [-5, 5]^2.
class Dataset2D {
public:
    Dataset2D(DatasetKind kind, std::uint64_t seed);

    DatasetKind kind() const { return kind_; }
    std::string name() const { return to_string(kind_); }
    const Bounds2D& support_bounds() const { return bounds_; }

    Vec next();
    Mat batch(int n);  // 2 x n

private:
    DatasetKind kind_;
    Bounds2D bounds_;
    Rng rng_;
};

Dataset2D make_dataset(std::string_view name, std::uint64_t seed);

// Checkerboard cell (floor(x), floor(y)) is occupied iff the sum is even.
bool checkerboard_cell_occupied(int col, int row);

}  // namespace resflow
