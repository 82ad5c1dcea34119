#pragma once
#include <cmath>
#include <utility>

#include "x3d/errors.hpp"

namespace x3d {

// Geometric noise schedule sigma(t) = sigma_min * (sigma_max / sigma_min)^t
// over t in [0, 1], discretized on a uniform grid of grid_n steps for
// consistency-distillation step pairs.
class NoiseSchedule {
public:
    NoiseSchedule() : NoiseSchedule(0.05, 5.0, 50) {}

    NoiseSchedule(double sigma_min, double sigma_max, int grid_n)
        : sigma_min_(sigma_min), sigma_max_(sigma_max), grid_n_(grid_n) {
        if (!(sigma_min > 0.0) || !(sigma_min < sigma_max))
            throw DomainError("noise schedule requires 0 < sigma_min < sigma_max");
        if (grid_n < 1) throw DomainError("noise schedule grid size must be >= 1");
    }

    double sigma_min() const { return sigma_min_; }
    double sigma_max() const { return sigma_max_; }
    int grid_n() const { return grid_n_; }

    double sigma(double t) const {
        if (!(t >= 0.0 && t <= 1.0))
            throw DomainError("noise schedule evaluated outside t in [0, 1]");
        return sigma_min_ * std::pow(sigma_max_ / sigma_min_, t);
    }

    // Grid node i / grid_n for i in [0, grid_n].
    double grid_t(int i) const {
        if (i < 0 || i > grid_n_) throw DomainError("schedule grid index out of range");
        return double(i) / double(grid_n_);
    }

    // Adjacent step pair (t1, t2) with t1 = i / grid_n and t2 one node lower.
    // i ranges over [1, grid_n] so t2 never leaves the domain.
    std::pair<double, double> adjacent_pair(int i) const {
        if (i < 1 || i > grid_n_) throw DomainError("adjacent step pair index out of range");
        return {grid_t(i), grid_t(i - 1)};
    }

private:
    double sigma_min_;
    double sigma_max_;
    int grid_n_;
};

} // namespace x3d
