#pragma once
#include <array>
#include <cmath>
#include <vector>

#include "x3d/errors.hpp"
#include "x3d/vec.hpp"

namespace x3d {

inline double softplus(double x) {
    // Overflow-safe; exact for large |x|.
    if (x > 30) return x;
    if (x < -30) return std::exp(x);
    return std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
    if (x >= 0) { const double e = std::exp(-x); return 1.0 / (1.0 + e); }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Dense voxel grid of raw (pre-activation) density and color over the cube
// [-half_extent, half_extent]^3 with res vertices per axis. Activations are
// applied per vertex and then interpolated, so a query is linear in the
// activated vertex values and the chain rule stops at one sigmoid/softplus
// derivative per tap.
struct VoxelRadianceField {
    int res = 32;
    double half_extent = 1.0;
    std::vector<double> raw_density; // res^3
    std::vector<double> raw_color;   // res^3 * 3

    std::size_t vertex_count() const { return std::size_t(res) * res * res; }
    std::size_t vidx(int i, int j, int k) const {
        return (std::size_t(k) * res + j) * res + i;
    }
    Vec3 vertex_pos(int i, int j, int k) const {
        const double h = 2.0 * half_extent / (res - 1);
        return {-half_extent + i * h, -half_extent + j * h, -half_extent + k * h};
    }

    double density_at_vertex(std::size_t v) const { return softplus(raw_density[v]); }
    Vec3 color_at_vertex(std::size_t v) const {
        return {sigmoid(raw_color[v * 3 + 0]), sigmoid(raw_color[v * 3 + 1]), sigmoid(raw_color[v * 3 + 2])};
    }
};

// Raw density starts low so space begins nearly empty; an optional Gaussian
// blob at the origin gives the optimization a seed surface. Colors start at
// raw 0, i.e. mid gray.
inline VoxelRadianceField make_field(int res, double half_extent, double blob_amplitude = 0.0,
                                     double blob_stddev = 0.35) {
    if (res < 2) throw DomainError("make_field: res must be >= 2");
    VoxelRadianceField f;
    f.res = res;
    f.half_extent = half_extent;
    f.raw_density.assign(f.vertex_count(), -3.0);
    f.raw_color.assign(f.vertex_count() * 3, 0.0);
    if (blob_amplitude != 0.0) {
        const double s2 = 2.0 * blob_stddev * blob_stddev * half_extent * half_extent;
        for (int k = 0; k < res; ++k)
            for (int j = 0; j < res; ++j)
                for (int i = 0; i < res; ++i) {
                    const Vec3 p = f.vertex_pos(i, j, k);
                    f.raw_density[f.vidx(i, j, k)] += blob_amplitude * std::exp(-norm2(p) / s2);
                }
    }
    return f;
}

struct FieldGrads {
    std::vector<double> raw_density;
    std::vector<double> raw_color;

    explicit FieldGrads(const VoxelRadianceField& f)
        : raw_density(f.vertex_count(), 0.0), raw_color(f.vertex_count() * 3, 0.0) {}
    void zero() {
        std::fill(raw_density.begin(), raw_density.end(), 0.0);
        std::fill(raw_color.begin(), raw_color.end(), 0.0);
    }
};

struct FieldTaps {
    std::array<std::size_t, 8> vidx;
    std::array<double, 8> weight;
    bool inside = false;
};

inline FieldTaps field_taps(const VoxelRadianceField& f, const Vec3& p) {
    FieldTaps taps{};
    const double he = f.half_extent;
    if (p.x < -he || p.x > he || p.y < -he || p.y > he || p.z < -he || p.z > he) return taps;
    const double h = 2.0 * he / (f.res - 1);
    double fu[3];
    int i0[3];
    for (int a = 0; a < 3; ++a) {
        const double u = (p[a] + he) / h;
        int c = int(std::floor(u));
        if (c > f.res - 2) c = f.res - 2;
        if (c < 0) c = 0;
        i0[a] = c;
        fu[a] = u - c;
    }
    int n = 0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                taps.vidx[n] = f.vidx(i0[0] + dx, i0[1] + dy, i0[2] + dz);
                taps.weight[n] = (dx ? fu[0] : 1 - fu[0]) * (dy ? fu[1] : 1 - fu[1]) * (dz ? fu[2] : 1 - fu[2]);
                ++n;
            }
    taps.inside = true;
    return taps;
}

struct FieldSample {
    double density = 0;
    Vec3 color{0, 0, 0};
};

// Outside the grid the field is empty (zero density); the color value there
// is never used because the sample weight is zero.
inline FieldSample query_field(const VoxelRadianceField& f, const Vec3& p) {
    FieldSample s;
    const FieldTaps taps = field_taps(f, p);
    if (!taps.inside) return s;
    for (int n = 0; n < 8; ++n) {
        const double w = taps.weight[n];
        if (w == 0) continue;
        s.density += w * f.density_at_vertex(taps.vidx[n]);
        s.color += f.color_at_vertex(taps.vidx[n]) * w;
    }
    return s;
}

// Accumulates d(loss)/d(raw vertex values) for one query point given
// upstream gradients w.r.t. the interpolated density and color.
inline void query_field_backward(const VoxelRadianceField& f, const Vec3& p, double g_density,
                                 const Vec3& g_color, FieldGrads& grads) {
    const FieldTaps taps = field_taps(f, p);
    if (!taps.inside) return;
    for (int n = 0; n < 8; ++n) {
        const double w = taps.weight[n];
        if (w == 0) continue;
        const std::size_t v = taps.vidx[n];
        if (g_density != 0) grads.raw_density[v] += w * g_density * sigmoid(f.raw_density[v]);
        for (int c = 0; c < 3; ++c) {
            const double gc = g_color[c];
            if (gc == 0) continue;
            const double s = sigmoid(f.raw_color[v * 3 + c]);
            grads.raw_color[v * 3 + c] += w * gc * s * (1 - s);
        }
    }
}

} // namespace x3d
