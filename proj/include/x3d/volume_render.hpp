#pragma once
#include <algorithm>
#include <cmath>
#include <vector>

#include "x3d/camera.hpp"
#include "x3d/field.hpp"
#include "x3d/image.hpp"
#include "x3d/rng.hpp"

namespace x3d {

// Conservative segment of the ray that can intersect the field's bounding
// cube: center distance minus/plus the cube's circumradius.
inline void ray_near_far(const Vec3& origin, double half_extent, double& near, double& far) {
    const double d = norm(origin);
    const double r = std::sqrt(3.0) * half_extent;
    near = std::max(d - r, 0.05);
    far = d + r;
}

struct RenderOutput {
    Image rgb;                 // height x width x 3
    std::vector<double> mask;  // accumulated weight per ray
    std::vector<double> depth; // weight-averaged sample depth
    std::vector<double> zvar;  // weight-averaged depth variance
};

// Everything the backward pass needs, flattened as ray-major [ray * n + i].
struct RenderCache {
    int n_samples = 0;
    Vec3 origin;
    std::vector<Vec3> directions;
    std::vector<double> t;
    std::vector<double> delta;
    std::vector<double> sigma;
    std::vector<double> alpha;
    std::vector<Vec3> color;
    Vec3 background;
};

// Emission-absorption compositing over stratified samples. Pass rng = nullptr
// for deterministic midpoint sampling (evaluation renders must not consume
// random state).
inline RenderOutput render_volume(const VoxelRadianceField& field, const RayBatch& rays, int n_samples,
                                  Rng* rng, const Vec3& background = {1, 1, 1},
                                  RenderCache* cache = nullptr) {
    if (n_samples < 1) throw DomainError("render_volume: n_samples must be >= 1");
    const std::size_t n_rays = rays.directions.size();
    RenderOutput out;
    out.rgb = Image(rays.width, rays.height, 3);
    out.mask.assign(n_rays, 0.0);
    out.depth.assign(n_rays, 0.0);
    out.zvar.assign(n_rays, 0.0);
    if (cache) {
        cache->n_samples = n_samples;
        cache->origin = rays.origin;
        cache->directions = rays.directions;
        cache->t.resize(n_rays * n_samples);
        cache->delta.resize(n_rays * n_samples);
        cache->sigma.resize(n_rays * n_samples);
        cache->alpha.resize(n_rays * n_samples);
        cache->color.resize(n_rays * n_samples);
        cache->background = background;
    }
    double near, far;
    ray_near_far(rays.origin, field.half_extent, near, far);
    const double step = (far - near) / n_samples;
    std::vector<double> ts(n_samples), ws(n_samples);
    for (std::size_t r = 0; r < n_rays; ++r) {
        const Vec3 dir = rays.directions[r];
        for (int i = 0; i < n_samples; ++i) {
            const double jitter = rng ? rng->uniform01() : 0.5;
            ts[i] = near + (i + jitter) * step;
        }
        double transmittance = 1.0;
        Vec3 rgb{0, 0, 0};
        double wsum = 0.0, dsum = 0.0;
        for (int i = 0; i < n_samples; ++i) {
            const double delta = (i + 1 < n_samples ? ts[i + 1] - ts[i] : far - ts[i]);
            const FieldSample s = query_field(field, rays.origin + dir * ts[i]);
            const double alpha = 1.0 - std::exp(-s.density * delta);
            const double w = transmittance * alpha;
            rgb += s.color * w;
            wsum += w;
            dsum += w * ts[i];
            ws[i] = w;
            transmittance *= 1.0 - alpha;
            if (cache) {
                const std::size_t idx = r * n_samples + i;
                cache->t[idx] = ts[i];
                cache->delta[idx] = delta;
                cache->sigma[idx] = s.density;
                cache->alpha[idx] = alpha;
                cache->color[idx] = s.color;
            }
        }
        const Vec3 final_rgb = rgb + background * (1.0 - wsum);
        const int x = int(r % rays.width), y = int(r / rays.width);
        for (int c = 0; c < 3; ++c) out.rgb.at(x, y, c) = final_rgb[c];
        out.mask[r] = wsum;
        const double wsafe = std::max(wsum, 1e-8);
        const double dz = dsum / wsafe;
        out.depth[r] = dz;
        double var = 0.0;
        for (int i = 0; i < n_samples; ++i) var += ws[i] * (ts[i] - dz) * (ts[i] - dz);
        out.zvar[r] = var / wsafe;
    }
    return out;
}

// Depth-variance penalty: rays that already carry opacity are pushed toward
// a single sharp surface crossing. The opacity gate is a hard indicator and
// contributes no gradient of its own.
inline double nz_loss(const RenderOutput& out, std::vector<double>* g_zvar = nullptr) {
    double loss = 0.0;
    if (g_zvar) g_zvar->assign(out.mask.size(), 0.0);
    for (std::size_t r = 0; r < out.mask.size(); ++r) {
        if (out.mask[r] > 0.5) {
            loss += out.zvar[r];
            if (g_zvar) (*g_zvar)[r] = 1.0;
        }
    }
    return loss;
}

// Upstream gradients per ray; any vector may be empty meaning all-zero.
struct RenderGrads {
    std::vector<double> rgb;  // n_rays * 3, interleaved
    std::vector<double> mask; // n_rays
    std::vector<double> zvar; // n_rays
};

// Reverse-mode pass. The weight w_i = T_i a_i couples every later sample
// through the transmittance product; a suffix accumulator S = sum_{k>i} w_k g_k
// turns that into one backward sweep:
//   dL/da_i = T_i gw_i - S_i / (1 - a_i),   1 - a_i = exp(-sigma_i delta_i) > 0.
// Sample positions depend only on camera and jitter, so depth gradients stop
// at the weights.
inline void render_volume_backward(const VoxelRadianceField& field, const RenderCache& cache,
                                   const RenderOutput& out, const RenderGrads& grads,
                                   FieldGrads& field_grads) {
    const std::size_t n_rays = cache.directions.size();
    const int n = cache.n_samples;
    std::vector<double> gw(n);
    for (std::size_t r = 0; r < n_rays; ++r) {
        const double g_mask = grads.mask.empty() ? 0.0 : grads.mask[r];
        const double g_zvar = grads.zvar.empty() ? 0.0 : grads.zvar[r];
        Vec3 g_rgb{0, 0, 0};
        if (!grads.rgb.empty()) g_rgb = {grads.rgb[r * 3], grads.rgb[r * 3 + 1], grads.rgb[r * 3 + 2]};
        if (g_mask == 0 && g_zvar == 0 && g_rgb.x == 0 && g_rgb.y == 0 && g_rgb.z == 0) continue;

        const double wsum = out.mask[r];
        const double wsafe = std::max(wsum, 1e-8);
        const double dz = out.depth[r];
        const double var = out.zvar[r];
        const double g_bg = dot(g_rgb, cache.background);
        bool any = false;
        for (int i = 0; i < n; ++i) {
            const std::size_t idx = r * n + i;
            const double ti = cache.t[idx];
            double g = dot(g_rgb, cache.color[idx]) - g_bg + g_mask;
            // d(zvar)/dw_i: the cross term through dz cancels because
            // sum_k w_k (t_k - dz) = 0.
            if (g_zvar != 0 && wsum > 1e-8) g += g_zvar * ((ti - dz) * (ti - dz) - var) / wsafe;
            gw[i] = g;
            any = any || g != 0;
        }
        if (!any) continue;

        double suffix = 0.0; // sum_{k>i} w_k gw_k, built back to front
        // Recompute T_i front-to-back once, then sweep back.
        std::vector<double> T(n);
        double tr = 1.0;
        for (int i = 0; i < n; ++i) {
            T[i] = tr;
            tr *= 1.0 - cache.alpha[r * std::size_t(n) + i];
        }
        for (int i = n - 1; i >= 0; --i) {
            const std::size_t idx = r * n + i;
            const double alpha = cache.alpha[idx];
            const double one_minus = std::exp(-cache.sigma[idx] * cache.delta[idx]);
            const double w = T[i] * alpha;
            const double g_alpha = T[i] * gw[i] - suffix / one_minus;
            suffix += w * gw[i];
            const double g_sigma = g_alpha * cache.delta[idx] * one_minus;
            const Vec3 g_color = g_rgb * w;
            if (g_sigma != 0 || g_color.x != 0 || g_color.y != 0 || g_color.z != 0)
                query_field_backward(field, cache.origin + cache.directions[r] * cache.t[idx], g_sigma,
                                     g_color, field_grads);
        }
    }
}

} // namespace x3d
