#pragma once
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "x3d/errors.hpp"
#include "x3d/image.hpp"
#include "x3d/rng.hpp"
#include "x3d/vec.hpp"

namespace x3d {

struct AugmentationSpec {
    int n = 4;                      // draws per augmentation kind
    std::vector<double> weights;    // W_i; empty means uniform 1/n
    double perspective_jitter = 0.15;
    double crop_min_area = 0.5;
    double crop_max_area = 0.9;
    std::array<double, 3> norm_mean = {0.5, 0.5, 0.5};
    std::array<double, 3> norm_std = {0.5, 0.5, 0.5};

    double weight(int i) const {
        if (weights.empty()) return 1.0 / double(n);
        return weights[std::size_t(i)];
    }
};

// Resampling or normalization step recorded so its pixel adjoint can be
// replayed. Warp maps output pixel centers through the homography h into
// source coordinates (continuous, origin at the image corner) and samples
// bilinearly with clamped borders; the taps are linear in the source pixels.
struct WarpPlan {
    enum class Kind { Warp, Normalize };
    Kind kind = Kind::Warp;
    Mat3 h = Mat3::identity();
    std::array<double, 3> mean = {0, 0, 0};
    std::array<double, 3> inv_std = {1, 1, 1};
    int width = 0;
    int height = 0;
    int channels = 0;
};

namespace detail {

// Solves for the homography taking (u_i, v_i) to (x_i, y_i), last entry 1.
inline Mat3 homography_from_corners(const std::array<double, 8>& uv,
                                    const std::array<double, 8>& xy) {
    double a[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        const double u = uv[2 * i], v = uv[2 * i + 1];
        const double x = xy[2 * i], y = xy[2 * i + 1];
        double* r0 = a[2 * i];
        double* r1 = a[2 * i + 1];
        r0[0] = u; r0[1] = v; r0[2] = 1; r0[6] = -u * x; r0[7] = -v * x; r0[8] = x;
        r1[3] = u; r1[4] = v; r1[5] = 1; r1[6] = -u * y; r1[7] = -v * y; r1[8] = y;
    }
    for (int col = 0; col < 8; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        if (std::abs(a[pivot][col]) < 1e-12)
            throw DomainError("degenerate corner configuration for perspective warp");
        if (pivot != col)
            for (int c = 0; c < 9; ++c) std::swap(a[pivot][c], a[col][c]);
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            const double f = a[r][col] / a[col][col];
            for (int c = col; c < 9; ++c) a[r][c] -= f * a[col][c];
        }
    }
    Mat3 m;
    for (int i = 0; i < 8; ++i) m.m[i / 3][i % 3] = a[i][8] / a[i][i];
    m.m[2][2] = 1;
    return m;
}

struct Tap {
    int x0, x1, y0, y1;
    double wx, wy;
};

inline Tap tap_at(double sx, double sy, int w, int h) {
    Tap t;
    const double fx = sx - 0.5;
    const double fy = sy - 0.5;
    t.x0 = std::clamp(int(std::floor(fx)), 0, w - 1);
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.wx = std::clamp(fx - t.x0, 0.0, 1.0);
    t.y0 = std::clamp(int(std::floor(fy)), 0, h - 1);
    t.y1 = std::min(t.y0 + 1, h - 1);
    t.wy = std::clamp(fy - t.y0, 0.0, 1.0);
    return t;
}

inline void project(const Mat3& h, double u, double v, double& x, double& y) {
    const double w = h.m[2][0] * u + h.m[2][1] * v + h.m[2][2];
    x = (h.m[0][0] * u + h.m[0][1] * v + h.m[0][2]) / w;
    y = (h.m[1][0] * u + h.m[1][1] * v + h.m[1][2]) / w;
}

} // namespace detail

// Random 4-corner perspective warp; each source corner moves by at most
// jitter * side along each axis. Consumes 8 uniform draws in corner order
// (x then y), so zero jitter is exactly the identity plan.
inline WarpPlan draw_perspective_warp(int width, int height, int channels, double jitter,
                                      Rng& rng) {
    const double W = width, H = height;
    const std::array<double, 8> out = {0, 0, W, 0, W, H, 0, H};
    std::array<double, 8> src;
    for (int i = 0; i < 4; ++i) {
        src[2 * i] = out[2 * i] + rng.uniform(-jitter, jitter) * W;
        src[2 * i + 1] = out[2 * i + 1] + rng.uniform(-jitter, jitter) * H;
    }
    WarpPlan p;
    p.kind = WarpPlan::Kind::Warp;
    p.h = jitter == 0.0 ? Mat3::identity() : detail::homography_from_corners(out, src);
    p.width = width;
    p.height = height;
    p.channels = channels;
    return p;
}

// Random crop of crop_min_area..crop_max_area of the image, resized back to
// full size, composed with a perspective warp. Crop sides clamp at 4 px.
// Consumes 3 uniforms (area, x offset, y offset) then the perspective draws.
inline WarpPlan draw_crop_warp(int width, int height, int channels, const AugmentationSpec& spec,
                               Rng& rng) {
    const double area = rng.uniform(spec.crop_min_area, spec.crop_max_area);
    const double scale = std::sqrt(area);
    const double cw = std::max(4.0, scale * width);
    const double ch = std::max(4.0, scale * height);
    const double cx = rng.uniform(0.0, std::max(0.0, width - cw));
    const double cy = rng.uniform(0.0, std::max(0.0, height - ch));
    WarpPlan p = draw_perspective_warp(width, height, channels, spec.perspective_jitter, rng);
    Mat3 crop = Mat3::identity();
    crop.m[0][0] = cw / width;
    crop.m[0][2] = cx;
    crop.m[1][1] = ch / height;
    crop.m[1][2] = cy;
    p.h = crop * p.h;
    return p;
}

inline WarpPlan make_normalize(int width, int height, int channels,
                               const AugmentationSpec& spec) {
    WarpPlan p;
    p.kind = WarpPlan::Kind::Normalize;
    p.mean = spec.norm_mean;
    for (int c = 0; c < 3; ++c) {
        if (spec.norm_std[std::size_t(c)] == 0)
            throw DomainError("normalization std must be nonzero");
        p.inv_std[std::size_t(c)] = 1.0 / spec.norm_std[std::size_t(c)];
    }
    p.width = width;
    p.height = height;
    p.channels = channels;
    return p;
}

inline Image apply_augmentation(const WarpPlan& plan, const Image& src) {
    if (src.width != plan.width || src.height != plan.height || src.channels != plan.channels)
        throw DomainError("augmentation plan drawn for a different image shape");
    Image out(src.width, src.height, src.channels);
    if (plan.kind == WarpPlan::Kind::Normalize) {
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x)
                for (int c = 0; c < src.channels; ++c)
                    out.at(x, y, c) =
                        (src.at(x, y, c) - plan.mean[std::size_t(c % 3)]) *
                        plan.inv_std[std::size_t(c % 3)];
        return out;
    }
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            double sx, sy;
            detail::project(plan.h, x + 0.5, y + 0.5, sx, sy);
            const detail::Tap t = detail::tap_at(sx, sy, src.width, src.height);
            for (int c = 0; c < src.channels; ++c) {
                out.at(x, y, c) =
                    (1 - t.wy) * ((1 - t.wx) * src.at(t.x0, t.y0, c) + t.wx * src.at(t.x1, t.y0, c)) +
                    t.wy * ((1 - t.wx) * src.at(t.x0, t.y1, c) + t.wx * src.at(t.x1, t.y1, c));
            }
        }
    }
    return out;
}

// Pixel adjoint of apply_augmentation; both steps are linear in the source
// pixels, so the plan alone determines the scatter.
inline void augmentation_backward(const WarpPlan& plan, const Image& g_out, Image& g_src) {
    if (plan.kind == WarpPlan::Kind::Normalize) {
        for (int y = 0; y < plan.height; ++y)
            for (int x = 0; x < plan.width; ++x)
                for (int c = 0; c < plan.channels; ++c)
                    g_src.at(x, y, c) += g_out.at(x, y, c) * plan.inv_std[std::size_t(c % 3)];
        return;
    }
    for (int y = 0; y < plan.height; ++y) {
        for (int x = 0; x < plan.width; ++x) {
            double sx, sy;
            detail::project(plan.h, x + 0.5, y + 0.5, sx, sy);
            const detail::Tap t = detail::tap_at(sx, sy, plan.width, plan.height);
            for (int c = 0; c < plan.channels; ++c) {
                const double g = g_out.at(x, y, c);
                g_src.at(t.x0, t.y0, c) += (1 - t.wy) * (1 - t.wx) * g;
                g_src.at(t.x1, t.y0, c) += (1 - t.wy) * t.wx * g;
                g_src.at(t.x0, t.y1, c) += t.wy * (1 - t.wx) * g;
                g_src.at(t.x1, t.y1, c) += t.wy * t.wx * g;
            }
        }
    }
}

// Exact inverse of the Z normalization.
inline Image denormalize(const WarpPlan& plan, const Image& img) {
    if (plan.kind != WarpPlan::Kind::Normalize)
        throw DomainError("denormalize requires a normalization plan");
    Image out(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(x, y, c) = img.at(x, y, c) / plan.inv_std[std::size_t(c % 3)] +
                                  plan.mean[std::size_t(c % 3)];
    return out;
}

} // namespace x3d
