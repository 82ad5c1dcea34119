#pragma once
#include <cmath>
#include <limits>
#include <vector>

#include "x3d/camera.hpp"
#include "x3d/errors.hpp"
#include "x3d/field.hpp"
#include "x3d/losses.hpp"
#include "x3d/mesh_render.hpp"
#include "x3d/pipeline.hpp"
#include "x3d/prior.hpp"
#include "x3d/tet.hpp"
#include "x3d/volume_render.hpp"

namespace x3d {

// Analytic ground-truth object for end-to-end runs: a solid sphere whose
// density falls off as a logistic shell of width tau around radius r0 and
// whose surface color encodes the outward direction.
inline VoxelRadianceField toy_sphere_field(int res, double r0 = 0.4, double tau = 0.05,
                                           double dmax = 20.0) {
    VoxelRadianceField f = make_field(res, 1.0);
    for (int k = 0; k < res; ++k)
        for (int j = 0; j < res; ++j)
            for (int i = 0; i < res; ++i) {
                const std::size_t v = f.vidx(i, j, k);
                const Vec3 p = f.vertex_pos(i, j, k);
                const double r = norm(p);
                const double d = dmax * sigmoid((r0 - r) / tau);
                f.raw_density[v] = std::log(std::expm1(std::max(d, 1e-6)));
                if (r > 1e-9) {
                    const Vec3 dir = p / r;
                    const double c[3] = {0.5 + 0.5 * dir.x, 0.5 + 0.5 * dir.y,
                                         0.5 + 0.5 * dir.z};
                    for (int ch = 0; ch < 3; ++ch) {
                        const double cc = std::min(1.0 - 1e-6, std::max(1e-6, c[ch]));
                        f.raw_color[v * 3 + ch] = std::log(cc / (1.0 - cc));
                    }
                }
            }
    return f;
}

// Tet scene built from the exact signed distance (positive inside), so the
// extracted mesh carries none of the density-threshold interpolation bias.
// Colors come from the supplied field.
inline TetScene toy_sphere_scene(int cells, double r0, const VoxelRadianceField& color_src) {
    TetScene s;
    s.grid = make_tet_grid(cells, color_src.half_extent);
    s.sdf.resize(s.grid.verts.size());
    for (std::size_t v = 0; v < s.grid.verts.size(); ++v)
        s.sdf[v] = r0 - norm(s.grid.verts[v]);
    s.offset_raw.assign(s.grid.verts.size() * 3, 0.0);
    s.color_field = color_src;
    return s;
}

// Per-pixel analytic hit test against the sphere of radius r0.
inline Image sphere_mask(const CameraPose& pose, int width, int height, double r0 = 0.4) {
    const RayBatch rays = generate_rays(pose, width, height);
    Image mask(width, height, 1);
    for (std::size_t i = 0; i < rays.directions.size(); ++i) {
        const Vec3 d = normalized(rays.directions[i]);
        const Vec3& o = rays.origin;
        const double b = dot(o, d);
        const double disc = b * b - (dot(o, o) - r0 * r0);
        if (disc >= 0 && -b - std::sqrt(disc) > 0) mask.data[i] = 1.0;
    }
    return mask;
}

// Ground-truth bundle for oracle-driven runs: the analytic field, its
// extracted mesh, pose-indexed rgb and normal-map target views, and the
// reference view at the first stored pose. The rgb oracle serves the
// view-conditioned prior role in phases 1 and 3, the normal oracle in
// phase 2; both share the reference pose so relative-pose conditions
// resolve to the same camera.
struct ToyFixture {
    VoxelRadianceField field;
    TetScene scene;
    SurfaceMesh target_mesh;
    MultiviewOraclePrior prior_rgb;
    MultiviewOraclePrior prior_normal;
    ReferenceView ref;
    std::vector<CameraPose> poses;
    double radius = 0.4;
};

inline ToyFixture make_toy_fixture(int field_res = 32, int view_res = 128, int n_views = 12,
                                   double r0 = 0.4, double tau = 0.05) {
    if (n_views < 1) throw DomainError("toy fixture needs at least one stored view");
    ToyFixture fx;
    fx.radius = r0;
    fx.field = toy_sphere_field(field_res, r0, tau);
    fx.scene = toy_sphere_scene(field_res, r0, fx.field);
    fx.target_mesh = marching_tets(fx.scene);

    const CameraPose ref_pose{15.0, 0.0, 2.5, 40.0};
    fx.prior_rgb = MultiviewOraclePrior(ref_pose);
    fx.prior_normal = MultiviewOraclePrior(ref_pose);
    const double step = 360.0 / n_views;
    for (int v = 0; v < n_views; ++v) {
        const CameraPose pose{15.0, step * v, 2.5, 40.0};
        const RayBatch rays = generate_rays(pose, view_res, view_res);
        const Image rgb = render_volume(fx.field, rays, 64, nullptr).rgb;
        const Image normals =
            render_mesh(fx.target_mesh, pose, view_res, view_res, MeshChannel::NormalMap).rgb;
        fx.prior_rgb.add_view(pose, rgb);
        fx.prior_normal.add_view(pose, normals);
        fx.poses.push_back(pose);
        if (v == 0) fx.ref.x_r = rgb;
    }
    fx.ref.pose = ref_pose;
    fx.ref.mask = sphere_mask(ref_pose, view_res, view_res, r0);
    return fx;
}

namespace detail {

// Near-uniform deterministic sphere sampling (golden-angle spiral).
inline std::vector<Vec3> fibonacci_sphere(int n, double radius) {
    const double golden = 3.14159265358979323846 * (3.0 - std::sqrt(5.0));
    std::vector<Vec3> pts;
    pts.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) {
        const double z = 1.0 - 2.0 * (i + 0.5) / n;
        const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * i;
        pts.push_back(Vec3{rho * std::cos(phi), rho * std::sin(phi), z} * radius);
    }
    return pts;
}

// Closest point on triangle abc to p (Ericson's region walk).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b,
                                      const Vec3& c) {
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = dot(ab, ap), d2 = dot(ac, ap);
    if (d1 <= 0 && d2 <= 0) return a;
    const Vec3 bp = p - b;
    const double d3 = dot(ab, bp), d4 = dot(ac, bp);
    if (d3 >= 0 && d4 <= d3) return b;
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + ab * (d1 / (d1 - d3));
    const Vec3 cp = p - c;
    const double d5 = dot(ab, cp), d6 = dot(ac, cp);
    if (d6 >= 0 && d5 <= d6) return c;
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + ac * (d2 / (d2 - d6));
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0 && d4 - d3 >= 0 && d5 - d6 >= 0) {
        const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    const double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

} // namespace detail

// Symmetric Chamfer distance between the mesh and the analytic sphere of the
// given radius. Mesh vertices measure exactly against the sphere; sphere
// samples from a deterministic spiral measure against the nearest point of
// the mesh surface.
inline double sphere_chamfer(const SurfaceMesh& mesh, double radius, int n_samples = 256) {
    if (mesh.verts.empty() || mesh.tris.empty()) throw DomainError("sphere_chamfer: empty mesh");
    double d_ms = 0;
    for (const Vec3& v : mesh.verts) d_ms += std::abs(norm(v) - radius);
    d_ms /= double(mesh.verts.size());

    double d_sm = 0;
    for (const Vec3& s : detail::fibonacci_sphere(n_samples, radius)) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& t : mesh.tris) {
            const Vec3 q = detail::closest_point_on_triangle(
                s, mesh.verts[std::size_t(t[0])], mesh.verts[std::size_t(t[1])],
                mesh.verts[std::size_t(t[2])]);
            best = std::min(best, norm(s - q));
        }
        d_sm += best;
    }
    d_sm /= double(n_samples);
    return 0.5 * (d_ms + d_sm);
}

} // namespace x3d
