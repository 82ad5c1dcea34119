#pragma once
#include <algorithm>
#include <cmath>
#include <vector>

#include "x3d/camera.hpp"
#include "x3d/image.hpp"
#include "x3d/tet.hpp"

namespace x3d {

enum class MeshChannel { NormalMap, Color, Mask };

struct MeshRenderOutput {
    Image rgb;                // 3 channels in every mode; mask mode replicates
    std::vector<double> mask; // hit indicator per pixel
    std::vector<int> tri;     // hit triangle per pixel, -1 for miss
    std::vector<double> u, v; // barycentric weights of verts 1 and 2
    std::vector<double> depth;
};

namespace detail {

struct TriangleBins {
    int tiles_x = 0, tiles_y = 0, tile = 16;
    std::vector<std::vector<int>> bins;
};

// Conservative screen-space binning: each triangle lands in every tile its
// padded pixel AABB touches. Anything crossing the camera plane goes in all
// bins (cannot happen for an object at the origin, but stays correct).
inline TriangleBins bin_triangles(const SurfaceMesh& mesh, const CameraPose& pose, int width,
                                  int height) {
    TriangleBins b;
    b.tiles_x = (width + b.tile - 1) / b.tile;
    b.tiles_y = (height + b.tile - 1) / b.tile;
    b.bins.assign(std::size_t(b.tiles_x) * b.tiles_y, {});
    const Mat3 R = pose.rotation();
    const Vec3 origin = pose.position();
    const double tan_half = std::tan(deg2rad(pose.fov_deg) * 0.5);
    const double aspect = double(width) / height;
    for (int ti = 0; ti < int(mesh.tris.size()); ++ti) {
        const auto& t = mesh.tris[std::size_t(ti)];
        double px_min = 1e30, px_max = -1e30, py_min = 1e30, py_max = -1e30;
        bool everywhere = false;
        for (int c = 0; c < 3; ++c) {
            const Vec3 pc = R * (mesh.verts[std::size_t(t[std::size_t(c)])] - origin);
            if (pc.z > -1e-9) { everywhere = true; break; }
            const double inv_z = 1.0 / (-pc.z);
            const double px = (pc.x * inv_z / (tan_half * aspect) + 1.0) * width / 2.0 - 0.5;
            const double py = (1.0 - pc.y * inv_z / tan_half) * height / 2.0 - 0.5;
            px_min = std::min(px_min, px);
            px_max = std::max(px_max, px);
            py_min = std::min(py_min, py);
            py_max = std::max(py_max, py);
        }
        int tx0 = 0, tx1 = b.tiles_x - 1, ty0 = 0, ty1 = b.tiles_y - 1;
        if (!everywhere) {
            tx0 = std::clamp(int(std::floor((px_min - 1) / b.tile)), 0, b.tiles_x - 1);
            tx1 = std::clamp(int(std::floor((px_max + 1) / b.tile)), 0, b.tiles_x - 1);
            ty0 = std::clamp(int(std::floor((py_min - 1) / b.tile)), 0, b.tiles_y - 1);
            ty1 = std::clamp(int(std::floor((py_max + 1) / b.tile)), 0, b.tiles_y - 1);
            if (px_max < -1 || px_min > width || py_max < -1 || py_min > height) continue;
        }
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                b.bins[std::size_t(ty) * b.tiles_x + std::size_t(tx)].push_back(ti);
    }
    return b;
}

struct Hit {
    int tri = -1;
    double t = 0, u = 0, v = 0;
};

inline bool intersect(const Vec3& origin, const Vec3& dir, const Vec3& A, const Vec3& B, const Vec3& C,
                      double& t, double& u, double& v) {
    const Vec3 e1 = B - A, e2 = C - A;
    const Vec3 pvec = cross(dir, e2);
    const double det = dot(e1, pvec);
    if (std::abs(det) < 1e-14) return false;
    const double inv = 1.0 / det;
    const Vec3 tvec = origin - A;
    u = dot(tvec, pvec) * inv;
    if (u < 0 || u > 1) return false;
    const Vec3 qvec = cross(tvec, e1);
    v = dot(dir, qvec) * inv;
    if (v < 0 || u + v > 1) return false;
    t = dot(e2, qvec) * inv;
    return t > 1e-6;
}

} // namespace detail

inline Vec3 default_background(MeshChannel channel) {
    // A miss in normal-map mode reads as a flat backdrop facing the camera.
    return channel == MeshChannel::NormalMap ? Vec3{0.5, 0.5, 1.0} : Vec3{1, 1, 1};
}

// Nearest-hit rasterization via per-pixel ray casting. Ties in depth resolve
// to the lowest triangle id, so output is independent of bin order.
inline MeshRenderOutput render_mesh(const SurfaceMesh& mesh, const CameraPose& pose, int width,
                                    int height, MeshChannel channel, const Vec3& background) {
    MeshRenderOutput out;
    out.rgb = Image(width, height, 3);
    const std::size_t n_px = std::size_t(width) * height;
    out.mask.assign(n_px, 0.0);
    out.tri.assign(n_px, -1);
    out.u.assign(n_px, 0.0);
    out.v.assign(n_px, 0.0);
    out.depth.assign(n_px, 0.0);
    const RayBatch rays = generate_rays(pose, width, height);
    const detail::TriangleBins bins = detail::bin_triangles(mesh, pose, width, height);
    const Mat3 R = pose.rotation();
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const std::size_t px = std::size_t(y) * width + x;
            const Vec3 dir = rays.directions[px];
            const auto& bin = bins.bins[std::size_t(y / bins.tile) * bins.tiles_x + std::size_t(x / bins.tile)];
            detail::Hit best;
            for (int ti : bin) {
                const auto& tr = mesh.tris[std::size_t(ti)];
                double t, u, v;
                if (detail::intersect(rays.origin, dir, mesh.verts[std::size_t(tr[0])],
                                      mesh.verts[std::size_t(tr[1])], mesh.verts[std::size_t(tr[2])], t, u,
                                      v)) {
                    if (best.tri < 0 || t < best.t || (t == best.t && ti < best.tri)) {
                        best = {ti, t, u, v};
                    }
                }
            }
            Vec3 color = background;
            if (best.tri >= 0) {
                const auto& tr = mesh.tris[std::size_t(best.tri)];
                const double w0 = 1.0 - best.u - best.v;
                out.mask[px] = 1.0;
                out.tri[px] = best.tri;
                out.u[px] = best.u;
                out.v[px] = best.v;
                out.depth[px] = best.t;
                switch (channel) {
                case MeshChannel::Color:
                    color = mesh.colors[std::size_t(tr[0])] * w0 + mesh.colors[std::size_t(tr[1])] * best.u +
                            mesh.colors[std::size_t(tr[2])] * best.v;
                    break;
                case MeshChannel::NormalMap: {
                    const Vec3 n_interp = mesh.normals[std::size_t(tr[0])] * w0 +
                                          mesh.normals[std::size_t(tr[1])] * best.u +
                                          mesh.normals[std::size_t(tr[2])] * best.v;
                    const Vec3 n_cam = R * normalized(n_interp);
                    color = (n_cam + Vec3{1, 1, 1}) * 0.5;
                    break;
                }
                case MeshChannel::Mask:
                    color = {1, 1, 1};
                    break;
                }
            } else if (channel == MeshChannel::Mask) {
                color = {0, 0, 0};
            }
            for (int c = 0; c < 3; ++c) out.rgb.at(x, y, c) = color[c];
        }
    }
    return out;
}

inline MeshRenderOutput render_mesh(const SurfaceMesh& mesh, const CameraPose& pose, int width,
                                    int height, MeshChannel channel) {
    return render_mesh(mesh, pose, width, height, channel, default_background(channel));
}

struct MeshRenderGrads {
    std::vector<Vec3> verts;
    std::vector<Vec3> colors;

    explicit MeshRenderGrads(const SurfaceMesh& mesh)
        : verts(mesh.verts.size(), Vec3{0, 0, 0}), colors(mesh.verts.size(), Vec3{0, 0, 0}) {}
};

// Reverse pass for covered pixels: upstream pixel gradients flow through the
// interpolated attributes and the barycentric coordinates of the recorded
// hit. Visibility itself is treated as fixed, so silhouette motion carries no
// gradient. The vertex-normal chain (normalize, then the per-face cross
// products) is replayed after all pixels are accumulated.
inline void render_mesh_backward(const SurfaceMesh& mesh, const CameraPose& pose,
                                 const MeshRenderOutput& out, MeshChannel channel,
                                 const std::vector<double>& g_rgb, MeshRenderGrads& grads) {
    if (channel == MeshChannel::Mask) return;
    const int width = out.rgb.width, height = out.rgb.height;
    const RayBatch rays = generate_rays(pose, width, height);
    const Mat3 Rt = pose.rotation().transposed();

    // Unnormalized vertex-normal accumulators, needed for the normalize
    // adjoint.
    std::vector<Vec3> m_acc;
    std::vector<Vec3> g_normals;
    if (channel == MeshChannel::NormalMap) {
        m_acc.assign(mesh.verts.size(), Vec3{0, 0, 0});
        for (const auto& t : mesh.tris) {
            const Vec3 n = cross(mesh.verts[std::size_t(t[1])] - mesh.verts[std::size_t(t[0])],
                                 mesh.verts[std::size_t(t[2])] - mesh.verts[std::size_t(t[0])]);
            for (int i = 0; i < 3; ++i) m_acc[std::size_t(t[i])] += n;
        }
        g_normals.assign(mesh.verts.size(), Vec3{0, 0, 0});
    }

    for (std::size_t px = 0; px < out.tri.size(); ++px) {
        const int ti = out.tri[px];
        if (ti < 0) continue;
        const Vec3 g_pixel{g_rgb[px * 3], g_rgb[px * 3 + 1], g_rgb[px * 3 + 2]};
        if (g_pixel.x == 0 && g_pixel.y == 0 && g_pixel.z == 0) continue;
        const auto& tr = mesh.tris[std::size_t(ti)];
        const double u = out.u[px], v = out.v[px], w0 = 1.0 - u - v;
        double gu = 0, gv = 0;

        if (channel == MeshChannel::Color) {
            const Vec3 c0 = mesh.colors[std::size_t(tr[0])], c1 = mesh.colors[std::size_t(tr[1])],
                       c2 = mesh.colors[std::size_t(tr[2])];
            grads.colors[std::size_t(tr[0])] += g_pixel * w0;
            grads.colors[std::size_t(tr[1])] += g_pixel * u;
            grads.colors[std::size_t(tr[2])] += g_pixel * v;
            gu = dot(g_pixel, c1 - c0);
            gv = dot(g_pixel, c2 - c0);
        } else {
            const Vec3 n0 = mesh.normals[std::size_t(tr[0])], n1 = mesh.normals[std::size_t(tr[1])],
                       n2 = mesh.normals[std::size_t(tr[2])];
            const Vec3 n_interp = n0 * w0 + n1 * u + n2 * v;
            const double len = norm(n_interp);
            if (len < 1e-12) continue;
            const Vec3 n_hat = n_interp / len;
            const Vec3 g_ncam = g_pixel * 0.5;
            const Vec3 g_nhat = Rt * g_ncam;
            const Vec3 g_ninterp = (g_nhat - n_hat * dot(n_hat, g_nhat)) / len;
            g_normals[std::size_t(tr[0])] += g_ninterp * w0;
            g_normals[std::size_t(tr[1])] += g_ninterp * u;
            g_normals[std::size_t(tr[2])] += g_ninterp * v;
            gu = dot(g_ninterp, n1 - n0);
            gv = dot(g_ninterp, n2 - n0);
        }

        if (gu == 0 && gv == 0) continue;
        // Moller-Trumbore adjoint for (u, v) w.r.t. the triangle corners.
        const Vec3 A = mesh.verts[std::size_t(tr[0])], B = mesh.verts[std::size_t(tr[1])],
                   C = mesh.verts[std::size_t(tr[2])];
        const Vec3 dir = rays.directions[px];
        const Vec3 e1 = B - A, e2 = C - A;
        const Vec3 pvec = cross(dir, e2);
        const double det = dot(e1, pvec);
        const double inv = 1.0 / det;
        const Vec3 tvec = rays.origin - A;
        const Vec3 qvec = cross(tvec, e1);

        Vec3 g_tvec = pvec * (gu * inv);
        Vec3 g_pvec = tvec * (gu * inv);
        double g_det = -gu * u * inv;
        Vec3 g_qvec = dir * (gv * inv);
        g_det += -gv * v * inv;
        Vec3 g_e1 = pvec * g_det;
        g_pvec += e1 * g_det;
        g_tvec += cross(e1, g_qvec);
        g_e1 += cross(g_qvec, tvec);
        Vec3 g_e2 = cross(g_pvec, dir);
        grads.verts[std::size_t(tr[0])] -= g_tvec + g_e1 + g_e2;
        grads.verts[std::size_t(tr[1])] += g_e1;
        grads.verts[std::size_t(tr[2])] += g_e2;
    }

    if (channel == MeshChannel::NormalMap) {
        // normals[v] = m_acc[v]/|m_acc[v]|; each face's cross product feeds
        // all three of its corners' accumulators.
        std::vector<Vec3> g_m(mesh.verts.size(), Vec3{0, 0, 0});
        for (std::size_t vtx = 0; vtx < mesh.verts.size(); ++vtx) {
            const Vec3 gn = g_normals[vtx];
            if (gn.x == 0 && gn.y == 0 && gn.z == 0) continue;
            const double len = norm(m_acc[vtx]);
            if (len < 1e-12) continue;
            const Vec3 n = m_acc[vtx] / len;
            g_m[vtx] = (gn - n * dot(n, gn)) / len;
        }
        for (const auto& t : mesh.tris) {
            const Vec3 G = g_m[std::size_t(t[0])] + g_m[std::size_t(t[1])] + g_m[std::size_t(t[2])];
            if (G.x == 0 && G.y == 0 && G.z == 0) continue;
            const Vec3 e1 = mesh.verts[std::size_t(t[1])] - mesh.verts[std::size_t(t[0])];
            const Vec3 e2 = mesh.verts[std::size_t(t[2])] - mesh.verts[std::size_t(t[0])];
            const Vec3 g_e1 = cross(e2, G);
            const Vec3 g_e2 = cross(G, e1);
            grads.verts[std::size_t(t[1])] += g_e1;
            grads.verts[std::size_t(t[2])] += g_e2;
            grads.verts[std::size_t(t[0])] -= g_e1 + g_e2;
        }
    }
}

} // namespace x3d
