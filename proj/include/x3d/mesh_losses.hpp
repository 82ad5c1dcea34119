#pragma once
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "x3d/field.hpp"
#include "x3d/rng.hpp"
#include "x3d/tet.hpp"

namespace x3d {

namespace detail {
inline std::uint64_t edge_key(int a, int b) {
    if (a > b) std::swap(a, b);
    return (std::uint64_t(std::uint32_t(a)) << 32) | std::uint32_t(b);
}
} // namespace detail

// Mean over adjacent face pairs of (1 - n_i . n_j) with unit face normals.
// Zero exactly when every adjacent pair is coplanar with matching winding.
inline double normal_consistency_loss(const SurfaceMesh& mesh, std::vector<Vec3>* g_verts = nullptr) {
    if (g_verts) g_verts->assign(mesh.verts.size(), Vec3{0, 0, 0});
    const std::size_t nf = mesh.tris.size();
    std::vector<Vec3> raw_n(nf), unit_n(nf);
    std::vector<double> len(nf);
    for (std::size_t f = 0; f < nf; ++f) {
        const auto& t = mesh.tris[f];
        raw_n[f] = cross(mesh.verts[std::size_t(t[1])] - mesh.verts[std::size_t(t[0])],
                         mesh.verts[std::size_t(t[2])] - mesh.verts[std::size_t(t[0])]);
        len[f] = norm(raw_n[f]);
        unit_n[f] = len[f] > 1e-15 ? raw_n[f] / len[f] : Vec3{0, 0, 0};
    }
    std::unordered_map<std::uint64_t, std::array<int, 2>> edge_faces;
    edge_faces.reserve(nf * 3);
    for (std::size_t f = 0; f < nf; ++f) {
        const auto& t = mesh.tris[f];
        for (int e = 0; e < 3; ++e) {
            const auto key = detail::edge_key(t[std::size_t(e)], t[std::size_t((e + 1) % 3)]);
            auto [it, fresh] = edge_faces.try_emplace(key, std::array<int, 2>{int(f), -1});
            if (!fresh && it->second[1] < 0) it->second[1] = int(f);
        }
    }
    double sum = 0;
    std::size_t pairs = 0;
    std::vector<Vec3> g_unit(g_verts ? nf : 0, Vec3{0, 0, 0});
    for (const auto& [key, faces] : edge_faces) {
        (void)key;
        if (faces[1] < 0) continue;
        const std::size_t f0 = std::size_t(faces[0]), f1 = std::size_t(faces[1]);
        sum += 1.0 - dot(unit_n[f0], unit_n[f1]);
        ++pairs;
        if (g_verts) {
            g_unit[f0] -= unit_n[f1];
            g_unit[f1] -= unit_n[f0];
        }
    }
    if (pairs == 0) return 0.0;
    const double loss = sum / double(pairs);
    if (g_verts) {
        for (std::size_t f = 0; f < nf; ++f) {
            Vec3 gn = g_unit[f] / double(pairs);
            if ((gn.x == 0 && gn.y == 0 && gn.z == 0) || len[f] <= 1e-15) continue;
            const Vec3 g_raw = (gn - unit_n[f] * dot(unit_n[f], gn)) / len[f];
            const auto& t = mesh.tris[f];
            const Vec3 e1 = mesh.verts[std::size_t(t[1])] - mesh.verts[std::size_t(t[0])];
            const Vec3 e2 = mesh.verts[std::size_t(t[2])] - mesh.verts[std::size_t(t[0])];
            const Vec3 g_e1 = cross(e2, g_raw);
            const Vec3 g_e2 = cross(g_raw, e1);
            (*g_verts)[std::size_t(t[1])] += g_e1;
            (*g_verts)[std::size_t(t[2])] += g_e2;
            (*g_verts)[std::size_t(t[0])] -= g_e1 + g_e2;
        }
    }
    return loss;
}

// Mean over vertices of the squared distance to the centroid of their
// one-ring. Isolated vertices contribute nothing.
inline double laplacian_loss(const SurfaceMesh& mesh, std::vector<Vec3>* g_verts = nullptr) {
    if (g_verts) g_verts->assign(mesh.verts.size(), Vec3{0, 0, 0});
    const std::size_t nv = mesh.verts.size();
    if (nv == 0) return 0.0;
    std::vector<std::vector<int>> ring(nv);
    std::unordered_map<std::uint64_t, char> seen;
    for (const auto& t : mesh.tris)
        for (int e = 0; e < 3; ++e) {
            const int a = t[std::size_t(e)], b = t[std::size_t((e + 1) % 3)];
            if (seen.try_emplace(detail::edge_key(a, b), 1).second) {
                ring[std::size_t(a)].push_back(b);
                ring[std::size_t(b)].push_back(a);
            }
        }
    double sum = 0;
    std::vector<Vec3> delta(nv, Vec3{0, 0, 0});
    for (std::size_t v = 0; v < nv; ++v) {
        if (ring[v].empty()) continue;
        Vec3 mean{0, 0, 0};
        for (int u : ring[v]) mean += mesh.verts[std::size_t(u)];
        mean = mean / double(ring[v].size());
        delta[v] = mesh.verts[v] - mean;
        sum += norm2(delta[v]);
    }
    const double loss = sum / double(nv);
    if (g_verts) {
        const double scale = 2.0 / double(nv);
        for (std::size_t v = 0; v < nv; ++v) {
            if (ring[v].empty()) continue;
            (*g_verts)[v] += delta[v] * scale;
            const double share = scale / double(ring[v].size());
            for (int u : ring[v]) (*g_verts)[std::size_t(u)] -= delta[v] * share;
        }
    }
    return loss;
}

// Unit surface normal of the density field: the normalized negative density
// gradient. The gradient of a trilinear field is exact per cell.
inline bool field_normal(const VoxelRadianceField& f, const Vec3& p, Vec3& n, Vec3* raw_grad = nullptr) {
    const double he = f.half_extent;
    if (p.x < -he || p.x > he || p.y < -he || p.y > he || p.z < -he || p.z > he) return false;
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
    Vec3 grad{0, 0, 0};
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double dv = f.density_at_vertex(f.vidx(i0[0] + dx, i0[1] + dy, i0[2] + dz));
                const double wx = dx ? fu[0] : 1 - fu[0];
                const double wy = dy ? fu[1] : 1 - fu[1];
                const double wz = dz ? fu[2] : 1 - fu[2];
                grad.x += dv * (dx ? 1.0 : -1.0) / h * wy * wz;
                grad.y += dv * (dy ? 1.0 : -1.0) / h * wx * wz;
                grad.z += dv * (dz ? 1.0 : -1.0) / h * wx * wy;
            }
    if (raw_grad) *raw_grad = grad;
    const double len = norm(grad);
    if (len < 1e-10) return false;
    n = -grad / len;
    return true;
}

namespace detail {
// d(loss)/d(raw density) for one normal evaluation, given upstream g_n.
inline void field_normal_backward(const VoxelRadianceField& f, const Vec3& p, const Vec3& raw_grad,
                                  const Vec3& g_n, FieldGrads& grads) {
    const double he = f.half_extent;
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
    const double len = norm(raw_grad);
    const Vec3 n = -raw_grad / len;
    // n = -g/|g|  =>  adjoint of the normalize, then flip sign.
    const Vec3 g_grad = -(g_n - n * dot(n, g_n)) / len;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const std::size_t v = f.vidx(i0[0] + dx, i0[1] + dy, i0[2] + dz);
                const double wx = dx ? fu[0] : 1 - fu[0];
                const double wy = dy ? fu[1] : 1 - fu[1];
                const double wz = dz ? fu[2] : 1 - fu[2];
                const double d_ddv = g_grad.x * (dx ? 1.0 : -1.0) / h * wy * wz +
                                     g_grad.y * (dy ? 1.0 : -1.0) / h * wx * wz +
                                     g_grad.z * (dz ? 1.0 : -1.0) / h * wx * wy;
                grads.raw_density[v] += d_ddv * sigmoid(f.raw_density[v]);
            }
}
} // namespace detail

// Mean of |n(p) - n(p + delta)|^2 over point/jitter pairs. Pairs where either
// endpoint has no usable gradient are skipped; points themselves carry no
// gradient (they come from a stop-gradient depth estimate).
inline double normal_smoothness_loss(const VoxelRadianceField& field, const std::vector<Vec3>& points,
                                     const std::vector<Vec3>& jitters, FieldGrads* grads = nullptr) {
    if (points.size() != jitters.size())
        throw DomainError("normal_smoothness_loss: points/jitters size mismatch");
    double sum = 0;
    std::size_t used = 0;
    struct Pair {
        Vec3 p0, p1, g0, g1, n0, n1;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < points.size(); ++i) {
        Pair pr;
        pr.p0 = points[i];
        pr.p1 = points[i] + jitters[i];
        if (!field_normal(field, pr.p0, pr.n0, &pr.g0)) continue;
        if (!field_normal(field, pr.p1, pr.n1, &pr.g1)) continue;
        sum += norm2(pr.n0 - pr.n1);
        ++used;
        if (grads) pairs.push_back(pr);
    }
    if (used == 0) return 0.0;
    const double loss = sum / double(used);
    if (grads) {
        const double scale = 2.0 / double(used);
        for (const Pair& pr : pairs) {
            const Vec3 d = (pr.n0 - pr.n1) * scale;
            detail::field_normal_backward(field, pr.p0, pr.g0, d, *grads);
            detail::field_normal_backward(field, pr.p1, pr.g1, -d, *grads);
        }
    }
    return loss;
}

// Convenience overload drawing one jitter per point: a random direction of
// length jitter_voxels grid cells.
inline double normal_smoothness_loss(const VoxelRadianceField& field, const std::vector<Vec3>& points,
                                     Rng& rng, double jitter_voxels = 0.5, FieldGrads* grads = nullptr) {
    const double h = 2.0 * field.half_extent / (field.res - 1);
    std::vector<Vec3> jitters(points.size());
    for (auto& j : jitters) {
        Vec3 d;
        do {
            d = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        } while (norm2(d) < 1e-8 || norm2(d) > 1.0);
        j = normalized(d) * (jitter_voxels * h);
    }
    return normal_smoothness_loss(field, points, jitters, grads);
}

} // namespace x3d
