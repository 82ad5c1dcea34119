#pragma once
#include <array>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "x3d/errors.hpp"
#include "x3d/field.hpp"
#include "x3d/vec.hpp"

namespace x3d {

struct TetGrid {
    std::vector<Vec3> verts;
    std::vector<std::array<int, 4>> tets;
    double cell_size = 0;
    double half_extent = 0;
};

// Regular lattice of n_cells^3 cubes, each split into the 6 tetrahedra that
// share the cube's main diagonal. The split is the same in every cube, so
// faces of neighboring cubes are cut along the same diagonal and the global
// complex is conforming.
inline TetGrid make_tet_grid(int n_cells, double half_extent) {
    if (n_cells < 1) throw DomainError("make_tet_grid: n_cells must be >= 1");
    TetGrid g;
    g.half_extent = half_extent;
    g.cell_size = 2.0 * half_extent / n_cells;
    const int nv = n_cells + 1;
    g.verts.reserve(std::size_t(nv) * nv * nv);
    for (int k = 0; k < nv; ++k)
        for (int j = 0; j < nv; ++j)
            for (int i = 0; i < nv; ++i)
                g.verts.push_back({-half_extent + i * g.cell_size, -half_extent + j * g.cell_size,
                                   -half_extent + k * g.cell_size});
    auto vid = [nv](int i, int j, int k) { return (k * nv + j) * nv + i; };
    // Corner bit layout: bit0 = +x, bit1 = +y, bit2 = +z. Each tet walks the
    // main diagonal 0 -> 7 one axis at a time; the 6 axis orders give the 6 tets.
    static const int kTets[6][4] = {{0, 1, 3, 7}, {0, 1, 5, 7}, {0, 2, 3, 7},
                                    {0, 2, 6, 7}, {0, 4, 5, 7}, {0, 4, 6, 7}};
    g.tets.reserve(std::size_t(n_cells) * n_cells * n_cells * 6);
    for (int k = 0; k < n_cells; ++k)
        for (int j = 0; j < n_cells; ++j)
            for (int i = 0; i < n_cells; ++i) {
                int corner[8];
                for (int c = 0; c < 8; ++c)
                    corner[c] = vid(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                for (const auto& t : kTets)
                    g.tets.push_back({corner[t[0]], corner[t[1]], corner[t[2]], corner[t[3]]});
            }
    return g;
}

// Deformable tetrahedral scene: signed distance (interior > 0) and a bounded
// learnable offset per grid vertex, plus the color grid carried over from the
// radiance field stage. The offset bound keeps every tet non-degenerate.
struct TetScene {
    TetGrid grid;
    std::vector<double> sdf;        // per grid vertex
    std::vector<double> offset_raw; // 3 per grid vertex, tanh-squashed
    VoxelRadianceField color_field;

    // Per-component bound cell/(2*sqrt(3)) caps the offset norm at half a
    // cell edge.
    double offset_bound() const { return grid.cell_size / (2.0 * std::sqrt(3.0)); }

    Vec3 offset(int v) const {
        const double b = offset_bound();
        return {b * std::tanh(offset_raw[std::size_t(v) * 3 + 0]),
                b * std::tanh(offset_raw[std::size_t(v) * 3 + 1]),
                b * std::tanh(offset_raw[std::size_t(v) * 3 + 2])};
    }
    Vec3 vertex_pos(int v) const { return grid.verts[std::size_t(v)] + offset(v); }
};

// Density minus threshold: dense interiors become positive. Colors stay on
// the voxel grid; surface vertices sample it at their extracted position.
inline TetScene field_to_sdf(const VoxelRadianceField& field, const TetGrid& grid, double threshold) {
    if (threshold <= 0) throw DomainError("field_to_sdf: threshold must be > 0");
    TetScene scene;
    scene.grid = grid;
    scene.sdf.resize(grid.verts.size());
    scene.offset_raw.assign(grid.verts.size() * 3, 0.0);
    scene.color_field = field;
    for (std::size_t v = 0; v < grid.verts.size(); ++v)
        scene.sdf[v] = query_field(field, grid.verts[v]).density - threshold;
    return scene;
}

struct SurfaceMesh {
    std::vector<Vec3> verts;
    std::vector<Vec3> normals; // unit, area-weighted vertex normals
    std::vector<Vec3> colors;
    std::vector<std::array<int, 3>> tris;

    bool empty() const { return tris.empty(); }
};

// Which grid edge produced each surface vertex; enough to replay the
// interpolation chain in reverse.
struct MeshProvenance {
    std::vector<std::array<int, 2>> edge; // grid vertex ids, lower id first
};

inline void compute_vertex_normals(SurfaceMesh& mesh) {
    std::vector<Vec3> acc(mesh.verts.size(), Vec3{0, 0, 0});
    for (const auto& t : mesh.tris) {
        const Vec3 n = cross(mesh.verts[std::size_t(t[1])] - mesh.verts[std::size_t(t[0])],
                             mesh.verts[std::size_t(t[2])] - mesh.verts[std::size_t(t[0])]);
        for (int i = 0; i < 3; ++i) acc[std::size_t(t[i])] += n;
    }
    mesh.normals.resize(mesh.verts.size());
    for (std::size_t v = 0; v < mesh.verts.size(); ++v) mesh.normals[v] = normalized(acc[v]);
}

namespace detail {

// Trilinear color sample with both the tap weights (for grid gradients) and
// the spatial derivative (surface vertices move through the color field as
// the geometry deforms).
inline Vec3 sample_color(const VoxelRadianceField& f, const Vec3& p, Mat3* dcolor_dpos = nullptr) {
    if (dcolor_dpos) *dcolor_dpos = Mat3{};
    const double he = f.half_extent;
    Vec3 q = p;
    // Surface vertices can poke just outside the color grid; clamp the
    // sample (gradient through the clamped axis is zero there).
    bool clamped[3] = {false, false, false};
    for (int a = 0; a < 3; ++a) {
        if (q[a] < -he) { q[a] = -he; clamped[a] = true; }
        if (q[a] > he) { q[a] = he; clamped[a] = true; }
    }
    const double h = 2.0 * he / (f.res - 1);
    double fu[3];
    int i0[3];
    for (int a = 0; a < 3; ++a) {
        const double u = (q[a] + he) / h;
        int c = int(std::floor(u));
        if (c > f.res - 2) c = f.res - 2;
        if (c < 0) c = 0;
        i0[a] = c;
        fu[a] = u - c;
    }
    Vec3 color{0, 0, 0};
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const std::size_t v = f.vidx(i0[0] + dx, i0[1] + dy, i0[2] + dz);
                const Vec3 cv = f.color_at_vertex(v);
                const double wx = dx ? fu[0] : 1 - fu[0];
                const double wy = dy ? fu[1] : 1 - fu[1];
                const double wz = dz ? fu[2] : 1 - fu[2];
                color += cv * (wx * wy * wz);
                if (dcolor_dpos) {
                    const double gx = clamped[0] ? 0.0 : (dx ? 1.0 : -1.0) / h * wy * wz;
                    const double gy = clamped[1] ? 0.0 : (dy ? 1.0 : -1.0) / h * wx * wz;
                    const double gz = clamped[2] ? 0.0 : (dz ? 1.0 : -1.0) / h * wx * wy;
                    for (int c = 0; c < 3; ++c) {
                        dcolor_dpos->m[c][0] += cv[c] * gx;
                        dcolor_dpos->m[c][1] += cv[c] * gy;
                        dcolor_dpos->m[c][2] += cv[c] * gz;
                    }
                }
            }
    return color;
}

inline void sample_color_backward(const VoxelRadianceField& f, const Vec3& p, const Vec3& g_color,
                                  std::vector<double>& g_raw_color) {
    const double he = f.half_extent;
    Vec3 q = p;
    for (int a = 0; a < 3; ++a) q[a] = std::clamp(q[a], -he, he);
    const FieldTaps taps = field_taps(f, q);
    if (!taps.inside) return;
    for (int n = 0; n < 8; ++n) {
        const double w = taps.weight[n];
        if (w == 0) continue;
        const std::size_t v = taps.vidx[n];
        for (int c = 0; c < 3; ++c) {
            const double s = sigmoid(f.raw_color[v * 3 + c]);
            g_raw_color[v * 3 + c] += w * g_color[c] * s * (1 - s);
        }
    }
}

} // namespace detail

// Marching tetrahedra over the deformed grid. Vertices land on sign-change
// edges at p = (s_b q_a - s_a q_b)/(s_b - s_a); shared edges dedup through a
// sorted-pair key so the surface is watertight by construction. Each tet is
// first reordered to positive orientation; case tables written for that
// ordering then give globally consistent winding with normals toward
// negative (exterior) sdf.
inline SurfaceMesh marching_tets(const TetScene& scene, MeshProvenance* prov = nullptr) {
    SurfaceMesh mesh;
    if (prov) prov->edge.clear();
    std::unordered_map<std::uint64_t, int> edge_to_vert;
    auto vert_on_edge = [&](int a, int b) {
        if (a > b) std::swap(a, b);
        const std::uint64_t key = (std::uint64_t(std::uint32_t(a)) << 32) | std::uint32_t(b);
        const auto it = edge_to_vert.find(key);
        if (it != edge_to_vert.end()) return it->second;
        const double sa = scene.sdf[std::size_t(a)], sb = scene.sdf[std::size_t(b)];
        const Vec3 qa = scene.vertex_pos(a), qb = scene.vertex_pos(b);
        const Vec3 p = (qa * sb - qb * sa) / (sb - sa);
        const int id = int(mesh.verts.size());
        mesh.verts.push_back(p);
        edge_to_vert.emplace(key, id);
        if (prov) prov->edge.push_back({a, b});
        return id;
    };

    // Even reorderings that move the flagged corner (or pair) to the front of
    // a positively oriented tet.
    static const int kOne[4][4] = {{0, 1, 2, 3}, {1, 0, 3, 2}, {2, 3, 0, 1}, {3, 2, 1, 0}};
    static const int kTwo[6][4] = {{0, 1, 2, 3}, {0, 2, 3, 1}, {1, 2, 0, 3},
                                   {0, 3, 1, 2}, {1, 3, 2, 0}, {2, 3, 0, 1}};
    auto pair_index = [](int lo, int hi) {
        // (0,1)->0 (0,2)->1 (1,2)->2 (0,3)->3 (1,3)->4 (2,3)->5
        return hi == 1 ? 0 : (hi == 2 ? 1 + lo : 3 + lo);
    };

    for (const auto& tet_in : scene.grid.tets) {
        std::array<int, 4> tet = tet_in;
        // Normalize to positive orientation using the undeformed grid; the
        // offset bound keeps deformation from flipping any tet.
        {
            const Vec3 e1 = scene.grid.verts[std::size_t(tet[1])] - scene.grid.verts[std::size_t(tet[0])];
            const Vec3 e2 = scene.grid.verts[std::size_t(tet[2])] - scene.grid.verts[std::size_t(tet[0])];
            const Vec3 e3 = scene.grid.verts[std::size_t(tet[3])] - scene.grid.verts[std::size_t(tet[0])];
            if (dot(e1, cross(e2, e3)) < 0) std::swap(tet[2], tet[3]);
        }
        int mask = 0;
        for (int c = 0; c < 4; ++c)
            if (scene.sdf[std::size_t(tet[std::size_t(c)])] > 0) mask |= 1 << c;
        if (mask == 0 || mask == 0b1111) continue;
        const int popcount = (mask & 1) + ((mask >> 1) & 1) + ((mask >> 2) & 1) + ((mask >> 3) & 1);
        if (popcount == 1 || popcount == 3) {
            int flagged = 0;
            while (!((popcount == 1 ? mask : ~mask) & (1 << flagged))) ++flagged;
            const int* o = kOne[flagged];
            const int a = tet[std::size_t(o[0])], b = tet[std::size_t(o[1])], c = tet[std::size_t(o[2])],
                      d = tet[std::size_t(o[3])];
            const int pab = vert_on_edge(a, b), pac = vert_on_edge(a, c), pad = vert_on_edge(a, d);
            if (popcount == 1)
                mesh.tris.push_back({pab, pac, pad});
            else
                mesh.tris.push_back({pab, pad, pac});
        } else {
            int lo = 0, hi = 3;
            while (!(mask & (1 << lo))) ++lo;
            while (!(mask & (1 << hi))) --hi;
            const int* o = kTwo[pair_index(lo, hi)];
            const int a = tet[std::size_t(o[0])], b = tet[std::size_t(o[1])], c = tet[std::size_t(o[2])],
                      d = tet[std::size_t(o[3])];
            const int pac = vert_on_edge(a, c), pad = vert_on_edge(a, d);
            const int pbd = vert_on_edge(b, d), pbc = vert_on_edge(b, c);
            mesh.tris.push_back({pac, pad, pbd});
            mesh.tris.push_back({pac, pbd, pbc});
        }
    }

    mesh.colors.resize(mesh.verts.size());
    for (std::size_t v = 0; v < mesh.verts.size(); ++v)
        mesh.colors[v] = detail::sample_color(scene.color_field, mesh.verts[v]);
    compute_vertex_normals(mesh);
    return mesh;
}

struct TetGrads {
    std::vector<double> sdf;
    std::vector<double> offset_raw;
    std::vector<double> color_raw;

    explicit TetGrads(const TetScene& s)
        : sdf(s.sdf.size(), 0.0), offset_raw(s.offset_raw.size(), 0.0),
          color_raw(s.color_field.raw_color.size(), 0.0) {}
    void zero() {
        std::fill(sdf.begin(), sdf.end(), 0.0);
        std::fill(offset_raw.begin(), offset_raw.end(), 0.0);
        std::fill(color_raw.begin(), color_raw.end(), 0.0);
    }
};

// Pulls gradients on surface vertex positions and colors back to the sdf,
// offset, and color-grid parameters. Color gradients split into the grid-tap
// part and a spatial part that rides the position chain.
inline void marching_tets_backward(const TetScene& scene, const SurfaceMesh& mesh,
                                   const MeshProvenance& prov, const std::vector<Vec3>& g_verts,
                                   const std::vector<Vec3>& g_colors, TetGrads& grads) {
    const double bound = scene.offset_bound();
    for (std::size_t v = 0; v < mesh.verts.size(); ++v) {
        Vec3 g_p = v < g_verts.size() ? g_verts[v] : Vec3{0, 0, 0};
        const Vec3 g_c = v < g_colors.size() ? g_colors[v] : Vec3{0, 0, 0};
        if (g_c.x != 0 || g_c.y != 0 || g_c.z != 0) {
            detail::sample_color_backward(scene.color_field, mesh.verts[v], g_c, grads.color_raw);
            Mat3 dcdp;
            detail::sample_color(scene.color_field, mesh.verts[v], &dcdp);
            g_p += dcdp.transposed() * g_c;
        }
        if (g_p.x == 0 && g_p.y == 0 && g_p.z == 0) continue;
        const int a = prov.edge[v][0], b = prov.edge[v][1];
        const double sa = scene.sdf[std::size_t(a)], sb = scene.sdf[std::size_t(b)];
        const Vec3 qa = scene.vertex_pos(a), qb = scene.vertex_pos(b);
        const double delta = sb - sa;
        grads.sdf[std::size_t(a)] += dot(g_p, (qa - qb) * (sb / (delta * delta)));
        grads.sdf[std::size_t(b)] += dot(g_p, (qb - qa) * (sa / (delta * delta)));
        const Vec3 g_qa = g_p * (sb / delta);
        const Vec3 g_qb = g_p * (-sa / delta);
        for (int c = 0; c < 3; ++c) {
            const double ta = std::tanh(scene.offset_raw[std::size_t(a) * 3 + std::size_t(c)]);
            const double tb = std::tanh(scene.offset_raw[std::size_t(b) * 3 + std::size_t(c)]);
            grads.offset_raw[std::size_t(a) * 3 + std::size_t(c)] += g_qa[c] * bound * (1 - ta * ta);
            grads.offset_raw[std::size_t(b) * 3 + std::size_t(c)] += g_qb[c] * bound * (1 - tb * tb);
        }
    }
}

} // namespace x3d
