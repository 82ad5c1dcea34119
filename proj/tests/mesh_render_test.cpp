#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "x3d/mesh_losses.hpp"
#include "x3d/mesh_render.hpp"

using namespace x3d;
using x3d_test::max_grad_rel_err;

namespace {

double inv_softplus(double y) { return std::log(std::expm1(y)); }

// Billboard triangle at the origin facing +x, so a camera at azimuth 0 and
// elevation 0 sees it square on.
SurfaceMesh facing_triangle() {
    SurfaceMesh m;
    m.verts = {{0, -0.6, -0.4}, {0, 0.6, -0.4}, {0, 0, 0.6}};
    m.colors = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    m.tris = {{0, 1, 2}};
    compute_vertex_normals(m);
    return m;
}

// Two tets sharing a face, sdf positive at the two apexes, producing a small
// two-triangle-per-apex surface for gradient probing.
TetScene two_tet_scene() {
    TetScene s;
    s.grid.verts = {{0, -0.5, -0.4}, {0, 0.5, -0.4}, {0.05, 0, 0.55}, {-0.55, 0, 0.05}, {0.55, 0, 0.05}};
    s.grid.tets = {{0, 1, 2, 3}, {0, 1, 2, 4}};
    s.grid.cell_size = 1.0;
    s.grid.half_extent = 1.0;
    s.sdf = {-0.8, -0.7, -0.9, 0.75, 0.85};
    s.offset_raw.assign(15, 0.0);
    s.color_field = make_field(3, 1.0);
    return s;
}

} // namespace

TEST_SUITE("mesh_render") {

TEST_CASE("a camera-facing triangle renders normal pixel (0.5, 0.5, 1)") {
    const SurfaceMesh m = facing_triangle();
    CameraPose pose;
    pose.distance = 2.0;
    const MeshRenderOutput out = render_mesh(m, pose, 9, 9, MeshChannel::NormalMap);
    REQUIRE(out.mask[4 * 9 + 4] == 1.0);
    CHECK(out.rgb.at(4, 4, 0) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(out.rgb.at(4, 4, 1) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(out.rgb.at(4, 4, 2) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("color mode interpolates vertex colors barycentrically") {
    const SurfaceMesh m = facing_triangle();
    CameraPose pose;
    pose.distance = 2.0;
    const MeshRenderOutput out = render_mesh(m, pose, 33, 33, MeshChannel::Color);
    double r_sum = 0, g_sum = 0, b_sum = 0;
    int hits = 0;
    for (std::size_t px = 0; px < out.mask.size(); ++px) {
        if (out.mask[px] != 1.0) continue;
        ++hits;
        const double u = out.u[px], v = out.v[px], w0 = 1 - u - v;
        const int x = int(px % 33), y = int(px / 33);
        CHECK(out.rgb.at(x, y, 0) == doctest::Approx(w0).epsilon(1e-9));
        CHECK(out.rgb.at(x, y, 1) == doctest::Approx(u).epsilon(1e-9));
        CHECK(out.rgb.at(x, y, 2) == doctest::Approx(v).epsilon(1e-9));
        r_sum += out.rgb.at(x, y, 0);
        g_sum += out.rgb.at(x, y, 1);
        b_sum += out.rgb.at(x, y, 2);
    }
    REQUIRE(hits > 50);
    // Channel sums agree since barycentric weights sum to 1 pixel-wise.
    CHECK(r_sum + g_sum + b_sum == doctest::Approx(double(hits)).epsilon(1e-9));
}

TEST_CASE("misses give background and zero mask; mask mode is binary") {
    const SurfaceMesh m = facing_triangle();
    CameraPose pose;
    pose.distance = 2.0;
    const Vec3 bg{0.1, 0.2, 0.3};
    const MeshRenderOutput out = render_mesh(m, pose, 9, 9, MeshChannel::Color, bg);
    CHECK(out.mask[0] == 0.0);
    CHECK(out.rgb.at(0, 0, 0) == doctest::Approx(0.1));
    CHECK(out.rgb.at(0, 0, 2) == doctest::Approx(0.3));
    CHECK(out.tri[0] == -1);

    const MeshRenderOutput mask_out = render_mesh(m, pose, 9, 9, MeshChannel::Mask);
    for (std::size_t px = 0; px < mask_out.mask.size(); ++px) {
        CHECK((mask_out.mask[px] == 0.0 || mask_out.mask[px] == 1.0));
        CHECK(mask_out.rgb.at(int(px % 9), int(px / 9), 0) == mask_out.mask[px]);
    }
}

TEST_CASE("an empty mesh renders pure background") {
    SurfaceMesh m;
    CameraPose pose;
    const MeshRenderOutput out = render_mesh(m, pose, 4, 4, MeshChannel::Color, {0.7, 0.7, 0.7});
    for (double v : out.mask) CHECK(v == 0.0);
    CHECK(out.rgb.at(2, 2, 1) == doctest::Approx(0.7));
}

TEST_CASE("depth orders overlapping triangles nearest-first") {
    SurfaceMesh m = facing_triangle();
    // A second, larger triangle behind the first.
    m.verts.push_back({-0.5, -1.2, -1.0});
    m.verts.push_back({-0.5, 1.2, -1.0});
    m.verts.push_back({-0.5, 0, 1.4});
    m.colors.insert(m.colors.end(), 3, Vec3{1, 1, 0});
    m.tris.push_back({3, 4, 5});
    compute_vertex_normals(m);
    CameraPose pose;
    pose.distance = 2.0;
    const MeshRenderOutput out = render_mesh(m, pose, 9, 9, MeshChannel::Color);
    CHECK(out.tri[4 * 9 + 4] == 0); // front triangle wins the center pixel
    bool saw_back = false;
    for (int t : out.tri) saw_back = saw_back || t == 1;
    CHECK(saw_back); // back triangle visible around it
}

// The documented contract: normal-map pixel values differentiate w.r.t. sdf
// and offsets through the extraction chain, checked away from silhouettes.
TEST_CASE("normal-map gradients on a two-tet scene match finite differences") {
    TetScene s = two_tet_scene();
    Rng r(31);
    for (auto& v : s.offset_raw) v = r.uniform(-0.4, 0.4);

    CameraPose pose;
    pose.distance = 2.0;
    const int res = 24;

    const std::size_t ns = s.sdf.size(), no = s.offset_raw.size();
    std::vector<double> x;
    x.insert(x.end(), s.sdf.begin(), s.sdf.end());
    x.insert(x.end(), s.offset_raw.begin(), s.offset_raw.end());
    auto load = [&]() {
        std::copy(x.begin(), x.begin() + std::ptrdiff_t(ns), s.sdf.begin());
        std::copy(x.begin() + std::ptrdiff_t(ns), x.end(), s.offset_raw.begin());
    };

    load();
    MeshProvenance prov;
    const SurfaceMesh base_mesh = marching_tets(s, &prov);
    REQUIRE(!base_mesh.tris.empty());
    const MeshRenderOutput base = render_mesh(base_mesh, pose, res, res, MeshChannel::NormalMap);

    // Keep only pixels whose full 3x3 neighborhood is covered.
    std::vector<char> interior(base.mask.size(), 0);
    int n_interior = 0;
    for (int y = 1; y < res - 1; ++y)
        for (int xx = 1; xx < res - 1; ++xx) {
            bool ok = true;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    ok = ok && base.mask[std::size_t(y + dy) * res + std::size_t(xx + dx)] == 1.0;
            if (ok) {
                interior[std::size_t(y) * res + std::size_t(xx)] = 1;
                ++n_interior;
            }
        }
    REQUIRE(n_interior > 20);

    std::vector<double> coef(base.mask.size() * 3);
    Rng cr(32);
    for (auto& c : coef) c = cr.uniform(-1, 1);

    auto loss = [&]() {
        load();
        const SurfaceMesh m = marching_tets(s);
        const MeshRenderOutput out = render_mesh(m, pose, res, res, MeshChannel::NormalMap);
        double l = 0;
        for (std::size_t px = 0; px < out.mask.size(); ++px) {
            if (!interior[px]) continue;
            const int xx = int(px % res), yy = int(px / res);
            for (int c = 0; c < 3; ++c) l += coef[px * 3 + std::size_t(c)] * out.rgb.at(xx, yy, c);
        }
        return l;
    };

    load();
    std::vector<double> g_rgb(base.mask.size() * 3, 0.0);
    for (std::size_t px = 0; px < base.mask.size(); ++px)
        if (interior[px])
            for (int c = 0; c < 3; ++c) g_rgb[px * 3 + std::size_t(c)] = coef[px * 3 + std::size_t(c)];
    MeshRenderGrads rgrads(base_mesh);
    render_mesh_backward(base_mesh, pose, base, MeshChannel::NormalMap, g_rgb, rgrads);
    TetGrads tgrads(s);
    marching_tets_backward(s, base_mesh, prov, rgrads.verts, rgrads.colors, tgrads);
    std::vector<double> analytic;
    analytic.insert(analytic.end(), tgrads.sdf.begin(), tgrads.sdf.end());
    analytic.insert(analytic.end(), tgrads.offset_raw.begin(), tgrads.offset_raw.end());

    CHECK(max_grad_rel_err(loss, x, analytic, 1e-4, 1e-6) < 5e-3);
}

TEST_CASE("color-mode gradients reach vertex colors and geometry parameters") {
    TetScene s = two_tet_scene();
    Rng r(41);
    for (auto& v : s.offset_raw) v = r.uniform(-0.4, 0.4);
    for (auto& v : s.color_field.raw_color) v = r.uniform(-1, 1);

    CameraPose pose;
    pose.distance = 2.0;
    const int res = 16;

    const std::size_t ns = s.sdf.size(), no = s.offset_raw.size(), nc = s.color_field.raw_color.size();
    std::vector<double> x;
    x.insert(x.end(), s.sdf.begin(), s.sdf.end());
    x.insert(x.end(), s.offset_raw.begin(), s.offset_raw.end());
    x.insert(x.end(), s.color_field.raw_color.begin(), s.color_field.raw_color.end());
    auto load = [&]() {
        std::copy(x.begin(), x.begin() + std::ptrdiff_t(ns), s.sdf.begin());
        std::copy(x.begin() + std::ptrdiff_t(ns), x.begin() + std::ptrdiff_t(ns + no), s.offset_raw.begin());
        std::copy(x.begin() + std::ptrdiff_t(ns + no), x.end(), s.color_field.raw_color.begin());
    };

    load();
    MeshProvenance prov;
    const SurfaceMesh base_mesh = marching_tets(s, &prov);
    const MeshRenderOutput base = render_mesh(base_mesh, pose, res, res, MeshChannel::Color);
    std::vector<char> interior(base.mask.size(), 0);
    for (int y = 1; y < res - 1; ++y)
        for (int xx = 1; xx < res - 1; ++xx) {
            bool ok = true;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    ok = ok && base.mask[std::size_t(y + dy) * res + std::size_t(xx + dx)] == 1.0;
            interior[std::size_t(y) * res + std::size_t(xx)] = char(ok);
        }

    std::vector<double> coef(base.mask.size() * 3);
    Rng cr(42);
    for (auto& c : coef) c = cr.uniform(-1, 1);

    auto loss = [&]() {
        load();
        const MeshRenderOutput out = render_mesh(marching_tets(s), pose, res, res, MeshChannel::Color);
        double l = 0;
        for (std::size_t px = 0; px < out.mask.size(); ++px) {
            if (!interior[px]) continue;
            const int xx = int(px % res), yy = int(px / res);
            for (int c = 0; c < 3; ++c) l += coef[px * 3 + std::size_t(c)] * out.rgb.at(xx, yy, c);
        }
        return l;
    };

    load();
    std::vector<double> g_rgb(base.mask.size() * 3, 0.0);
    for (std::size_t px = 0; px < base.mask.size(); ++px)
        if (interior[px])
            for (int c = 0; c < 3; ++c) g_rgb[px * 3 + std::size_t(c)] = coef[px * 3 + std::size_t(c)];
    MeshRenderGrads rgrads(base_mesh);
    render_mesh_backward(base_mesh, pose, base, MeshChannel::Color, g_rgb, rgrads);
    TetGrads tgrads(s);
    marching_tets_backward(s, base_mesh, prov, rgrads.verts, rgrads.colors, tgrads);
    std::vector<double> analytic;
    analytic.insert(analytic.end(), tgrads.sdf.begin(), tgrads.sdf.end());
    analytic.insert(analytic.end(), tgrads.offset_raw.begin(), tgrads.offset_raw.end());
    analytic.insert(analytic.end(), tgrads.color_raw.begin(), tgrads.color_raw.end());

    CHECK(max_grad_rel_err(loss, x, analytic, 1e-4, 1e-6) < 5e-3);
}

TEST_CASE("flat sheets have zero normal-consistency loss") {
    SurfaceMesh m;
    m.verts = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
    m.colors.assign(4, Vec3{1, 1, 1});
    m.tris = {{0, 1, 2}, {1, 3, 2}};
    CHECK(normal_consistency_loss(m) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("orthogonal faces contribute 1 to normal consistency") {
    SurfaceMesh m;
    m.verts = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    m.colors.assign(4, Vec3{1, 1, 1});
    // Faces share edge (0,1); normals (0,0,1) and (0,-1,0).
    m.tris = {{0, 1, 2}, {0, 3, 1}};
    CHECK(normal_consistency_loss(m) == doctest::Approx(1.0));
}

TEST_CASE("smoothing a noisy sphere lowers normal consistency loss") {
    TetScene s;
    s.grid = make_tet_grid(8, 1.0);
    s.sdf.resize(s.grid.verts.size());
    for (std::size_t v = 0; v < s.grid.verts.size(); ++v) s.sdf[v] = 0.55 - norm(s.grid.verts[v]);
    s.offset_raw.assign(s.grid.verts.size() * 3, 0.0);
    s.color_field = make_field(2, 1.0);
    SurfaceMesh m = marching_tets(s);

    Rng r(55);
    SurfaceMesh noisy = m;
    for (auto& v : noisy.verts) v += Vec3{r.uniform(-1, 1), r.uniform(-1, 1), r.uniform(-1, 1)} * 0.01;
    const double before = normal_consistency_loss(noisy);
    CHECK(before > normal_consistency_loss(m));

    // One uniform Laplacian smoothing pass.
    std::vector<std::vector<int>> ring(noisy.verts.size());
    for (const auto& t : noisy.tris)
        for (int e = 0; e < 3; ++e) {
            ring[std::size_t(t[std::size_t(e)])].push_back(t[std::size_t((e + 1) % 3)]);
            ring[std::size_t(t[std::size_t((e + 1) % 3)])].push_back(t[std::size_t(e)]);
        }
    SurfaceMesh smoothed = noisy;
    for (std::size_t v = 0; v < noisy.verts.size(); ++v) {
        if (ring[v].empty()) continue;
        Vec3 mean{0, 0, 0};
        for (int u : ring[v]) mean += noisy.verts[std::size_t(u)];
        smoothed.verts[v] = noisy.verts[v] + (mean / double(ring[v].size()) - noisy.verts[v]) * 0.5;
    }
    CHECK(normal_consistency_loss(smoothed) < before);
}

TEST_CASE("laplacian loss of a displaced hex-star matches the closed form") {
    SurfaceMesh m;
    const double d = 0.3;
    m.verts.push_back({0, 0, d});
    for (int i = 0; i < 6; ++i) {
        const double a = deg2rad(60.0 * i);
        m.verts.push_back({std::cos(a), std::sin(a), 0});
    }
    m.colors.assign(7, Vec3{1, 1, 1});
    for (int i = 0; i < 6; ++i) m.tris.push_back({0, 1 + i, 1 + (i + 1) % 6});
    // Ring vertices sit at 2/3 of their neighbor centroid offset plus a d/3
    // out-of-plane term; the center contributes d^2 exactly.
    const double expect = (6.0 * (4.0 / 9.0 + d * d / 9.0) + d * d) / 7.0;
    CHECK(laplacian_loss(m) == doctest::Approx(expect).epsilon(1e-12));

    SurfaceMesh shifted = m;
    for (auto& v : shifted.verts) v += Vec3{0.4, -0.2, 0.9};
    CHECK(laplacian_loss(shifted) == doctest::Approx(laplacian_loss(m)).epsilon(1e-9));
}

TEST_CASE("laplacian loss is zero when every vertex sits at its ring centroid") {
    SurfaceMesh m;
    m.verts = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
    m.colors.assign(4, Vec3{1, 1, 1});
    m.tris = {{0, 1, 2}, {1, 3, 2}};
    // A single flat quad: no vertex is at its ring centroid, but translation
    // invariance and nonnegativity still hold.
    CHECK(laplacian_loss(m) >= 0.0);
    SurfaceMesh empty_mesh;
    CHECK(laplacian_loss(empty_mesh) == 0.0);
}

TEST_CASE("regularizer gradients match finite differences") {
    TetScene s;
    s.grid = make_tet_grid(3, 1.0);
    s.sdf.resize(s.grid.verts.size());
    for (std::size_t v = 0; v < s.grid.verts.size(); ++v) s.sdf[v] = 0.55 - norm(s.grid.verts[v]);
    s.offset_raw.assign(s.grid.verts.size() * 3, 0.0);
    s.color_field = make_field(2, 1.0);
    SurfaceMesh m = marching_tets(s);
    Rng r(61);
    for (auto& v : m.verts) v += Vec3{r.uniform(-1, 1), r.uniform(-1, 1), r.uniform(-1, 1)} * 0.02;

    std::vector<double> x(m.verts.size() * 3);
    for (std::size_t i = 0; i < m.verts.size(); ++i)
        for (int c = 0; c < 3; ++c) x[i * 3 + std::size_t(c)] = m.verts[i][c];
    auto load = [&]() {
        for (std::size_t i = 0; i < m.verts.size(); ++i)
            for (int c = 0; c < 3; ++c) m.verts[i][c] = x[i * 3 + std::size_t(c)];
    };

    SUBCASE("normal consistency") {
        auto loss = [&]() {
            load();
            return normal_consistency_loss(m);
        };
        load();
        std::vector<Vec3> g;
        normal_consistency_loss(m, &g);
        std::vector<double> analytic(x.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            for (int c = 0; c < 3; ++c) analytic[i * 3 + std::size_t(c)] = g[i][c];
        CHECK(max_grad_rel_err(loss, x, analytic, 1e-6, 1e-8) < 1e-4);
    }

    SUBCASE("laplacian") {
        auto loss = [&]() {
            load();
            return laplacian_loss(m);
        };
        load();
        std::vector<Vec3> g;
        laplacian_loss(m, &g);
        std::vector<double> analytic(x.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            for (int c = 0; c < 3; ++c) analytic[i * 3 + std::size_t(c)] = g[i][c];
        CHECK(max_grad_rel_err(loss, x, analytic, 1e-6, 1e-8) < 1e-4);
    }
}

TEST_CASE("normal smoothness is zero for a linear ramp and positive for a radial field") {
    VoxelRadianceField ramp = make_field(4, 1.0);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 4; ++i)
                ramp.raw_density[ramp.vidx(i, j, k)] = inv_softplus(2.0 + 0.5 * ramp.vertex_pos(i, j, k).x);
    std::vector<Vec3> pts{{0.1, 0.2, -0.3}, {-0.4, 0.1, 0.2}};
    std::vector<Vec3> jit{{0.3, -0.2, 0.1}, {-0.1, 0.2, 0.3}};
    CHECK(normal_smoothness_loss(ramp, pts, jit) == doctest::Approx(0.0).epsilon(1e-9));

    VoxelRadianceField radial = make_field(5, 1.0);
    for (int k = 0; k < 5; ++k)
        for (int j = 0; j < 5; ++j)
            for (int i = 0; i < 5; ++i)
                radial.raw_density[radial.vidx(i, j, k)] =
                    inv_softplus(0.5 + norm2(radial.vertex_pos(i, j, k)));
    const Vec3 p{0.3, 0.2, 0.1};
    CHECK(normal_smoothness_loss(radial, {p}, {p * -2.0}) > 1.0);

    // Zero jitter compares a normal with itself.
    CHECK(normal_smoothness_loss(radial, {p}, {Vec3{0, 0, 0}}) == doctest::Approx(0.0));
}

TEST_CASE("normal smoothness skips zero-gradient points") {
    VoxelRadianceField flat = make_field(3, 1.0);
    std::fill(flat.raw_density.begin(), flat.raw_density.end(), 1.0);
    CHECK(normal_smoothness_loss(flat, {Vec3{0.1, 0.1, 0.1}}, {Vec3{0.2, 0, 0}}) == 0.0);
}

TEST_CASE("normal smoothness gradients match finite differences") {
    VoxelRadianceField f = make_field(3, 1.0, 6.0, 0.5);
    Rng r(71);
    for (auto& v : f.raw_density) v += r.uniform(-0.3, 0.3);
    std::vector<double> x = f.raw_density;
    std::vector<Vec3> pts{{0.31, 0.22, 0.11}, {-0.25, 0.33, -0.12}, {0.05, -0.41, 0.28}};
    std::vector<Vec3> jit{{0.11, -0.07, 0.05}, {-0.06, 0.09, 0.1}, {0.08, 0.03, -0.09}};

    auto loss = [&]() {
        f.raw_density = x;
        return normal_smoothness_loss(f, pts, jit);
    };
    f.raw_density = x;
    FieldGrads grads(f);
    const double base = normal_smoothness_loss(f, pts, jit, &grads);
    CHECK(base > 0.0);
    CHECK(max_grad_rel_err(loss, x, grads.raw_density, 1e-6, 1e-8) < 1e-4);
}

} // TEST_SUITE
