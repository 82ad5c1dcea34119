#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "x3d/camera.hpp"
#include "x3d/encoder.hpp"
#include "x3d/errors.hpp"
#include "x3d/field.hpp"
#include "x3d/image.hpp"
#include "x3d/losses.hpp"
#include "x3d/mesh_losses.hpp"
#include "x3d/mesh_render.hpp"
#include "x3d/prior.hpp"
#include "x3d/rng.hpp"
#include "x3d/schedule.hpp"
#include "x3d/tet.hpp"
#include "x3d/volume_render.hpp"

namespace x3d {

// Finite-difference verification of every hand-written adjoint. Each op
// freezes its stochastic inputs (noise draws, denoiser targets, augmentation
// streams) so the probed map is deterministic and smooth, evaluates the
// analytic gradient once, then compares central differences component by
// component.

struct FdScale {
    int field_res = 4;        // voxel grid resolution for field-space ops
    int render_res = 4;       // volume render width and height
    int n_samples = 8;        // samples per ray in the volume render
    int mesh_render_res = 24; // rasterized render for the geometry chain
    double step = 1e-4;
    double tol = 1e-3;
    double grad_floor = 1e-6; // relative-error denominator floor
};

inline FdScale fd_micro_scale() { return {4, 4, 8, 24, 1e-4, 1e-3, 1e-6}; }
inline FdScale fd_small_scale() { return {6, 8, 12, 32, 1e-4, 1e-3, 1e-6}; }

inline FdScale fd_scale_by_name(const std::string& name) {
    if (name == "micro") return fd_micro_scale();
    if (name == "small") return fd_small_scale();
    throw ConfigError("unknown gradient-check scale: " + name);
}

struct FdResult {
    std::string op;
    double max_rel_err = 0;
    double tol = 0;
    bool pass = false;
};

// Worst-component gap between central differences of `loss` and `analytic`,
// relative to max(|fd|, |analytic|, floor). `loss` must read the current
// contents of x on every call; x is restored before returning.
template <class F>
inline double fd_max_rel_err(F&& loss, std::vector<double>& x,
                             const std::vector<double>& analytic, double step, double floor) {
    if (analytic.size() != x.size())
        throw DomainError("fd_max_rel_err: gradient size does not match parameter size");
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + step;
        const double lp = loss();
        x[i] = keep - step;
        const double lm = loss();
        x[i] = keep;
        const double fd = (lp - lm) / (2.0 * step);
        const double denom = std::max({std::abs(fd), std::abs(analytic[i]), floor});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
    }
    return worst;
}

namespace fd_detail {

// Asymmetric blob field with deterministic density and color ripples so no
// gradient component degenerates to zero by symmetry. The amplitude is raised
// until every ray's accumulated opacity clears the depth-variance gate by a
// safe margin, keeping the gate's indicator constant under the probe step.
inline VoxelRadianceField make_fd_field(const FdScale& sc, const RayBatch& rays) {
    double amplitude = 6.0;
    for (int attempt = 0; attempt < 40; ++attempt) {
        VoxelRadianceField f = make_field(sc.field_res, 1.0, amplitude);
        for (std::size_t i = 0; i < f.raw_density.size(); ++i)
            f.raw_density[i] += 0.3 * std::sin(0.7 * double(i) + 0.2);
        for (std::size_t i = 0; i < f.raw_color.size(); ++i)
            f.raw_color[i] = 0.4 * std::sin(0.3 * double(i) + 1.1);
        const RenderOutput out = render_volume(f, rays, sc.n_samples, nullptr);
        bool clear = true;
        for (double m : out.mask) clear = clear && std::abs(m - 0.5) > 0.01;
        if (clear) return f;
        amplitude += 0.7;
    }
    throw DomainError("fd field: could not keep the opacity gate away from the probe");
}

inline Image make_fd_image(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    Image img(w, h, 3);
    for (double& v : img.data) v = rng.uniform(0.05, 0.95);
    return img;
}

inline Latent make_fd_eps(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    Latent eps = make_latent(3, h, w);
    for (double& v : eps.data) v = rng.normal();
    return eps;
}

inline std::vector<double> make_fd_mean(std::size_t n) {
    std::vector<double> mean(n);
    for (std::size_t i = 0; i < n; ++i) mean[i] = 0.5 + 0.2 * std::sin(0.5 * double(i));
    return mean;
}

// Hand-built two-tet complex: a shared interior face and sdf signs placing
// the crossing strictly inside both tets.
inline TetScene fd_two_tet_scene() {
    TetScene scene;
    scene.grid.verts = {{0.0, -0.5, -0.4}, {0.0, 0.5, -0.4}, {0.05, 0.0, 0.55},
                        {-0.55, 0.0, 0.05}, {0.55, 0.0, 0.05}};
    scene.grid.tets = {{0, 1, 2, 3}, {0, 1, 2, 4}};
    scene.grid.cell_size = 1.0;
    scene.grid.half_extent = 1.0;
    scene.sdf = {-0.8, -0.7, -0.9, 0.75, 0.85};
    scene.offset_raw.assign(scene.grid.verts.size() * 3, 0.0);
    scene.color_field = make_field(3, 1.0);
    for (std::size_t i = 0; i < scene.color_field.raw_color.size(); ++i)
        scene.color_field.raw_color[i] = 0.4 * std::sin(0.9 * double(i));
    return scene;
}

// Shared state for the ops that differentiate a loss through the volume
// render into the field parameters.
struct FieldProbe {
    FdScale sc;
    CameraPose pose{20.0, 30.0, 2.5, 40.0};
    RayBatch rays;
    VoxelRadianceField field;
    std::vector<double> x; // raw_density then raw_color

    explicit FieldProbe(const FdScale& scale) : sc(scale) {
        rays = generate_rays(pose, sc.render_res, sc.render_res);
        field = make_fd_field(sc, rays);
        x = field.raw_density;
        x.insert(x.end(), field.raw_color.begin(), field.raw_color.end());
    }

    void load() {
        const std::size_t nd = field.raw_density.size();
        std::copy(x.begin(), x.begin() + long(nd), field.raw_density.begin());
        std::copy(x.begin() + long(nd), x.end(), field.raw_color.begin());
    }

    RenderOutput render(RenderCache* cache = nullptr) {
        load();
        return render_volume(field, rays, sc.n_samples, nullptr, {1, 1, 1}, cache);
    }

    // Pulls per-ray cotangents back to the parameter vector.
    std::vector<double> pullback(const RenderCache& cache, const RenderOutput& out,
                                 const RenderGrads& grads) {
        FieldGrads fg(field);
        render_volume_backward(field, cache, out, grads, fg);
        std::vector<double> g = fg.raw_density;
        g.insert(g.end(), fg.raw_color.begin(), fg.raw_color.end());
        return g;
    }
};

inline FdResult finish(const std::string& op, double err, double tol) {
    return {op, err, tol, err < tol};
}

inline FdResult fd_op_ms(const FdScale& sc) {
    const int r = std::max(8, sc.render_res); // encoder minimum input
    Image x = make_fd_image(r, r, 101);
    const ToyEncoder enc(16, 2024);
    const std::vector<double> prompt = enc.embed(make_fd_image(r, r, 202));
    AugmentationSpec spec;
    spec.n = 2;
    const MsWeights mw;

    Rng grad_rng(7);
    std::vector<Image> grads;
    ms_loss(prompt, {x}, spec, mw, enc, grad_rng, &grads);

    auto loss = [&]() {
        Rng rng(7); // same augmentation stream on every evaluation
        return ms_loss(prompt, {x}, spec, mw, enc, rng).loss;
    };
    const double err = fd_max_rel_err(loss, x.data, grads[0].data, sc.step, sc.grad_floor);
    return finish("ms", err, sc.tol);
}

inline FdResult fd_op_aug_sds(const FdScale& sc) {
    FieldProbe probe(sc);
    const NoiseSchedule sched(0.05, 5.0, 8);
    const int r = sc.render_res;
    GmPrior prior({{1.0, make_fd_mean(std::size_t(r) * r * 3), 0.3}}, sched);
    const PriorCondition cond = embedding_condition({1.0, 0.0});
    const Latent eps = make_fd_eps(r, r, 11);
    const double t = 0.45;
    LossWeights w;

    RenderCache cache;
    const RenderOutput base = probe.render(&cache);
    const AugSdsTargets frozen = aug_sds_targets(prior, sched, base.rgb, t, cond, eps, w);

    Image g_pix(r, r, 3);
    std::vector<double> g_zvar;
    aug_sds_loss(prior, sched, base.rgb, t, cond, eps, w, &base, &g_pix, &g_zvar, &frozen);
    RenderGrads rg;
    rg.rgb = g_pix.data;
    rg.zvar = g_zvar;
    const std::vector<double> analytic = probe.pullback(cache, base, rg);

    auto loss = [&]() {
        const RenderOutput out = probe.render();
        return aug_sds_loss(prior, sched, out.rgb, t, cond, eps, w, &out, nullptr, nullptr, &frozen)
            .loss;
    };
    const double err = fd_max_rel_err(loss, probe.x, analytic, sc.step, sc.grad_floor);
    return finish("aug_sds", err, sc.tol);
}

inline FdResult fd_op_cds(const FdScale& sc) {
    Image x = make_fd_image(sc.render_res, sc.render_res, 33);
    const NoiseSchedule sched(0.05, 5.0, 8);
    const std::size_t dim = x.data.size();
    std::vector<double> lo = make_fd_mean(dim);
    std::vector<double> hi = lo;
    for (double& v : hi) v = 1.0 - v;
    GmPrior prior({{0.6, lo, 0.25}, {0.4, hi, 0.35}}, sched);
    const PriorCondition cond = embedding_condition({1.0, 0.0});
    const Latent eps = make_fd_eps(x.width, x.height, 44);
    const auto [t1, t2] = sched.adjacent_pair(3);
    LossWeights w;

    const CdsTargets frozen = cds_targets(prior, sched, x, t1, t2, cond, eps, w);
    Image g_pix(x.width, x.height, 3);
    cds_loss(prior, sched, x, t1, t2, cond, eps, w, &g_pix, &frozen);

    auto loss = [&]() { return cds_loss(prior, sched, x, t1, t2, cond, eps, w, nullptr, &frozen); };
    const double err = fd_max_rel_err(loss, x.data, g_pix.data, sc.step, sc.grad_floor);
    return finish("cds", err, sc.tol);
}

inline FdResult fd_op_sds3d(const FdScale& sc) {
    FieldProbe probe(sc);
    const NoiseSchedule sched(0.05, 5.0, 8);
    const int r = sc.render_res;
    GmPrior prior({{1.0, make_fd_mean(std::size_t(r) * r * 3), 0.3}}, sched);
    ReferenceView ref;
    ref.x_r = make_fd_image(r, r, 55);
    ref.mask = Image(r, r, 1, 1.0);
    ref.pose = CameraPose{15.0, 0.0, 2.5, 40.0};
    const Latent eps = make_fd_eps(r, r, 66);
    const double t = 0.45;
    LossWeights w;

    RenderCache cache;
    const RenderOutput base = probe.render(&cache);
    const Sds3dTargets frozen = sds3d_targets(prior, sched, base.rgb, t, ref, probe.pose, eps, w);

    Image g_pix(r, r, 3);
    sds3d_grad(prior, sched, base.rgb, t, ref, probe.pose, eps, w, &g_pix, &frozen);
    RenderGrads rg;
    rg.rgb = g_pix.data;
    const std::vector<double> analytic = probe.pullback(cache, base, rg);

    auto loss = [&]() {
        const RenderOutput out = probe.render();
        return sds3d_grad(prior, sched, out.rgb, t, ref, probe.pose, eps, w, nullptr, &frozen);
    };
    const double err = fd_max_rel_err(loss, probe.x, analytic, sc.step, sc.grad_floor);
    return finish("sds3d", err, sc.tol);
}

inline FdResult fd_op_ref(const FdScale& sc) {
    FieldProbe probe(sc);
    const int r = sc.render_res;
    ReferenceView ref;
    ref.x_r = make_fd_image(r, r, 77);
    ref.mask = Image(r, r, 1);
    for (int y = 0; y < r; ++y)
        for (int x = 0; x < r; ++x) ref.mask.at(x, y, 0) = double((x + y) % 2);
    ref.pose = probe.pose;
    LossWeights w;

    RenderCache cache;
    const RenderOutput base = probe.render(&cache);
    Image g_pix(r, r, 3);
    std::vector<double> g_alpha;
    ref_loss(base.rgb, base.mask, ref, w, &g_pix, &g_alpha);
    RenderGrads rg;
    rg.rgb = g_pix.data;
    rg.mask = g_alpha;
    const std::vector<double> analytic = probe.pullback(cache, base, rg);

    auto loss = [&]() {
        const RenderOutput out = probe.render();
        return ref_loss(out.rgb, out.mask, ref, w).loss;
    };
    const double err = fd_max_rel_err(loss, probe.x, analytic, sc.step, sc.grad_floor);
    return finish("ref", err, sc.tol);
}

// Vertex-space check for a mesh loss with assign-semantics gradients. The
// two-tet patch has no shared triangle edge, so these ops extract a small
// sphere from a 2-cell tet grid and bend it; that gives interior edges with
// disagreeing normals and non-uniform vertex stars.
template <class Loss>
inline FdResult fd_mesh_vertex_op(const std::string& name, const FdScale& sc, Loss&& call) {
    TetScene scene;
    scene.grid = make_tet_grid(2, 1.0);
    scene.sdf.resize(scene.grid.verts.size());
    for (std::size_t v = 0; v < scene.grid.verts.size(); ++v)
        scene.sdf[v] = 0.45 - norm(scene.grid.verts[v]);
    scene.offset_raw.assign(scene.grid.verts.size() * 3, 0.0);
    scene.color_field = make_field(3, 1.0);
    SurfaceMesh mesh = marching_tets(scene);
    for (std::size_t v = 0; v < mesh.verts.size(); ++v) {
        const double a = double(v);
        mesh.verts[v] += Vec3{0.02 * std::sin(1.3 * a), 0.02 * std::cos(0.9 * a + 0.4),
                              0.02 * std::sin(2.1 * a + 1.7)};
    }
    std::vector<double> x(mesh.verts.size() * 3);
    for (std::size_t v = 0; v < mesh.verts.size(); ++v) {
        x[v * 3 + 0] = mesh.verts[v].x;
        x[v * 3 + 1] = mesh.verts[v].y;
        x[v * 3 + 2] = mesh.verts[v].z;
    }
    auto load = [&]() {
        for (std::size_t v = 0; v < mesh.verts.size(); ++v)
            mesh.verts[v] = {x[v * 3 + 0], x[v * 3 + 1], x[v * 3 + 2]};
    };
    std::vector<Vec3> g_verts;
    call(mesh, &g_verts);
    std::vector<double> analytic(x.size(), 0.0);
    for (std::size_t v = 0; v < g_verts.size(); ++v) {
        analytic[v * 3 + 0] = g_verts[v].x;
        analytic[v * 3 + 1] = g_verts[v].y;
        analytic[v * 3 + 2] = g_verts[v].z;
    }
    auto loss = [&]() {
        load();
        return call(mesh, nullptr);
    };
    const double err = fd_max_rel_err(loss, x, analytic, sc.step, sc.grad_floor);
    load();
    return finish(name, err, sc.tol);
}

inline FdResult fd_op_nc(const FdScale& sc) {
    return fd_mesh_vertex_op("nc", sc, [](const SurfaceMesh& m, std::vector<Vec3>* g) {
        return normal_consistency_loss(m, g);
    });
}

inline FdResult fd_op_ls(const FdScale& sc) {
    return fd_mesh_vertex_op("ls", sc, [](const SurfaceMesh& m, std::vector<Vec3>* g) {
        return laplacian_loss(m, g);
    });
}

inline FdResult fd_op_nv(const FdScale& sc) {
    FieldProbe probe(sc);
    const double h = 2.0 / double(sc.field_res - 1);
    const std::vector<Vec3> points = {{0.1, 0.2, -0.05}, {-0.2, 0.1, 0.15}, {0.05, -0.15, 0.2}};
    std::vector<Vec3> jitters = {{1.0, 0.3, -0.2}, {-0.4, 1.0, 0.1}, {0.2, -0.3, 1.0}};
    for (Vec3& j : jitters) j = normalized(j) * (0.5 * h);

    probe.load();
    FieldGrads fg(probe.field);
    normal_smoothness_loss(probe.field, points, jitters, &fg);
    std::vector<double> analytic = fg.raw_density;
    analytic.insert(analytic.end(), fg.raw_color.begin(), fg.raw_color.end());

    auto loss = [&]() {
        probe.load();
        return normal_smoothness_loss(probe.field, points, jitters);
    };
    const double err = fd_max_rel_err(loss, probe.x, analytic, sc.step, sc.grad_floor);
    return finish("nv", err, sc.tol);
}

// Geometry chain: a fixed linear functional over interior pixels of a
// normal-map render, differentiated through the rasterizer and the marching
// tetrahedra extraction into sdf and offset parameters. Pixels whose 3x3
// neighborhood is not fully covered are excluded; coverage there changes
// discontinuously while the probe step cannot move the silhouette a pixel.
inline FdResult fd_op_mesh_geom(const FdScale& sc) {
    TetScene scene = fd_two_tet_scene();
    const CameraPose pose{15.0, 30.0, 2.5, 40.0};
    const int r = sc.mesh_render_res;

    MeshProvenance prov;
    const SurfaceMesh base_mesh = marching_tets(scene, &prov);
    const MeshRenderOutput base = render_mesh(base_mesh, pose, r, r, MeshChannel::NormalMap);

    Rng coef_rng(770);
    std::vector<double> coef(std::size_t(r) * r * 3, 0.0);
    std::size_t interior = 0;
    for (int y = 1; y < r - 1; ++y)
        for (int x = 1; x < r - 1; ++x) {
            bool covered = true;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    covered = covered && base.mask[std::size_t(y + dy) * r + std::size_t(x + dx)] == 1.0;
            if (!covered) continue;
            ++interior;
            for (int c = 0; c < 3; ++c)
                coef[(std::size_t(y) * r + std::size_t(x)) * 3 + c] = coef_rng.uniform(-1.0, 1.0);
        }
    if (interior == 0) throw DomainError("mesh geometry probe: no interior pixels at this scale");

    std::vector<double> x = scene.sdf;
    x.insert(x.end(), scene.offset_raw.begin(), scene.offset_raw.end());
    auto load = [&]() {
        const std::size_t ns = scene.sdf.size();
        std::copy(x.begin(), x.begin() + long(ns), scene.sdf.begin());
        std::copy(x.begin() + long(ns), x.end(), scene.offset_raw.begin());
    };

    MeshRenderGrads mg(base_mesh);
    render_mesh_backward(base_mesh, pose, base, MeshChannel::NormalMap, coef, mg);
    TetGrads tg(scene);
    marching_tets_backward(scene, base_mesh, prov, mg.verts, mg.colors, tg);
    std::vector<double> analytic = tg.sdf;
    analytic.insert(analytic.end(), tg.offset_raw.begin(), tg.offset_raw.end());

    auto loss = [&]() {
        load();
        const SurfaceMesh m = marching_tets(scene);
        const MeshRenderOutput out = render_mesh(m, pose, r, r, MeshChannel::NormalMap);
        double acc = 0.0;
        for (std::size_t i = 0; i < coef.size(); ++i) acc += coef[i] * out.rgb.data[i];
        return acc;
    };
    const double err = fd_max_rel_err(loss, x, analytic, sc.step, sc.grad_floor);
    return finish("mesh_geom", err, sc.tol);
}

} // namespace fd_detail

inline std::vector<std::string> fd_op_names() {
    return {"ms", "aug_sds", "cds", "sds3d", "ref", "nc", "ls", "nv", "mesh_geom"};
}

inline std::vector<FdResult> run_fd_checks(const FdScale& scale, const std::string& only_op = "") {
    using Runner = FdResult (*)(const FdScale&);
    struct Entry {
        const char* name;
        Runner run;
    };
    static const Entry entries[] = {
        {"ms", fd_detail::fd_op_ms},         {"aug_sds", fd_detail::fd_op_aug_sds},
        {"cds", fd_detail::fd_op_cds},       {"sds3d", fd_detail::fd_op_sds3d},
        {"ref", fd_detail::fd_op_ref},       {"nc", fd_detail::fd_op_nc},
        {"ls", fd_detail::fd_op_ls},         {"nv", fd_detail::fd_op_nv},
        {"mesh_geom", fd_detail::fd_op_mesh_geom},
    };
    std::vector<FdResult> results;
    bool matched = false;
    for (const Entry& e : entries) {
        if (!only_op.empty() && only_op != e.name) continue;
        matched = true;
        results.push_back(e.run(scale));
    }
    if (!only_op.empty() && !matched)
        throw ConfigError("unknown gradient-check op: " + only_op);
    return results;
}

} // namespace x3d
