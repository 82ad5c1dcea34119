#pragma once
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "x3d/camera.hpp"
#include "x3d/checkpoint.hpp"
#include "x3d/errors.hpp"
#include "x3d/field.hpp"
#include "x3d/log.hpp"
#include "x3d/losses.hpp"
#include "x3d/mesh_losses.hpp"
#include "x3d/mesh_render.hpp"
#include "x3d/optim.hpp"
#include "x3d/tet.hpp"
#include "x3d/volume_render.hpp"

namespace x3d {

struct PhaseConfig {
    int id = 1;
    int iterations = 400;
    int render_res = 64;
    int n_samples = 24;  // volume samples per ray, radiance phase only
    CameraRanges cameras;
    OptimKind optimizer = OptimKind::Adam;
    double lr = 0.01;
    int views_per_iteration = 1;
    double t_min = 0.02, t_max = 0.98;  // score-distillation timestep range
    double w_nv = 0.1;                  // field normal smoothness (phase 1)
    double w_nc = 0.5;                  // mesh normal consistency (phase 2)
    double w_ls = 0.5;                  // mesh Laplacian smoothing (phase 2)
    int nv_max_points = 256;            // surface point budget for the phase-1 regularizer
};

inline PhaseConfig default_phase_config(int id) {
    if (id < 1 || id > 3) throw DomainError("phase id must be 1, 2, or 3");
    PhaseConfig c;
    c.id = id;
    c.cameras = camera_ranges_for_phase(id);
    if (id == 1) {
        c.iterations = 400;
        c.render_res = 64;
        c.optimizer = OptimKind::Adam;
        c.lr = 0.01;
    } else if (id == 2) {
        c.iterations = 200;
        c.render_res = 128;
        c.optimizer = OptimKind::Adan;
        c.lr = 0.01;
    } else {
        c.iterations = 200;
        c.render_res = 128;
        c.optimizer = OptimKind::Adam;
        c.lr = 0.001;
    }
    return c;
}

// Everything a run shares across phases. Priors are per role; the _normal
// variants, when set, stand in during phase 2 where the diffusion input is a
// normal map. All randomness flows through the single generator.
struct PipelineContext {
    const Denoiser* prior2d = nullptr;
    const Denoiser* prior3d = nullptr;
    const Denoiser* prior2d_normal = nullptr;
    const Denoiser* prior3d_normal = nullptr;
    const ImageEncoder* encoder = nullptr;
    std::vector<double> prompt;
    AugmentationSpec aug;
    NoiseSchedule schedule;
    LossWeights weights;
    ReferenceView ref;
    Rng rng{0};
    std::string out_dir;  // empty: no checkpoint files
    int checkpoint_every = 100;
    std::uint64_t config_hash = 0;
    double convert_threshold = 10.0;
    int tet_cells = 0;  // 0: match the field resolution
    std::ostream* losses_log = nullptr;
    LossCallCounts counts;
};

struct PipelineState {
    VoxelRadianceField field;
    TetScene tet;
    bool converted = false;
    int phase = 1;      // phase the state is currently in
    int iteration = 0;  // completed iterations within that phase
    std::vector<OptimState> optim;
};

inline PipelineState make_initial_state(int field_res, double half_extent,
                                        double blob_amplitude = 3.0, double blob_stddev = 0.35) {
    PipelineState st;
    st.field = make_field(field_res, half_extent, blob_amplitude, blob_stddev);
    return st;
}

// Density-threshold isosurface lifted onto the deformable tet grid. The
// returned scene owns the live color parameters for the later phases; the
// radiance field it came from is not consulted again.
inline TetScene convert_nerf_to_dmtet(const VoxelRadianceField& field, double threshold = 10.0,
                                      int tet_cells = 0) {
    if (tet_cells <= 0) tet_cells = field.res;
    TetScene scene = field_to_sdf(field, make_tet_grid(tet_cells, field.half_extent), threshold);
    if (marching_tets(scene).empty()) {
        char buf[128];
        std::snprintf(buf, sizeof(buf),
                      "no surface crosses the isosurface threshold %g; try a lower threshold",
                      threshold);
        throw ConversionError(buf);
    }
    return scene;
}

struct PhaseOutcome {
    int completed = 0;
    int skipped = 0;
    LossCallCounts counts;  // calls made during this phase run
};

namespace detail {

struct IterLog {
    double ms = 0, sds = 0, cds = 0, sds3d = 0, ref = 0, nz = 0, reg = 0, total = 0;
};

inline void write_loss_record(PipelineContext& ctx, int phase, int iter, const IterLog& row) {
    if (!ctx.losses_log) return;
    nlohmann::ordered_json j;
    j["iter"] = iter;
    j["phase"] = phase;
    j["ms"] = row.ms;
    j["sds"] = row.sds;
    j["cds"] = row.cds;
    j["sds3d"] = row.sds3d;
    j["ref"] = row.ref;
    j["nz"] = row.nz;
    j["reg"] = row.reg;
    j["total"] = row.total;
    (*ctx.losses_log) << j.dump() << "\n";
    ctx.losses_log->flush();
}

inline void accumulate(IterLog& acc, const HybridResult& h, PlanarPhase pp) {
    acc.ms += h.planar.ms;
    (pp == PlanarPhase::S ? acc.sds : acc.cds) += h.planar.branch;
    acc.nz += h.planar.nz;
    acc.sds3d += h.stereo.sds3d;
    acc.ref += h.stereo.ref;
    acc.total += h.loss;
}

inline void scale(IterLog& acc, double s) {
    acc.ms *= s;
    acc.sds *= s;
    acc.cds *= s;
    acc.nz *= s;
    acc.sds3d *= s;
    acc.ref *= s;
    acc.total *= s;
}

inline void axpy(std::vector<double>& y, double a, const std::vector<double>& x) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

inline void scale_vec(std::vector<double>& y, double s) {
    for (double& v : y) v *= s;
}

inline Latent draw_eps(int res, Rng& rng) {
    Latent eps = make_latent(3, res, res);
    for (double& v : eps.data) v = rng.normal();
    return eps;
}

} // namespace detail

inline CheckpointData snapshot_state(const PipelineContext& ctx, const PipelineState& st) {
    CheckpointData ck;
    ck.phase = st.phase;
    ck.iteration = st.iteration;
    ck.config_hash = ctx.config_hash;
    ck.params.emplace_back("field.density", st.field.raw_density);
    ck.params.emplace_back("field.color", st.field.raw_color);
    if (st.converted) {
        ck.params.emplace_back("tet.sdf", st.tet.sdf);
        ck.params.emplace_back("tet.offset", st.tet.offset_raw);
        ck.params.emplace_back("tet.color", st.tet.color_field.raw_color);
    }
    for (std::size_t i = 0; i < st.optim.size(); ++i)
        ck.optim.emplace_back("group" + std::to_string(i), st.optim[i]);
    ck.rng_state = ctx.rng.state();
    return ck;
}

// Inverse of snapshot_state over a freshly initialized state: the field must
// already have the configured resolution so shapes can be validated.
inline void restore_state(const CheckpointData& ck, PipelineContext& ctx, PipelineState& st) {
    if (ck.config_hash != ctx.config_hash)
        throw ConfigError("checkpoint was written under a different configuration");
    bool has_tet = false;
    for (const auto& [name, data] : ck.params) {
        if (name == "field.density") {
            if (data.size() != st.field.raw_density.size())
                throw ConfigError("checkpoint field resolution does not match the configuration");
            st.field.raw_density = data;
        } else if (name == "field.color") {
            st.field.raw_color = data;
        } else if (name == "tet.sdf") {
            has_tet = true;
        }
    }
    if (has_tet) {
        const int cells = ctx.tet_cells > 0 ? ctx.tet_cells : st.field.res;
        st.tet.grid = make_tet_grid(cells, st.field.half_extent);
        st.tet.color_field = st.field;
        for (const auto& [name, data] : ck.params) {
            if (name == "tet.sdf") {
                if (data.size() != st.tet.grid.verts.size())
                    throw ConfigError("checkpoint tet resolution does not match the configuration");
                st.tet.sdf = data;
            } else if (name == "tet.offset") {
                st.tet.offset_raw = data;
            } else if (name == "tet.color") {
                st.tet.color_field.raw_color = data;
            }
        }
        st.converted = true;
    }
    st.optim.clear();
    for (const auto& [name, opt] : ck.optim) st.optim.push_back(opt);
    st.phase = ck.phase;
    st.iteration = ck.iteration;
    ctx.rng.set_state(ck.rng_state);
}

inline void save_checkpoint_files(PipelineContext& ctx, const PipelineState& st) {
    if (ctx.out_dir.empty()) return;
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(ctx.out_dir) / "checkpoints";
    fs::create_directories(dir);
    char name[64];
    std::snprintf(name, sizeof(name), "phase%d_iter%06lld.x3d", st.phase,
                  (long long)st.iteration);
    const CheckpointData ck = snapshot_state(ctx, st);
    write_checkpoint((dir / name).string(), ck);
    write_checkpoint((dir / "latest.x3d").string(), ck);
}

namespace detail {

inline void abort_check(const PhaseConfig& cfg, int iter, int skipped, const std::string& why) {
    if (double(skipped) > 0.05 * double(cfg.iterations)) {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "%d of %d iterations skipped (budget 5%%); last skip: %s", skipped,
                      cfg.iterations, why.c_str());
        throw PhaseAbort(cfg.id, iter, buf);
    }
}

inline PhaseOutcome run_phase_field(const PhaseConfig& cfg, PipelineContext& ctx,
                                    PipelineState& st) {
    VoxelRadianceField& field = st.field;
    if (st.optim.size() != 2) st.optim.assign(2, OptimState{});
    PhaseOutcome out;
    const LossCallCounts counts_before = ctx.counts;
    const int res = cfg.render_res;
    const int n_views = std::max(1, cfg.views_per_iteration);
    const int ref_w = ctx.ref.x_r.width, ref_h = ctx.ref.x_r.height;
    const RayBatch ref_rays = generate_rays(ctx.ref.pose, ref_w, ref_h);

    for (int iter = st.iteration + 1; iter <= cfg.iterations; ++iter) {
        bool ok = true;
        std::string why;
        IterLog row;
        FieldGrads fg(field);
        try {
            RenderCache ref_cache;
            const RenderOutput ref_out =
                render_volume(field, ref_rays, cfg.n_samples, &ctx.rng, {1, 1, 1}, &ref_cache);
            Image g_ref_acc(ref_w, ref_h, 3);
            std::vector<double> g_alpha_acc(ref_out.mask.size(), 0.0);

            for (int view = 0; view < n_views; ++view) {
                const CameraPose pose = sample_camera(cfg.cameras, ctx.rng);
                const double t = ctx.rng.uniform(cfg.t_min, cfg.t_max);
                const Latent eps = draw_eps(res, ctx.rng);
                const RayBatch rays = generate_rays(pose, res, res);
                RenderCache cache;
                const RenderOutput view_out =
                    render_volume(field, rays, cfg.n_samples, &ctx.rng, {1, 1, 1}, &cache);

                PlanarInputs pin;
                pin.prior = ctx.prior2d;
                pin.schedule = &ctx.schedule;
                pin.encoder = ctx.encoder;
                pin.prompt = ctx.prompt;
                pin.aug = ctx.aug;
                pin.t = t;
                pin.eps = eps;

                Image g_view(res, res, 3);
                std::vector<double> g_zvar;
                Image g_ref(ref_w, ref_h, 3);
                std::vector<double> g_alpha;
                const HybridResult h = hybrid_loss(
                    PlanarPhase::S, pin, *ctx.prior3d, view_out.rgb, &view_out, ctx.ref, pose,
                    ref_out.rgb, ref_out.mask, ctx.weights, ctx.rng, &g_view, &g_zvar, &g_ref,
                    &g_alpha, &ctx.counts);
                accumulate(row, h, PlanarPhase::S);

                RenderGrads rg;
                rg.rgb = g_view.data;
                rg.zvar = g_zvar;
                render_volume_backward(field, cache, view_out, rg, fg);
                for (std::size_t i = 0; i < g_ref_acc.data.size(); ++i)
                    g_ref_acc.data[i] += g_ref.data[i];
                for (std::size_t i = 0; i < g_alpha_acc.size(); ++i)
                    g_alpha_acc[i] += g_alpha[i];

                // Surface-normal smoothness over foreground surface points,
                // capped so its cost stays bounded at high resolutions.
                std::vector<Vec3> pts;
                for (std::size_t r = 0; r < view_out.mask.size(); ++r) {
                    if (view_out.mask[r] > 0.5)
                        pts.push_back(rays.origin + rays.directions[r] * view_out.depth[r]);
                }
                if (int(pts.size()) > cfg.nv_max_points) {
                    std::vector<Vec3> sub;
                    sub.reserve(std::size_t(cfg.nv_max_points));
                    const double stride = double(pts.size()) / cfg.nv_max_points;
                    for (int i = 0; i < cfg.nv_max_points; ++i)
                        sub.push_back(pts[std::size_t(double(i) * stride)]);
                    pts.swap(sub);
                }
                FieldGrads nv_g(field);
                const double nv = normal_smoothness_loss(field, pts, ctx.rng, 0.5, &nv_g);
                ++ctx.counts.nv;
                axpy(fg.raw_density, cfg.w_nv, nv_g.raw_density);
                row.reg += cfg.w_nv * nv;
                row.total += cfg.w_nv * nv;
            }

            RenderGrads rr;
            rr.rgb = g_ref_acc.data;
            rr.mask = g_alpha_acc;
            render_volume_backward(field, ref_cache, ref_out, rr, fg);

            const double inv = 1.0 / double(n_views);
            scale(row, inv);
            row.reg *= inv;
            scale_vec(fg.raw_density, inv);
            scale_vec(fg.raw_color, inv);
        } catch (const DomainError& e) {
            ok = false;
            why = e.what();
        }
        if (ok && (!std::isfinite(row.total) || !all_finite(fg.raw_density) ||
                   !all_finite(fg.raw_color))) {
            ok = false;
            why = "non-finite loss or gradient";
        }
        if (ok) {
            ok = optim_step(cfg.optimizer, st.optim[0], field.raw_density, fg.raw_density,
                            cfg.lr) &&
                 optim_step(cfg.optimizer, st.optim[1], field.raw_color, fg.raw_color, cfg.lr);
            if (!ok) why = "optimizer rejected a non-finite gradient";
        }
        st.iteration = iter;
        if (!ok) {
            ++out.skipped;
            log::warn("phase %d iteration %d skipped: %s", cfg.id, iter, why.c_str());
            abort_check(cfg, iter, out.skipped, why);
            continue;
        }
        ++out.completed;
        write_loss_record(ctx, cfg.id, iter, row);
        if (ctx.checkpoint_every > 0 && iter % ctx.checkpoint_every == 0)
            save_checkpoint_files(ctx, st);
    }

    out.counts.ms = ctx.counts.ms - counts_before.ms;
    out.counts.sds = ctx.counts.sds - counts_before.sds;
    out.counts.aug_sds = ctx.counts.aug_sds - counts_before.aug_sds;
    out.counts.cds = ctx.counts.cds - counts_before.cds;
    out.counts.sds3d = ctx.counts.sds3d - counts_before.sds3d;
    out.counts.ref = ctx.counts.ref - counts_before.ref;
    out.counts.nz = ctx.counts.nz - counts_before.nz;
    out.counts.nc = ctx.counts.nc - counts_before.nc;
    out.counts.ls = ctx.counts.ls - counts_before.ls;
    out.counts.nv = ctx.counts.nv - counts_before.nv;
    return out;
}

inline PhaseOutcome run_phase_mesh(const PhaseConfig& cfg, PipelineContext& ctx,
                                   PipelineState& st) {
    TetScene& scene = st.tet;
    const bool geometry_phase = cfg.id == 2;
    const std::size_t n_groups = geometry_phase ? 2 : 1;
    if (st.optim.size() != n_groups) st.optim.assign(n_groups, OptimState{});
    PhaseOutcome out;
    const LossCallCounts counts_before = ctx.counts;
    const int res = cfg.render_res;
    const int n_views = std::max(1, cfg.views_per_iteration);
    const int ref_w = ctx.ref.x_r.width, ref_h = ctx.ref.x_r.height;
    const Denoiser* prior2d =
        geometry_phase && ctx.prior2d_normal ? ctx.prior2d_normal : ctx.prior2d;
    const Denoiser* prior3d =
        geometry_phase && ctx.prior3d_normal ? ctx.prior3d_normal : ctx.prior3d;
    const MeshChannel view_channel = geometry_phase ? MeshChannel::NormalMap : MeshChannel::Color;
    const PlanarPhase planar_phase = geometry_phase ? PlanarPhase::C : PlanarPhase::S;

    for (int iter = st.iteration + 1; iter <= cfg.iterations; ++iter) {
        bool ok = true;
        std::string why;
        IterLog row;
        TetGrads tg(scene);
        try {
            MeshProvenance prov;
            const SurfaceMesh mesh = marching_tets(scene, &prov);
            if (mesh.empty()) throw DomainError("surface vanished during refinement");

            const MeshRenderOutput ref_out =
                render_mesh(mesh, ctx.ref.pose, ref_w, ref_h, MeshChannel::Color);
            Image g_ref_acc(ref_w, ref_h, 3);
            std::vector<Vec3> g_verts(mesh.verts.size(), Vec3{0, 0, 0});
            std::vector<Vec3> g_colors(mesh.verts.size(), Vec3{0, 0, 0});

            for (int view = 0; view < n_views; ++view) {
                const CameraPose pose = sample_camera(cfg.cameras, ctx.rng);
                const double t = ctx.rng.uniform(cfg.t_min, cfg.t_max);
                const int cds_index = 1 + int(ctx.rng.index(std::size_t(ctx.schedule.grid_n())));
                const Latent eps = draw_eps(res, ctx.rng);
                const MeshRenderOutput view_out = render_mesh(mesh, pose, res, res, view_channel);

                PlanarInputs pin;
                pin.prior = prior2d;
                pin.schedule = &ctx.schedule;
                pin.encoder = ctx.encoder;
                pin.prompt = ctx.prompt;
                pin.aug = ctx.aug;
                pin.t = t;
                pin.cds_index = cds_index;
                pin.eps = eps;

                Image g_view(res, res, 3);
                Image g_ref(ref_w, ref_h, 3);
                std::vector<double> g_alpha;  // binary mesh mask carries no gradient
                const HybridResult h =
                    hybrid_loss(planar_phase, pin, *prior3d, view_out.rgb, nullptr, ctx.ref,
                                pose, ref_out.rgb, ref_out.mask, ctx.weights, ctx.rng, &g_view,
                                nullptr, &g_ref, &g_alpha, &ctx.counts);
                accumulate(row, h, planar_phase);

                MeshRenderGrads mg(mesh);
                render_mesh_backward(mesh, pose, view_out, view_channel, g_view.data, mg);
                for (std::size_t i = 0; i < mesh.verts.size(); ++i) {
                    g_verts[i] += mg.verts[i];
                    g_colors[i] += mg.colors[i];
                }
                for (std::size_t i = 0; i < g_ref_acc.data.size(); ++i)
                    g_ref_acc.data[i] += g_ref.data[i];
            }

            MeshRenderGrads mr(mesh);
            render_mesh_backward(mesh, ctx.ref.pose, ref_out, MeshChannel::Color, g_ref_acc.data,
                                 mr);
            for (std::size_t i = 0; i < mesh.verts.size(); ++i) {
                g_verts[i] += mr.verts[i];
                g_colors[i] += mr.colors[i];
            }

            const double inv = 1.0 / double(n_views);
            scale(row, inv);
            for (std::size_t i = 0; i < mesh.verts.size(); ++i) {
                g_verts[i] = g_verts[i] * inv;
                g_colors[i] = g_colors[i] * inv;
            }

            if (geometry_phase) {
                std::vector<Vec3> g_nc, g_ls;
                const double nc = normal_consistency_loss(mesh, &g_nc);
                ++ctx.counts.nc;
                const double ls = laplacian_loss(mesh, &g_ls);
                ++ctx.counts.ls;
                for (std::size_t i = 0; i < mesh.verts.size(); ++i)
                    g_verts[i] += g_nc[i] * cfg.w_nc + g_ls[i] * cfg.w_ls;
                row.reg = cfg.w_nc * nc + cfg.w_ls * ls;
                row.total += row.reg;
            }

            marching_tets_backward(scene, mesh, prov, g_verts, g_colors, tg);
        } catch (const DomainError& e) {
            ok = false;
            why = e.what();
        }
        if (ok) {
            if (geometry_phase) {
                if (!std::isfinite(row.total) || !all_finite(tg.sdf) ||
                    !all_finite(tg.offset_raw)) {
                    ok = false;
                    why = "non-finite loss or gradient";
                } else {
                    ok = optim_step(cfg.optimizer, st.optim[0], scene.sdf, tg.sdf, cfg.lr) &&
                         optim_step(cfg.optimizer, st.optim[1], scene.offset_raw, tg.offset_raw,
                                    cfg.lr);
                    if (!ok) why = "optimizer rejected a non-finite gradient";
                }
            } else {
                if (!std::isfinite(row.total) || !all_finite(tg.color_raw)) {
                    ok = false;
                    why = "non-finite loss or gradient";
                } else {
                    ok = optim_step(cfg.optimizer, st.optim[0], scene.color_field.raw_color,
                                    tg.color_raw, cfg.lr);
                    if (!ok) why = "optimizer rejected a non-finite gradient";
                }
            }
        }
        st.iteration = iter;
        if (!ok) {
            ++out.skipped;
            log::warn("phase %d iteration %d skipped: %s", cfg.id, iter, why.c_str());
            abort_check(cfg, iter, out.skipped, why);
            continue;
        }
        ++out.completed;
        write_loss_record(ctx, cfg.id, iter, row);
        if (ctx.checkpoint_every > 0 && iter % ctx.checkpoint_every == 0)
            save_checkpoint_files(ctx, st);
    }

    out.counts.ms = ctx.counts.ms - counts_before.ms;
    out.counts.sds = ctx.counts.sds - counts_before.sds;
    out.counts.aug_sds = ctx.counts.aug_sds - counts_before.aug_sds;
    out.counts.cds = ctx.counts.cds - counts_before.cds;
    out.counts.sds3d = ctx.counts.sds3d - counts_before.sds3d;
    out.counts.ref = ctx.counts.ref - counts_before.ref;
    out.counts.nz = ctx.counts.nz - counts_before.nz;
    out.counts.nc = ctx.counts.nc - counts_before.nc;
    out.counts.ls = ctx.counts.ls - counts_before.ls;
    out.counts.nv = ctx.counts.nv - counts_before.nv;
    return out;
}

} // namespace detail

inline PhaseOutcome run_phase(const PhaseConfig& cfg, PipelineContext& ctx, PipelineState& st) {
    if (!ctx.prior2d || !ctx.prior3d || !ctx.encoder)
        throw ConfigError("pipeline needs both priors and an encoder");
    if (st.phase != cfg.id) {
        st.phase = cfg.id;
        st.iteration = 0;
        st.optim.clear();
    }
    if (cfg.id == 1) {
        return detail::run_phase_field(cfg, ctx, st);
    }
    if (!st.converted) throw DomainError("phases 2 and 3 need the converted tet scene");
    return detail::run_phase_mesh(cfg, ctx, st);
}

struct PipelineConfigs {
    PhaseConfig p1 = default_phase_config(1);
    PhaseConfig p2 = default_phase_config(2);
    PhaseConfig p3 = default_phase_config(3);
};

// Full three-phase run: radiance field, geometry refinement on the converted
// tet scene, then texture refinement with geometry frozen. Resumes from
// whatever phase/iteration the state carries.
inline SurfaceMesh run_pipeline(const PipelineConfigs& cfgs, PipelineContext& ctx,
                                PipelineState& st) {
    if (st.phase == 1) {
        run_phase(cfgs.p1, ctx, st);
        st.tet = convert_nerf_to_dmtet(st.field, ctx.convert_threshold, ctx.tet_cells);
        st.converted = true;
        st.phase = 2;
        st.iteration = 0;
        st.optim.clear();
        save_checkpoint_files(ctx, st);
    }
    if (st.phase == 2) {
        run_phase(cfgs.p2, ctx, st);
        st.phase = 3;
        st.iteration = 0;
        st.optim.clear();
        save_checkpoint_files(ctx, st);
    }
    run_phase(cfgs.p3, ctx, st);
    save_checkpoint_files(ctx, st);
    return marching_tets(st.tet);
}

} // namespace x3d
