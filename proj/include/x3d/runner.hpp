#pragma once
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "x3d/config.hpp"
#include "x3d/encoder.hpp"
#include "x3d/errors.hpp"
#include "x3d/log.hpp"
#include "x3d/metrics.hpp"
#include "x3d/obj_io.hpp"
#include "x3d/pipeline.hpp"
#include "x3d/prior.hpp"
#include "x3d/remote.hpp"
#include "x3d/toy.hpp"

namespace x3d {

// Single-component Gaussian prior that adapts to whatever latent size
// arrives, so one configured prior serves every phase resolution. The mean is
// a constant image.
class UniformGmDenoiser : public Denoiser {
public:
    UniformGmDenoiser(double mean, double stddev, NoiseSchedule schedule)
        : mean_(mean), stddev_(stddev), schedule_(schedule) {}

    Latent denoise(const Latent& z_t, double t, const PriorCondition& cond) const override {
        return make(z_t.size()).denoise(z_t, t, cond);
    }

    std::vector<double> denoise_vjp(const Latent& z_t, double t, const PriorCondition& cond,
                                    const std::vector<double>& g) const override {
        return make(z_t.size()).denoise_vjp(z_t, t, cond, g);
    }

private:
    GmPrior make(std::size_t n) const {
        return GmPrior({{1.0, std::vector<double>(n, mean_), stddev_}}, schedule_);
    }

    double mean_;
    double stddev_;
    NoiseSchedule schedule_;
};

// Everything a run needs, with owned storage so the raw pointers inside the
// pipeline context stay valid for the object's lifetime.
struct RunObjects {
    RunConfig cfg;
    std::unique_ptr<ToyFixture> fixture;  // set when reference.kind is "fixture"
    std::unique_ptr<Denoiser> prior2d;
    std::unique_ptr<Denoiser> prior3d;  // null when the fixture's oracle is used
    std::unique_ptr<ImageEncoder> encoder;
    PipelineContext ctx;
    PipelineConfigs phases;
};

namespace detail {

inline std::unique_ptr<Denoiser> make_prior(const PriorSpec& spec, const NoiseSchedule& sched,
                                            const std::string& role) {
    if (spec.kind == "gm")
        return std::make_unique<UniformGmDenoiser>(spec.mean, spec.stddev, sched);
    if (spec.kind == "remote")
        return std::make_unique<RemoteDenoiser>(spec.host, spec.port, spec.timeout_ms);
    throw ConfigError(role + ".kind: cannot build \"" + spec.kind + "\"");
}

inline ReferenceView make_image_reference(const ReferenceSpec& spec) {
    ReferenceView ref;
    ref.x_r = read_ppm(spec.image);
    if (spec.mask.empty()) {
        ref.mask = Image(ref.x_r.width, ref.x_r.height, 1, 1.0);
    } else {
        const Image m = read_ppm(spec.mask);
        if (m.width != ref.x_r.width || m.height != ref.x_r.height)
            throw ConfigError("reference.mask: size does not match reference.image");
        ref.mask = Image(m.width, m.height, 1);
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x)
                ref.mask.at(x, y, 0) = m.at(x, y, 0) > 0.5 ? 1.0 : 0.0;
    }
    ref.pose = CameraPose{spec.elevation, spec.azimuth, spec.distance, spec.fov};
    return ref;
}

} // namespace detail

inline RunObjects build_run(const RunConfig& cfg) {
    validate_config(cfg);
    RunObjects run;
    run.cfg = cfg;
    const NoiseSchedule sched(cfg.schedule.sigma_min, cfg.schedule.sigma_max,
                              cfg.schedule.grid_n);

    if (cfg.encoder.kind == "toy")
        run.encoder = std::make_unique<ToyEncoder>(cfg.encoder.dim, cfg.encoder.seed);
    else
        run.encoder = std::make_unique<RemoteEncoder>(cfg.encoder.host, cfg.encoder.port,
                                                      cfg.encoder.timeout_ms);

    if (cfg.reference.kind == "fixture") {
        run.fixture = std::make_unique<ToyFixture>(
            make_toy_fixture(cfg.toy.field_res, cfg.toy.view_res, cfg.toy.n_views,
                             cfg.toy.radius, cfg.toy.tau));
        run.ctx.ref = run.fixture->ref;
    } else if (cfg.reference.kind == "image") {
        run.ctx.ref = detail::make_image_reference(cfg.reference);
    } else {  // blank: featureless mid-gray target, everything counts as foreground
        ReferenceView ref;
        ref.x_r = Image(cfg.reference.res, cfg.reference.res, 3, 0.5);
        ref.mask = Image(cfg.reference.res, cfg.reference.res, 1, 1.0);
        ref.pose = CameraPose{cfg.reference.elevation, cfg.reference.azimuth,
                              cfg.reference.distance, cfg.reference.fov};
        run.ctx.ref = ref;
    }

    run.prior2d = detail::make_prior(cfg.prior2d, sched, "prior2d");
    run.ctx.prior2d = run.prior2d.get();
    if (cfg.prior3d.kind == "multiview_oracle") {
        if (!run.fixture)
            throw ConfigError("prior3d.kind: \"multiview_oracle\" needs the fixture reference");
        run.ctx.prior3d = &run.fixture->prior_rgb;
        run.ctx.prior3d_normal = &run.fixture->prior_normal;
    } else {
        run.prior3d = detail::make_prior(cfg.prior3d, sched, "prior3d");
        run.ctx.prior3d = run.prior3d.get();
    }

    if (cfg.prompt.kind == "reference")
        run.ctx.prompt = run.encoder->embed(run.ctx.ref.x_r);
    else if (cfg.prompt.kind == "image")
        run.ctx.prompt = run.encoder->embed(read_ppm(cfg.prompt.path));
    else  // embedding | audio: precomputed embedding file
        run.ctx.prompt = read_embedding_file(cfg.prompt.path);

    run.ctx.encoder = run.encoder.get();
    run.ctx.aug.n = cfg.aug_n;
    run.ctx.schedule = sched;
    run.ctx.weights = cfg.weights;
    run.ctx.rng = Rng(cfg.seed);
    run.ctx.out_dir = cfg.out_dir;
    run.ctx.checkpoint_every = cfg.checkpoint_every;
    run.ctx.config_hash = config_hash(cfg);
    run.ctx.convert_threshold = cfg.convert_threshold;
    run.phases.p1 = cfg.phase1;
    run.phases.p2 = cfg.phase2;
    run.phases.p3 = cfg.phase3;
    return run;
}

struct TurntableArtifacts {
    MetricsReport report;
    Turntable frames;
};

// Turntable render plus the three similarity scores for a finished mesh. An
// empty mesh degrades to background frames so evaluation always produces a
// complete artifact.
inline TurntableArtifacts compute_turntable_metrics(const RunObjects& run,
                                                    const SurfaceMesh& mesh) {
    if (mesh.empty()) log::warn("metrics: mesh is empty, frames show background only");
    TurntableArtifacts art;
    art.frames = render_turntable(mesh, run.cfg.turntable_res, run.cfg.turntable_res);
    art.report.clip_r = clip_r({run.ctx.prompt}, {art.frames}, *run.ctx.encoder);
    art.report.clip_i = clip_i(run.ctx.ref.x_r, art.frames, *run.ctx.encoder);
    art.report.arcc = arcc(run.ctx.prompt, art.frames, *run.ctx.encoder);
    art.report.n_frames = int(art.frames.frames.size());
    art.report.encoder = run.cfg.encoder.kind;
    return art;
}

struct GenerateOptions {
    bool phase1_only = false;
    bool resume = false;  // continue from <out_dir>/checkpoints/latest.x3d
};

struct GenerateResult {
    SurfaceMesh mesh;  // as re-imported from the exported file
    MetricsReport report;
    std::string obj_path;
};

// Full driver: optimize, export the mesh, then evaluate the re-imported
// export so a later standalone evaluation of the artifact reproduces the
// numbers byte for byte.
inline GenerateResult generate(RunObjects& run, const GenerateOptions& opt = {}) {
    namespace fs = std::filesystem;
    const fs::path out(run.cfg.out_dir);
    fs::create_directories(out);
    const auto log_mode =
        std::ios::binary | (opt.resume ? std::ios::app : std::ios::trunc);
    std::ofstream losses((out / "losses.jsonl").string(), log_mode);
    if (!losses) throw ConfigError("cannot write losses log in " + run.cfg.out_dir);
    run.ctx.losses_log = &losses;

    PipelineState st = make_initial_state(run.cfg.field_res, 1.0);
    const fs::path latest = out / "checkpoints" / "latest.x3d";
    if (opt.resume) {
        if (!fs::exists(latest))
            throw ConfigError("resume requested but " + latest.string() + " does not exist");
        restore_state(read_checkpoint(latest.string()), run.ctx, st);
        log::info("resumed at phase %d iteration %d", st.phase, st.iteration);
    }

    GenerateResult result;
    if (opt.phase1_only) {
        run_phase(run.phases.p1, run.ctx, st);
        save_checkpoint_files(run.ctx, st);
        run.ctx.losses_log = nullptr;
        return result;
    }
    const SurfaceMesh mesh = run_pipeline(run.phases, run.ctx, st);
    run.ctx.losses_log = nullptr;

    result.obj_path = (out / "mesh.obj").string();
    write_obj(result.obj_path, mesh);
    result.mesh = read_obj(result.obj_path);

    const TurntableArtifacts art = compute_turntable_metrics(run, result.mesh);
    write_turntable_frames((out / "turntable").string(), art.frames);
    write_metrics((out / "metrics.json").string(), art.report);
    result.report = art.report;
    return result;
}

// Recomputes turntable frames and metrics from an exported artifact,
// overwriting them in place.
inline MetricsReport evaluate_artifact(const RunObjects& run, const std::string& artifact_dir) {
    namespace fs = std::filesystem;
    const fs::path dir(artifact_dir);
    const fs::path obj = dir / "mesh.obj";
    if (!fs::exists(obj)) throw ConfigError("no mesh.obj in " + artifact_dir);

    const fs::path metrics_path = dir / "metrics.json";
    if (fs::exists(metrics_path)) {
        try {
            std::ifstream f(metrics_path.string(), std::ios::binary);
            nlohmann::json j;
            f >> j;
            const std::string prev = j.value("encoder", "");
            if (!prev.empty() && prev != run.cfg.encoder.kind)
                log::warn("evaluating with encoder \"%s\", artifact was scored with \"%s\"",
                          run.cfg.encoder.kind.c_str(), prev.c_str());
        } catch (const nlohmann::json::exception&) {
            log::warn("existing metrics.json is unreadable, overwriting");
        }
    }

    const SurfaceMesh mesh = read_obj(obj.string());
    const TurntableArtifacts art = compute_turntable_metrics(run, mesh);
    write_turntable_frames((dir / "turntable").string(), art.frames);
    write_metrics(metrics_path.string(), art.report);
    return art.report;
}

} // namespace x3d
