#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "x3d/errors.hpp"
#include "x3d/fd_check.hpp"
#include "x3d/runner.hpp"

namespace {

// ConfigError (bad config, bad flags, missing files) exits 2; every other
// engine failure exits 1 with the exception message, which for PhaseAbort
// already names the phase and iteration.
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

template <typename F>
int guarded(F&& body) {
    try {
        return body();
    } catch (const x3d::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
}

struct GenerateArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir;
    std::string phase = "all";
    bool resume = false;
};

int cmd_generate(const GenerateArgs& a) {
    x3d::RunConfig cfg = x3d::load_run_config(a.config_path);
    if (a.seed_set) cfg.seed = a.seed;
    if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;

    x3d::RunObjects run = x3d::build_run(cfg);
    x3d::GenerateOptions opt;
    opt.phase1_only = a.phase == "1-only";
    opt.resume = a.resume;
    const x3d::GenerateResult res = x3d::generate(run, opt);

    if (opt.phase1_only) {
        std::printf("phase 1 checkpointed in %s/checkpoints\n", cfg.out_dir.c_str());
        return 0;
    }
    std::printf("mesh: %s (%zu vertices, %zu triangles)\n", res.obj_path.c_str(),
                res.mesh.verts.size(), res.mesh.tris.size());
    std::printf("clip_r %.6f  clip_i %.6f  arcc %.6f\n", res.report.clip_r,
                res.report.clip_i, res.report.arcc);
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& artifact_dir) {
    const x3d::RunConfig cfg = x3d::load_run_config(config_path);
    const x3d::RunObjects run = x3d::build_run(cfg);
    const x3d::MetricsReport rep = x3d::evaluate_artifact(run, artifact_dir);
    std::printf("clip_r %.6f  clip_i %.6f  arcc %.6f\n", rep.clip_r, rep.clip_i, rep.arcc);
    return 0;
}

int cmd_gradcheck(const std::string& op, const std::string& scale) {
    const x3d::FdScale sc = x3d::fd_scale_by_name(scale);
    const std::vector<x3d::FdResult> results = x3d::run_fd_checks(sc, op);
    std::printf("%-10s  %12s  %8s  %s\n", "op", "max_rel_err", "tol", "status");
    bool all_pass = true;
    for (const x3d::FdResult& r : results) {
        std::printf("%-10s  %12.3e  %8.1e  %s\n", r.op.c_str(), r.max_rel_err, r.tol,
                    r.pass ? "pass" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : kExitRuntime;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"3D asset generation by score distillation from diffusion priors"};
    app.require_subcommand(1);

    GenerateArgs gen_args;
    CLI::App* gen = app.add_subcommand("generate", "Run the optimization and export the artifact tree");
    gen->add_option("config", gen_args.config_path, "Run configuration (JSON)")->required();
    CLI::Option* seed_opt = gen->add_option("--seed", gen_args.seed, "Override the config seed");
    gen->add_option("--out", gen_args.out_dir, "Override the output directory");
    gen->add_option("--phase", gen_args.phase, "Phase selection: all or 1-only")
        ->check(CLI::IsMember({"all", "1-only"}));
    gen->add_flag("--resume", gen_args.resume, "Continue from <out>/checkpoints/latest.x3d");

    std::string eval_config, eval_artifact;
    CLI::App* ev = app.add_subcommand("eval", "Recompute turntable frames and metrics for an artifact");
    ev->add_option("config", eval_config, "Run configuration (JSON)")->required();
    ev->add_option("artifact", eval_artifact, "Artifact directory holding mesh.obj")->required();

    std::string gc_op, gc_scale = "micro";
    CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference checks for every loss gradient");
    gc->add_option("--op", gc_op, "Restrict to one op (see failure message for names)");
    gc->add_option("--scale", gc_scale, "Scene size preset: micro or small");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    if (gen->parsed()) {
        gen_args.seed_set = seed_opt->count() > 0;
        return guarded([&] { return cmd_generate(gen_args); });
    }
    if (ev->parsed()) return guarded([&] { return cmd_eval(eval_config, eval_artifact); });
    return guarded([&] { return cmd_gradcheck(gc_op, gc_scale); });
}
