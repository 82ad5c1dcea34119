#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "x3d/runner.hpp"

using namespace x3d;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

// Small enough to finish a whole three-phase run in well under a second.
RunConfig micro_config(const fs::path& out) {
    RunConfig cfg = default_run_config();
    cfg.seed = 97;
    cfg.out_dir = out.string();
    cfg.field_res = 8;
    cfg.convert_threshold = 0.3;  // the two-iteration field never gets dense
    cfg.turntable_res = 16;
    cfg.toy.field_res = 8;
    cfg.toy.view_res = 24;
    cfg.toy.n_views = 4;
    for (PhaseConfig* p : {&cfg.phase1, &cfg.phase2, &cfg.phase3}) {
        p->iterations = 2;
        p->render_res = 12;
        p->n_samples = 8;
    }
    return cfg;
}

} // namespace

TEST_SUITE("runner") {

TEST_CASE("uniform gm denoiser adapts to the latent size") {
    const NoiseSchedule sched(0.05, 5.0, 8);
    const UniformGmDenoiser d(0.25, 0.0, sched);  // point mass: posterior is the mean
    for (int r : {4, 6}) {
        Latent z = make_latent(3, r, r);
        for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] = 0.1 * double(i % 7);
        const Latent out = d.denoise(z, 0.5, embedding_condition({1.0}));
        REQUIRE(out.size() == z.size());
        for (double v : out.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("build_run wires the fixture oracle stack") {
    RunConfig cfg = micro_config(fresh_dir("x3d_run_wire"));
    const RunObjects run = build_run(cfg);
    REQUIRE(run.fixture != nullptr);
    CHECK(run.ctx.prior3d == &run.fixture->prior_rgb);
    CHECK(run.ctx.prior3d_normal == &run.fixture->prior_normal);
    CHECK(run.ctx.prior2d != nullptr);
    CHECK(run.ctx.prior2d_normal == nullptr);
    CHECK(run.ctx.ref.x_r.width == cfg.toy.view_res);
    CHECK(int(run.ctx.prompt.size()) == cfg.encoder.dim);
    CHECK(run.ctx.config_hash == config_hash(cfg));
    CHECK(run.phases.p1.iterations == 2);
}

TEST_CASE("build_run supports blank references and embedding prompts") {
    const fs::path dir = fresh_dir("x3d_run_blank");
    fs::create_directories(dir);
    const std::string emb_path = (dir / "prompt.f32").string();
    const std::vector<double> emb = {0.6, -0.8, 0.0};
    write_embedding_file(emb_path, emb);

    RunConfig cfg = micro_config(dir / "out");
    cfg.reference.kind = "blank";
    cfg.reference.res = 16;
    cfg.prior3d.kind = "gm";
    cfg.prompt.kind = "embedding";
    cfg.prompt.path = emb_path;
    const RunObjects run = build_run(cfg);
    CHECK(run.fixture == nullptr);
    CHECK(run.ctx.prior3d_normal == nullptr);
    CHECK(run.ctx.ref.x_r.width == 16);
    CHECK(run.ctx.ref.x_r.at(0, 0, 0) == 0.5);
    CHECK(run.ctx.ref.mask.at(3, 3, 0) == 1.0);
    REQUIRE(run.ctx.prompt.size() == emb.size());
    for (std::size_t i = 0; i < emb.size(); ++i)
        CHECK(run.ctx.prompt[i] == doctest::Approx(emb[i]).epsilon(1e-6));

    cfg.prior3d.kind = "multiview_oracle";
    cfg.reference.kind = "blank";
    CHECK_THROWS_AS(build_run(cfg), ConfigError);
}

TEST_CASE("generate produces the full artifact tree, reproducibly") {
    const fs::path out_a = fresh_dir("x3d_run_a");
    const fs::path out_b = fresh_dir("x3d_run_b");
    RunConfig cfg_a = micro_config(out_a);
    RunConfig cfg_b = cfg_a;
    cfg_b.out_dir = out_b.string();

    RunObjects run_a = build_run(cfg_a);
    const GenerateResult res_a = generate(run_a);
    CHECK(fs::exists(out_a / "mesh.obj"));
    CHECK(fs::exists(out_a / "metrics.json"));
    CHECK(fs::exists(out_a / "losses.jsonl"));
    CHECK(fs::exists(out_a / "checkpoints" / "latest.x3d"));
    CHECK(fs::exists(out_a / "turntable" / "frame_000.ppm"));
    CHECK(fs::exists(out_a / "turntable" / "frame_119.ppm"));
    CHECK(!res_a.mesh.empty());
    CHECK(res_a.report.n_frames == 120);
    CHECK(res_a.report.encoder == "toy");
    CHECK(res_a.report.clip_r == 1.0);  // only one prompt to retrieve

    RunObjects run_b = build_run(cfg_b);
    generate(run_b);
    CHECK(slurp(out_a / "mesh.obj") == slurp(out_b / "mesh.obj"));
    CHECK(slurp(out_a / "metrics.json") == slurp(out_b / "metrics.json"));
    CHECK(slurp(out_a / "losses.jsonl") == slurp(out_b / "losses.jsonl"));

    // The out_dir is not part of the optimization, only where results land.
    CHECK(config_hash(cfg_a) != config_hash(cfg_b));
}

TEST_CASE("evaluation reproduces generation metrics byte for byte") {
    const fs::path out = fresh_dir("x3d_run_eval");
    RunConfig cfg = micro_config(out);
    RunObjects run = build_run(cfg);
    generate(run);
    const std::string before = slurp(out / "metrics.json");
    const std::string frame_before = slurp(out / "turntable" / "frame_042.ppm");

    const RunObjects run2 = build_run(cfg);
    const MetricsReport rep = evaluate_artifact(run2, out.string());
    CHECK(slurp(out / "metrics.json") == before);
    CHECK(slurp(out / "turntable" / "frame_042.ppm") == frame_before);
    CHECK(rep.n_frames == 120);

    CHECK_THROWS_WITH_AS(evaluate_artifact(run2, (out / "nowhere").string()),
                         doctest::Contains("mesh.obj"), ConfigError);
}

TEST_CASE("phase-1-only runs checkpoint and resume to completion") {
    const fs::path out = fresh_dir("x3d_run_p1");
    RunConfig cfg = micro_config(out);
    RunObjects run = build_run(cfg);
    GenerateOptions opt;
    opt.phase1_only = true;
    generate(run, opt);
    CHECK(fs::exists(out / "checkpoints" / "latest.x3d"));
    CHECK(!fs::exists(out / "mesh.obj"));

    RunObjects run2 = build_run(cfg);
    GenerateOptions full;
    full.resume = true;
    const GenerateResult res = generate(run2, full);
    CHECK(fs::exists(out / "mesh.obj"));
    CHECK(!res.mesh.empty());

    // A resumed full run matches an uninterrupted one exactly.
    const fs::path straight = fresh_dir("x3d_run_p1_straight");
    RunConfig cfg2 = cfg;
    cfg2.out_dir = straight.string();
    RunObjects run3 = build_run(cfg2);
    generate(run3);
    CHECK(slurp(out / "mesh.obj") == slurp(straight / "mesh.obj"));
    CHECK(slurp(out / "metrics.json") == slurp(straight / "metrics.json"));
    CHECK(slurp(out / "losses.jsonl") == slurp(straight / "losses.jsonl"));

    GenerateOptions bad;
    bad.resume = true;
    RunConfig cfg3 = cfg;
    cfg3.out_dir = fresh_dir("x3d_run_p1_missing").string();
    RunObjects run4 = build_run(cfg3);
    CHECK_THROWS_WITH_AS(generate(run4, bad), doctest::Contains("resume"), ConfigError);
}

} // TEST_SUITE
