#pragma once
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>

#include "json.hpp"
#include "x3d/errors.hpp"
#include "x3d/losses.hpp"
#include "x3d/pipeline.hpp"
#include "x3d/prior.hpp"

namespace x3d {

struct PriorSpec {
    std::string kind = "gm";  // gm | multiview_oracle | remote
    double mean = 0.5;        // gm: constant target image value
    double stddev = 0.4;      // gm: component spread
    std::string host = "127.0.0.1";
    int port = 0;
    int timeout_ms = 30000;
};

struct EncoderSpec {
    std::string kind = "toy";  // toy | remote
    int dim = 64;
    std::uint64_t seed = 2024;
    std::string host = "127.0.0.1";
    int port = 0;
    int timeout_ms = 30000;
};

// Where the modality prompt embedding comes from. "reference" embeds the
// reference view itself; the file kinds load raw little-endian float32
// embeddings or a PPM image to embed.
struct PromptSpec {
    std::string kind = "reference";  // reference | embedding | image | audio
    std::string path;
};

struct ReferenceSpec {
    std::string kind = "fixture";  // fixture | image | blank
    std::string image;
    std::string mask;  // optional with kind image; empty means all-foreground
    double elevation = 15.0;
    double azimuth = 0.0;
    double distance = 2.5;
    double fov = 40.0;
    int res = 128;  // blank: render target resolution
};

struct ToySpec {
    int field_res = 32;
    int view_res = 128;
    int n_views = 12;
    double radius = 0.4;
    double tau = 0.05;
};

struct ScheduleSpec {
    double sigma_min = 0.05;
    double sigma_max = 5.0;
    int grid_n = 50;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    int field_res = 32;
    double convert_threshold = 10.0;
    int checkpoint_every = 100;
    int turntable_res = 128;
    int aug_n = 2;
    PriorSpec prior2d;
    PriorSpec prior3d{"multiview_oracle"};
    EncoderSpec encoder;
    PromptSpec prompt;
    ReferenceSpec reference;
    ToySpec toy;
    ScheduleSpec schedule;
    LossWeights weights;
    PhaseConfig phase1 = default_phase_config(1);
    PhaseConfig phase2 = default_phase_config(2);
    PhaseConfig phase3 = default_phase_config(3);
};

inline RunConfig default_run_config() { return RunConfig{}; }

namespace detail {

using ojson = nlohmann::ordered_json;

inline void check_keys(const nlohmann::json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (item.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError(where + ": unknown key \"" + item.key() + "\"");
    }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

inline ojson prior_to_json(const PriorSpec& p) {
    ojson j;
    j["kind"] = p.kind;
    j["mean"] = p.mean;
    j["stddev"] = p.stddev;
    j["host"] = p.host;
    j["port"] = p.port;
    j["timeout_ms"] = p.timeout_ms;
    return j;
}

inline PriorSpec prior_from_json(const nlohmann::json& j, const std::string& where) {
    PriorSpec p;
    check_keys(j, where, {"kind", "mean", "stddev", "host", "port", "timeout_ms"});
    read_field(j, "kind", p.kind, where);
    read_field(j, "mean", p.mean, where);
    read_field(j, "stddev", p.stddev, where);
    read_field(j, "host", p.host, where);
    read_field(j, "port", p.port, where);
    read_field(j, "timeout_ms", p.timeout_ms, where);
    return p;
}

inline ojson cameras_to_json(const CameraRanges& c) {
    ojson j;
    j["elevation_min"] = c.elevation_min;
    j["elevation_max"] = c.elevation_max;
    j["azimuth_min"] = c.azimuth_min;
    j["azimuth_max"] = c.azimuth_max;
    j["distance_min"] = c.distance_min;
    j["distance_max"] = c.distance_max;
    j["fov_min"] = c.fov_min;
    j["fov_max"] = c.fov_max;
    return j;
}

inline CameraRanges cameras_from_json(const nlohmann::json& j, const CameraRanges& defaults,
                                      const std::string& where) {
    CameraRanges c = defaults;
    check_keys(j, where,
               {"elevation_min", "elevation_max", "azimuth_min", "azimuth_max", "distance_min",
                "distance_max", "fov_min", "fov_max"});
    read_field(j, "elevation_min", c.elevation_min, where);
    read_field(j, "elevation_max", c.elevation_max, where);
    read_field(j, "azimuth_min", c.azimuth_min, where);
    read_field(j, "azimuth_max", c.azimuth_max, where);
    read_field(j, "distance_min", c.distance_min, where);
    read_field(j, "distance_max", c.distance_max, where);
    read_field(j, "fov_min", c.fov_min, where);
    read_field(j, "fov_max", c.fov_max, where);
    return c;
}

inline ojson phase_to_json(const PhaseConfig& p) {
    ojson j;
    j["iterations"] = p.iterations;
    j["render_res"] = p.render_res;
    j["n_samples"] = p.n_samples;
    j["optimizer"] = p.optimizer == OptimKind::Adam ? "adam" : "adan";
    j["lr"] = p.lr;
    j["views_per_iteration"] = p.views_per_iteration;
    j["t_min"] = p.t_min;
    j["t_max"] = p.t_max;
    j["w_nv"] = p.w_nv;
    j["w_nc"] = p.w_nc;
    j["w_ls"] = p.w_ls;
    j["nv_max_points"] = p.nv_max_points;
    j["cameras"] = cameras_to_json(p.cameras);
    return j;
}

inline PhaseConfig phase_from_json(const nlohmann::json& j, int id, const std::string& where) {
    PhaseConfig p = default_phase_config(id);
    check_keys(j, where,
               {"iterations", "render_res", "n_samples", "optimizer", "lr",
                "views_per_iteration", "t_min", "t_max", "w_nv", "w_nc", "w_ls", "nv_max_points",
                "cameras"});
    read_field(j, "iterations", p.iterations, where);
    read_field(j, "render_res", p.render_res, where);
    read_field(j, "n_samples", p.n_samples, where);
    if (j.contains("optimizer")) {
        std::string name;
        read_field(j, "optimizer", name, where);
        if (name == "adam")
            p.optimizer = OptimKind::Adam;
        else if (name == "adan")
            p.optimizer = OptimKind::Adan;
        else
            throw ConfigError(where + ".optimizer: expected \"adam\" or \"adan\", got \"" + name +
                              "\"");
    }
    read_field(j, "lr", p.lr, where);
    read_field(j, "views_per_iteration", p.views_per_iteration, where);
    read_field(j, "t_min", p.t_min, where);
    read_field(j, "t_max", p.t_max, where);
    read_field(j, "w_nv", p.w_nv, where);
    read_field(j, "w_nc", p.w_nc, where);
    read_field(j, "w_ls", p.w_ls, where);
    read_field(j, "nv_max_points", p.nv_max_points, where);
    if (j.contains("cameras"))
        p.cameras = cameras_from_json(j.at("cameras"), p.cameras, where + ".cameras");
    return p;
}

inline ojson weights_to_json(const LossWeights& w) {
    ojson j;
    j["ms"] = w.ms;
    j["cds"] = w.cds;
    j["star"] = w.star;
    j["img"] = w.img;
    j["nz"] = w.nz;
    j["sds3d"] = w.sds3d;
    j["rgb"] = w.rgb;
    j["mask"] = w.mask;
    ojson b;
    b["g"] = w.ms_branch.g;
    b["l"] = w.ms_branch.l;
    b["z"] = w.ms_branch.z;
    j["ms_branch"] = b;
    return j;
}

inline LossWeights weights_from_json(const nlohmann::json& j, const std::string& where) {
    LossWeights w;
    check_keys(j, where, {"ms", "cds", "star", "img", "nz", "sds3d", "rgb", "mask", "ms_branch"});
    read_field(j, "ms", w.ms, where);
    read_field(j, "cds", w.cds, where);
    read_field(j, "star", w.star, where);
    read_field(j, "img", w.img, where);
    read_field(j, "nz", w.nz, where);
    read_field(j, "sds3d", w.sds3d, where);
    read_field(j, "rgb", w.rgb, where);
    read_field(j, "mask", w.mask, where);
    if (j.contains("ms_branch")) {
        const auto& b = j.at("ms_branch");
        check_keys(b, where + ".ms_branch", {"g", "l", "z"});
        read_field(b, "g", w.ms_branch.g, where + ".ms_branch");
        read_field(b, "l", w.ms_branch.l, where + ".ms_branch");
        read_field(b, "z", w.ms_branch.z, where + ".ms_branch");
    }
    return w;
}

} // namespace detail

inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
    using detail::ojson;
    ojson j;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["field_res"] = c.field_res;
    j["convert_threshold"] = c.convert_threshold;
    j["checkpoint_every"] = c.checkpoint_every;
    j["turntable_res"] = c.turntable_res;
    j["aug_n"] = c.aug_n;
    j["prior2d"] = detail::prior_to_json(c.prior2d);
    j["prior3d"] = detail::prior_to_json(c.prior3d);
    ojson enc;
    enc["kind"] = c.encoder.kind;
    enc["dim"] = c.encoder.dim;
    enc["seed"] = c.encoder.seed;
    enc["host"] = c.encoder.host;
    enc["port"] = c.encoder.port;
    enc["timeout_ms"] = c.encoder.timeout_ms;
    j["encoder"] = enc;
    ojson pr;
    pr["kind"] = c.prompt.kind;
    pr["path"] = c.prompt.path;
    j["prompt"] = pr;
    ojson ref;
    ref["kind"] = c.reference.kind;
    ref["image"] = c.reference.image;
    ref["mask"] = c.reference.mask;
    ref["elevation"] = c.reference.elevation;
    ref["azimuth"] = c.reference.azimuth;
    ref["distance"] = c.reference.distance;
    ref["fov"] = c.reference.fov;
    ref["res"] = c.reference.res;
    j["reference"] = ref;
    ojson toy;
    toy["field_res"] = c.toy.field_res;
    toy["view_res"] = c.toy.view_res;
    toy["n_views"] = c.toy.n_views;
    toy["radius"] = c.toy.radius;
    toy["tau"] = c.toy.tau;
    j["toy"] = toy;
    ojson sch;
    sch["sigma_min"] = c.schedule.sigma_min;
    sch["sigma_max"] = c.schedule.sigma_max;
    sch["grid_n"] = c.schedule.grid_n;
    j["schedule"] = sch;
    j["weights"] = detail::weights_to_json(c.weights);
    j["phase1"] = detail::phase_to_json(c.phase1);
    j["phase2"] = detail::phase_to_json(c.phase2);
    j["phase3"] = detail::phase_to_json(c.phase3);
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::read_field;
    RunConfig c;
    check_keys(j, "config",
               {"seed", "out_dir", "field_res", "convert_threshold", "checkpoint_every",
                "turntable_res", "aug_n", "prior2d", "prior3d", "encoder", "prompt", "reference",
                "toy", "schedule", "weights", "phase1", "phase2", "phase3"});
    read_field(j, "seed", c.seed, "config");
    read_field(j, "out_dir", c.out_dir, "config");
    read_field(j, "field_res", c.field_res, "config");
    read_field(j, "convert_threshold", c.convert_threshold, "config");
    read_field(j, "checkpoint_every", c.checkpoint_every, "config");
    read_field(j, "turntable_res", c.turntable_res, "config");
    read_field(j, "aug_n", c.aug_n, "config");
    if (j.contains("prior2d")) c.prior2d = detail::prior_from_json(j.at("prior2d"), "prior2d");
    if (j.contains("prior3d")) c.prior3d = detail::prior_from_json(j.at("prior3d"), "prior3d");
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        check_keys(e, "encoder", {"kind", "dim", "seed", "host", "port", "timeout_ms"});
        read_field(e, "kind", c.encoder.kind, "encoder");
        read_field(e, "dim", c.encoder.dim, "encoder");
        read_field(e, "seed", c.encoder.seed, "encoder");
        read_field(e, "host", c.encoder.host, "encoder");
        read_field(e, "port", c.encoder.port, "encoder");
        read_field(e, "timeout_ms", c.encoder.timeout_ms, "encoder");
    }
    if (j.contains("prompt")) {
        const auto& p = j.at("prompt");
        check_keys(p, "prompt", {"kind", "path"});
        read_field(p, "kind", c.prompt.kind, "prompt");
        read_field(p, "path", c.prompt.path, "prompt");
    }
    if (j.contains("reference")) {
        const auto& r = j.at("reference");
        check_keys(r, "reference",
                   {"kind", "image", "mask", "elevation", "azimuth", "distance", "fov", "res"});
        read_field(r, "kind", c.reference.kind, "reference");
        read_field(r, "image", c.reference.image, "reference");
        read_field(r, "mask", c.reference.mask, "reference");
        read_field(r, "elevation", c.reference.elevation, "reference");
        read_field(r, "azimuth", c.reference.azimuth, "reference");
        read_field(r, "distance", c.reference.distance, "reference");
        read_field(r, "fov", c.reference.fov, "reference");
        read_field(r, "res", c.reference.res, "reference");
    }
    if (j.contains("toy")) {
        const auto& t = j.at("toy");
        check_keys(t, "toy", {"field_res", "view_res", "n_views", "radius", "tau"});
        read_field(t, "field_res", c.toy.field_res, "toy");
        read_field(t, "view_res", c.toy.view_res, "toy");
        read_field(t, "n_views", c.toy.n_views, "toy");
        read_field(t, "radius", c.toy.radius, "toy");
        read_field(t, "tau", c.toy.tau, "toy");
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        check_keys(s, "schedule", {"sigma_min", "sigma_max", "grid_n"});
        read_field(s, "sigma_min", c.schedule.sigma_min, "schedule");
        read_field(s, "sigma_max", c.schedule.sigma_max, "schedule");
        read_field(s, "grid_n", c.schedule.grid_n, "schedule");
    }
    if (j.contains("weights")) c.weights = detail::weights_from_json(j.at("weights"), "weights");
    if (j.contains("phase1")) c.phase1 = detail::phase_from_json(j.at("phase1"), 1, "phase1");
    if (j.contains("phase2")) c.phase2 = detail::phase_from_json(j.at("phase2"), 2, "phase2");
    if (j.contains("phase3")) c.phase3 = detail::phase_from_json(j.at("phase3"), 3, "phase3");
    return c;
}

inline void validate_config(const RunConfig& c) {
    auto one_of = [](const std::string& v, std::initializer_list<const char*> opts) {
        for (const char* o : opts)
            if (v == o) return true;
        return false;
    };
    if (!one_of(c.prior2d.kind, {"gm", "remote"}))
        throw ConfigError("prior2d.kind: expected \"gm\" or \"remote\", got \"" + c.prior2d.kind +
                          "\"");
    if (!one_of(c.prior3d.kind, {"gm", "multiview_oracle", "remote"}))
        throw ConfigError("prior3d.kind: expected \"gm\", \"multiview_oracle\" or \"remote\", "
                          "got \"" +
                          c.prior3d.kind + "\"");
    if (!one_of(c.encoder.kind, {"toy", "remote"}))
        throw ConfigError("encoder.kind: expected \"toy\" or \"remote\", got \"" +
                          c.encoder.kind + "\"");
    if (!one_of(c.prompt.kind, {"reference", "embedding", "image", "audio"}))
        throw ConfigError("prompt.kind: expected \"reference\", \"embedding\", \"image\" or "
                          "\"audio\", got \"" +
                          c.prompt.kind + "\"");
    if (!one_of(c.reference.kind, {"fixture", "image", "blank"}))
        throw ConfigError("reference.kind: expected \"fixture\", \"image\" or \"blank\", got \"" +
                          c.reference.kind + "\"");
    if (c.reference.kind == "fixture" && c.prior3d.kind != "multiview_oracle")
        throw ConfigError("reference.kind: \"fixture\" needs prior3d.kind \"multiview_oracle\"");
    if (c.prior2d.kind == "remote" && c.prior2d.port <= 0)
        throw ConfigError("prior2d.port: remote prior needs a positive port");
    if (c.prior3d.kind == "remote" && c.prior3d.port <= 0)
        throw ConfigError("prior3d.port: remote prior needs a positive port");
    if (c.encoder.kind == "remote" && c.encoder.port <= 0)
        throw ConfigError("encoder.port: remote encoder needs a positive port");
    if (c.field_res < 2) throw ConfigError("field_res: must be at least 2");
    if (c.convert_threshold <= 0) throw ConfigError("convert_threshold: must be > 0");
    if (c.turntable_res < 1) throw ConfigError("turntable_res: must be positive");
    if (c.aug_n < 1) throw ConfigError("aug_n: must be at least 1");
    if (c.schedule.sigma_min <= 0 || c.schedule.sigma_max <= c.schedule.sigma_min)
        throw ConfigError("schedule: need 0 < sigma_min < sigma_max");
    if (c.schedule.grid_n < 2) throw ConfigError("schedule.grid_n: must be at least 2");
    namespace fs = std::filesystem;
    if (c.prompt.kind != "reference") {
        if (c.prompt.path.empty())
            throw ConfigError("prompt.path: required for prompt.kind \"" + c.prompt.kind + "\"");
        if (!fs::exists(c.prompt.path))
            throw ConfigError("prompt.path: file not found: " + c.prompt.path);
    }
    if (c.reference.kind == "image") {
        if (c.reference.image.empty())
            throw ConfigError("reference.image: required for reference.kind \"image\"");
        if (!fs::exists(c.reference.image))
            throw ConfigError("reference.image: file not found: " + c.reference.image);
        if (!c.reference.mask.empty() && !fs::exists(c.reference.mask))
            throw ConfigError("reference.mask: file not found: " + c.reference.mask);
    }
    for (const PhaseConfig* p : {&c.phase1, &c.phase2, &c.phase3}) {
        if (p->iterations < 0) throw ConfigError("phase iterations: must be >= 0");
        if (p->render_res < 1) throw ConfigError("phase render_res: must be positive");
        if (p->n_samples < 1) throw ConfigError("phase n_samples: must be positive");
        if (!(p->lr > 0)) throw ConfigError("phase lr: must be > 0");
        if (!(p->t_min > 0) || !(p->t_max <= 1) || !(p->t_min < p->t_max))
            throw ConfigError("phase timestep range: need 0 < t_min < t_max <= 1");
    }
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    RunConfig c = config_from_json(j);
    validate_config(c);
    return c;
}

// FNV-1a over the canonical serialization, so formatting and key order in the
// source file never change the hash.
inline std::uint64_t config_hash(const RunConfig& c) {
    const std::string s = config_to_json(c).dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace x3d
