#pragma once
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "x3d/camera.hpp"
#include "x3d/encoder.hpp"
#include "x3d/errors.hpp"
#include "x3d/field.hpp"
#include "x3d/image.hpp"
#include "x3d/log.hpp"
#include "x3d/mesh_render.hpp"
#include "x3d/tet.hpp"
#include "x3d/volume_render.hpp"

namespace x3d {

// Evaluation camera: a full orbit in 3 degree steps at fixed elevation.
inline constexpr int kTurntableFrames = 120;
inline constexpr double kTurntableAzimuthStep = 3.0;
inline constexpr double kTurntableElevation = 15.0;
inline constexpr double kTurntableDistance = 2.5;
inline constexpr double kTurntableFov = 40.0;

// Scores reported for the pretrained-prior stack that the analytic oracles in
// this engine stand in for. Context only; nothing asserts them.
inline constexpr double kPretrainedStackClipR = 0.8050;
inline constexpr double kPretrainedStackClipI = 0.8554;
inline constexpr double kPretrainedStackArcc = 0.4860;

struct Turntable {
    std::vector<Image> frames;  // exactly kTurntableFrames
    std::vector<CameraPose> poses;
};

inline CameraPose turntable_pose(int frame, double elevation = kTurntableElevation,
                                 double distance = kTurntableDistance) {
    CameraPose p;
    p.elevation_deg = elevation;
    p.azimuth_deg = kTurntableAzimuthStep * frame;
    p.distance = distance;
    p.fov_deg = kTurntableFov;
    return p;
}

inline Turntable render_turntable(const SurfaceMesh& mesh, int width = 128, int height = 128,
                                  double elevation = kTurntableElevation,
                                  double distance = kTurntableDistance) {
    Turntable t;
    t.frames.reserve(kTurntableFrames);
    t.poses.reserve(kTurntableFrames);
    for (int i = 0; i < kTurntableFrames; ++i) {
        const CameraPose pose = turntable_pose(i, elevation, distance);
        t.poses.push_back(pose);
        t.frames.push_back(render_mesh(mesh, pose, width, height, MeshChannel::Color).rgb);
    }
    return t;
}

inline Turntable render_turntable(const VoxelRadianceField& field, int width = 128,
                                  int height = 128, int n_samples = 48,
                                  double elevation = kTurntableElevation,
                                  double distance = kTurntableDistance) {
    Turntable t;
    t.frames.reserve(kTurntableFrames);
    t.poses.reserve(kTurntableFrames);
    for (int i = 0; i < kTurntableFrames; ++i) {
        const CameraPose pose = turntable_pose(i, elevation, distance);
        const RayBatch rays = generate_rays(pose, width, height);
        t.poses.push_back(pose);
        t.frames.push_back(render_volume(field, rays, n_samples, nullptr).rgb);
    }
    return t;
}

// Cosine similarity clamped into [-1, 1]; either vector all-zero counts as
// orthogonal.
inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw DomainError("cosine: embedding dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

namespace detail {

inline void check_turntable(const Turntable& t) {
    if (int(t.frames.size()) != kTurntableFrames)
        throw DomainError("turntable must hold exactly " + std::to_string(kTurntableFrames) +
                          " frames, got " + std::to_string(t.frames.size()));
}

// Highest-cosine prompt for one embedding; ties keep the lower index.
inline std::size_t top1(const std::vector<double>& e,
                        const std::vector<std::vector<double>>& prompts) {
    std::size_t best = 0;
    double best_cos = cosine(e, prompts[0]);
    for (std::size_t j = 1; j < prompts.size(); ++j) {
        const double c = cosine(e, prompts[j]);
        if (c == best_cos)
            log::warn("clip_r: prompts %zu and %zu tie at cosine %.6f; keeping the lower index",
                      best, j, best_cos);
        if (c > best_cos) {
            best_cos = c;
            best = j;
        }
    }
    return best;
}

} // namespace detail

// Mean cosine between one modality embedding and the embedded frames.
inline double arcc(const std::vector<double>& modality_embedding, const Turntable& t,
                   const ImageEncoder& encoder) {
    detail::check_turntable(t);
    double acc = 0;
    for (const Image& f : t.frames) acc += cosine(modality_embedding, encoder.embed(f));
    return acc / double(t.frames.size());
}

// Top-1 retrieval precision. Per frame: embed, rank every prompt by cosine,
// score a hit when the top prompt is the object's own; frames average within
// an object, objects average to the result. per_object_best instead pools each
// object's frames by their best cosine per prompt and retrieves once.
inline double clip_r(const std::vector<std::vector<double>>& prompts,
                     const std::vector<Turntable>& objects,
                     const std::vector<std::size_t>& true_prompt, const ImageEncoder& encoder,
                     bool per_object_best = false) {
    if (prompts.empty()) throw DomainError("clip_r: empty prompt set");
    if (objects.empty()) throw DomainError("clip_r: no objects");
    if (objects.size() != true_prompt.size())
        throw DomainError("clip_r: need one true prompt per object");
    for (std::size_t idx : true_prompt)
        if (idx >= prompts.size()) throw DomainError("clip_r: true prompt index out of range");

    double total = 0;
    for (std::size_t o = 0; o < objects.size(); ++o) {
        const Turntable& t = objects[o];
        detail::check_turntable(t);
        if (per_object_best) {
            std::vector<double> best(prompts.size(), -2.0);
            for (const Image& f : t.frames) {
                const std::vector<double> e = encoder.embed(f);
                for (std::size_t j = 0; j < prompts.size(); ++j)
                    best[j] = std::max(best[j], cosine(e, prompts[j]));
            }
            std::size_t top = 0;
            for (std::size_t j = 1; j < prompts.size(); ++j)
                if (best[j] > best[top]) top = j;
            total += top == true_prompt[o] ? 1.0 : 0.0;
        } else {
            int hits = 0;
            for (const Image& f : t.frames)
                if (detail::top1(encoder.embed(f), prompts) == true_prompt[o]) ++hits;
            total += double(hits) / double(t.frames.size());
        }
    }
    return total / double(objects.size());
}

// Object o's true prompt is prompts[o]; extra prompts act as distractors.
inline double clip_r(const std::vector<std::vector<double>>& prompts,
                     const std::vector<Turntable>& objects, const ImageEncoder& encoder,
                     bool per_object_best = false) {
    if (objects.size() > prompts.size())
        throw DomainError("clip_r: more objects than prompts");
    std::vector<std::size_t> idx(objects.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return clip_r(prompts, objects, idx, encoder, per_object_best);
}

// Mean cosine between the embedded reference image and the embedded frames.
inline double clip_i(const Image& reference, const Turntable& t, const ImageEncoder& encoder) {
    detail::check_turntable(t);
    const std::vector<double> e_ref = encoder.embed(reference);
    double acc = 0;
    for (const Image& f : t.frames) acc += cosine(e_ref, encoder.embed(f));
    return acc / double(t.frames.size());
}

// Mean absolute per-channel difference across two equally sized frame sets.
inline double turntable_pixel_error(const Turntable& a, const Turntable& b) {
    if (a.frames.size() != b.frames.size())
        throw DomainError("turntable_pixel_error: frame count mismatch");
    if (a.frames.empty()) throw DomainError("turntable_pixel_error: empty turntables");
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.frames.size(); ++i) {
        const Image& fa = a.frames[i];
        const Image& fb = b.frames[i];
        if (fa.width != fb.width || fa.height != fb.height || fa.channels != fb.channels)
            throw DomainError("turntable_pixel_error: frame shape mismatch");
        for (std::size_t p = 0; p < fa.data.size(); ++p) acc += std::abs(fa.data[p] - fb.data[p]);
        n += fa.data.size();
    }
    return acc / double(n);
}

struct MetricsReport {
    double clip_r = 0;
    double clip_i = 0;
    double arcc = 0;
    int n_frames = kTurntableFrames;
    std::string encoder;
};

inline std::string metrics_to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["clip_r"] = r.clip_r;
    j["clip_i"] = r.clip_i;
    j["arcc"] = r.arcc;
    j["n_frames"] = r.n_frames;
    j["encoder"] = r.encoder;
    return j.dump() + "\n";
}

inline void write_metrics(const std::string& path, const MetricsReport& r) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("write_metrics: cannot open " + path);
    f << metrics_to_json(r);
    if (!f) throw Error("write_metrics: write failed for " + path);
}

inline void write_turntable_frames(const std::string& dir, const Turntable& t) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < t.frames.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%03zu.ppm", i);
        write_ppm(dir + "/" + name, t.frames[i]);
    }
}

} // namespace x3d
