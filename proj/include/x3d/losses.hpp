#pragma once
#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "x3d/camera.hpp"
#include "x3d/codec.hpp"
#include "x3d/encoder.hpp"
#include "x3d/errors.hpp"
#include "x3d/image.hpp"
#include "x3d/ms_loss.hpp"
#include "x3d/prior.hpp"
#include "x3d/rng.hpp"
#include "x3d/schedule.hpp"
#include "x3d/volume_render.hpp"

namespace x3d {

struct LossWeights {
    double ms = 1.0;
    double cds = 1.0;
    double star = 1.0;   // scales the full augmented-SDS surrogate
    double img = 0.1;    // image-space residual inside augmented SDS
    double nz = 0.5;     // depth-variance regularizer
    double sds3d = 1.0;  // 3D-aware branch inside the stereoscopic bundle
    double rgb = 5.0;    // reference-view color term
    double mask = 0.5;   // reference-view mask term
    MsWeights ms_branch;
    // Timestep weighting hook; unset means lambda(t) = 1.
    std::function<double(double)> lambda;

    double lambda_at(double t) const { return lambda ? lambda(t) : 1.0; }
};

struct ReferenceView {
    Image x_r;
    Image mask;  // single channel, values in {0, 1}
    CameraPose pose;
};

// Instrumentation probe: each loss op bumps its counter when it evaluates.
struct LossCallCounts {
    int ms = 0;
    int sds = 0;
    int aug_sds = 0;
    int cds = 0;
    int sds3d = 0;
    int ref = 0;
    int nz = 0;
    int nc = 0;
    int ls = 0;
    int nv = 0;
};

namespace detail {

inline void check_eps(const Latent& z, const Latent& eps) {
    if (eps.channels != z.channels || eps.height != z.height || eps.width != z.width)
        throw DomainError("noise tensor shape does not match the latent");
}

inline double half_sq_norm(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double r = a[i] - b[i];
        acc += r * r;
    }
    return 0.5 * acc;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Score distillation. Every loss keeps the denoised estimate behind a stop
// gradient by construction: the frozen-target parameter re-evaluates the loss
// at a fixed target, which is what finite differences must probe. Passing
// nullptr computes the target fresh from the current input.
// ---------------------------------------------------------------------------

struct SdsTargets {
    Latent zhat;
    double lambda_t = 1;
};

inline SdsTargets sds_targets(const Denoiser& prior, const NoiseSchedule& sched, const Image& x,
                              double t, const PriorCondition& cond, const Latent& eps,
                              const LossWeights& w) {
    const Latent z = latent_from_image(x);
    detail::check_eps(z, eps);
    const double sigma = sched.sigma(t);
    Latent z_t = z;
    for (std::size_t i = 0; i < z_t.data.size(); ++i) z_t.data[i] += sigma * eps.data[i];
    SdsTargets tg;
    tg.zhat = prior.denoise(z_t, t, cond);
    if (tg.zhat.size() != z.size()) throw DomainError("denoiser changed the latent size");
    tg.lambda_t = w.lambda_at(t);
    return tg;
}

// Latent-residual surrogate lambda(t)/2 ||z - sg(zhat)||^2 whose pixel
// gradient is lambda(t) (z - zhat) pulled through the codec.
inline double sds_grad(const Denoiser& prior, const NoiseSchedule& sched, const Image& x, double t,
                       const PriorCondition& cond, const Latent& eps, const LossWeights& w,
                       Image* g_pixels = nullptr, const SdsTargets* frozen = nullptr,
                       LossCallCounts* counts = nullptr) {
    if (counts) ++counts->sds;
    const SdsTargets local = frozen ? SdsTargets{} : sds_targets(prior, sched, x, t, cond, eps, w);
    const SdsTargets& tg = frozen ? *frozen : local;
    const Latent z = latent_from_image(x);
    const double loss = tg.lambda_t * detail::half_sq_norm(z.data, tg.zhat.data);
    if (g_pixels) {
        Latent g_z = z;
        for (std::size_t i = 0; i < g_z.data.size(); ++i)
            g_z.data[i] = tg.lambda_t * (z.data[i] - tg.zhat.data[i]);
        latent_from_image_backward(g_z, *g_pixels);
    }
    return loss;
}

struct AugSdsTargets {
    Latent zhat;
    Image xhat;
    double lambda_t = 1;
};

inline AugSdsTargets aug_sds_targets(const Denoiser& prior, const NoiseSchedule& sched,
                                     const Image& x, double t, const PriorCondition& cond,
                                     const Latent& eps, const LossWeights& w) {
    const SdsTargets base = sds_targets(prior, sched, x, t, cond, eps, w);
    AugSdsTargets tg;
    tg.zhat = base.zhat;
    tg.xhat = image_from_latent(base.zhat);
    tg.lambda_t = base.lambda_t;
    return tg;
}

struct AugSdsResult {
    double loss = 0;
    double surrogate = 0;  // weighted latent + image residual part
    double nz = 0;         // weighted depth-variance part
};

// Image-space extension of the latent surrogate plus, for radiance-field
// renders only, the depth-variance regularizer: the caller signals the NeRF
// phase by passing the volume-render output.
inline AugSdsResult aug_sds_loss(const Denoiser& prior, const NoiseSchedule& sched, const Image& x,
                                 double t, const PriorCondition& cond, const Latent& eps,
                                 const LossWeights& w, const RenderOutput* nerf = nullptr,
                                 Image* g_pixels = nullptr, std::vector<double>* g_zvar = nullptr,
                                 const AugSdsTargets* frozen = nullptr,
                                 LossCallCounts* counts = nullptr) {
    if (counts) ++counts->aug_sds;
    const AugSdsTargets local =
        frozen ? AugSdsTargets{} : aug_sds_targets(prior, sched, x, t, cond, eps, w);
    const AugSdsTargets& tg = frozen ? *frozen : local;
    const Latent z = latent_from_image(x);

    AugSdsResult r;
    const double latent_part = detail::half_sq_norm(z.data, tg.zhat.data);
    const double image_part = detail::half_sq_norm(x.data, tg.xhat.data);
    r.surrogate = w.star * tg.lambda_t * (latent_part + w.img * image_part);
    if (nerf) {
        std::vector<double> g_nz;
        r.nz = w.nz * nz_loss(*nerf, g_zvar ? &g_nz : nullptr);
        if (counts) ++counts->nz;
        if (g_zvar) {
            g_zvar->assign(g_nz.size(), 0.0);
            for (std::size_t i = 0; i < g_nz.size(); ++i) (*g_zvar)[i] = w.nz * g_nz[i];
        }
    } else if (g_zvar) {
        g_zvar->clear();
    }
    r.loss = r.surrogate + r.nz;

    if (g_pixels) {
        const double coef = w.star * tg.lambda_t;
        Latent g_z = z;
        for (std::size_t i = 0; i < g_z.data.size(); ++i)
            g_z.data[i] = coef * (z.data[i] - tg.zhat.data[i]);
        latent_from_image_backward(g_z, *g_pixels);
        for (std::size_t i = 0; i < x.data.size(); ++i)
            g_pixels->data[i] += coef * w.img * (x.data[i] - tg.xhat.data[i]);
    }
    return r;
}

struct CdsTargets {
    Latent target;  // denoised estimate of the less-noisy Euler sample
    double lambda_t2 = 1;
};

inline CdsTargets cds_targets(const Denoiser& prior, const NoiseSchedule& sched, const Image& x,
                              double t1, double t2, const PriorCondition& cond, const Latent& eps,
                              const LossWeights& w) {
    const double s1 = sched.sigma(t1);
    const double s2 = sched.sigma(t2);
    const Latent z = latent_from_image(x);
    detail::check_eps(z, eps);
    Latent z1 = z;
    for (std::size_t i = 0; i < z1.data.size(); ++i) z1.data[i] += s1 * eps.data[i];
    const Latent d1 = prior.denoise(z1, t1, cond);
    Latent z2 = z1;
    const double step = (s2 - s1) / s1;
    for (std::size_t i = 0; i < z2.data.size(); ++i)
        z2.data[i] = z1.data[i] + step * (z1.data[i] - d1.data[i]);
    CdsTargets tg;
    tg.target = prior.denoise(z2, t2, cond);
    tg.lambda_t2 = w.lambda_at(t2);
    return tg;
}

// Consistency distillation: one deterministic Euler step of the probability
// flow from t1 down to t2; the denoised estimate of the stepped sample
// supervises the noisier branch through a stop gradient. The live branch's
// gradient runs through the denoiser pullback.
inline double cds_loss(const Denoiser& prior, const NoiseSchedule& sched, const Image& x,
                       double t1, double t2, const PriorCondition& cond, const Latent& eps,
                       const LossWeights& w, Image* g_pixels = nullptr,
                       const CdsTargets* frozen = nullptr, LossCallCounts* counts = nullptr) {
    if (t1 < t2) throw DomainError("consistency step needs t1 >= t2");
    if (counts) ++counts->cds;
    const CdsTargets local =
        frozen ? CdsTargets{} : cds_targets(prior, sched, x, t1, t2, cond, eps, w);
    const CdsTargets& tg = frozen ? *frozen : local;

    const double s1 = sched.sigma(t1);
    const Latent z = latent_from_image(x);
    detail::check_eps(z, eps);
    Latent z1 = z;
    for (std::size_t i = 0; i < z1.data.size(); ++i) z1.data[i] += s1 * eps.data[i];
    const Latent d1 = prior.denoise(z1, t1, cond);

    double acc = 0;
    for (std::size_t i = 0; i < d1.data.size(); ++i) {
        const double r = d1.data[i] - tg.target.data[i];
        acc += r * r;
    }
    const double loss = tg.lambda_t2 * acc;

    if (g_pixels) {
        std::vector<double> g_d1(d1.size());
        for (std::size_t i = 0; i < d1.size(); ++i)
            g_d1[i] = 2.0 * tg.lambda_t2 * (d1.data[i] - tg.target.data[i]);
        const std::vector<double> g_z1 = prior.denoise_vjp(z1, t1, cond, g_d1);
        Latent g_z = z;
        g_z.data = g_z1;
        latent_from_image_backward(g_z, *g_pixels);
    }
    return loss;
}

struct Sds3dTargets {
    Latent zhat;
    double lambda_t = 1;
};

inline Sds3dTargets sds3d_targets(const Denoiser& prior3d, const NoiseSchedule& sched,
                                  const Image& x, double t, const ReferenceView& ref,
                                  const CameraPose& pose, const Latent& eps,
                                  const LossWeights& w) {
    const PriorCondition cond = view_condition(ref.x_r, ref.pose, pose);
    const SdsTargets base = sds_targets(prior3d, sched, x, t, cond, eps, w);
    return {base.zhat, base.lambda_t};
}

// View-conditioned score distillation: the condition carries the reference
// image and the relative transform from the reference pose to the rendered
// pose. Returns the unweighted surrogate; the stereoscopic composition
// applies its branch weight exactly once.
inline double sds3d_grad(const Denoiser& prior3d, const NoiseSchedule& sched, const Image& x,
                         double t, const ReferenceView& ref, const CameraPose& pose,
                         const Latent& eps, const LossWeights& w, Image* g_pixels = nullptr,
                         const Sds3dTargets* frozen = nullptr, LossCallCounts* counts = nullptr) {
    if (counts) ++counts->sds3d;
    const Sds3dTargets local =
        frozen ? Sds3dTargets{} : sds3d_targets(prior3d, sched, x, t, ref, pose, eps, w);
    const Sds3dTargets& tg = frozen ? *frozen : local;
    const Latent z = latent_from_image(x);
    const double loss = tg.lambda_t * detail::half_sq_norm(z.data, tg.zhat.data);
    if (g_pixels) {
        Latent g_z = z;
        for (std::size_t i = 0; i < g_z.data.size(); ++i)
            g_z.data[i] = tg.lambda_t * (z.data[i] - tg.zhat.data[i]);
        latent_from_image_backward(g_z, *g_pixels);
    }
    return loss;
}

struct RefResult {
    double loss = 0;
    double rgb_term = 0;
    double mask_term = 0;
};

// Reference-view reconstruction: masked color squared error plus mask
// agreement, with the predicted foreground as clamped accumulated alpha.
inline RefResult ref_loss(const Image& render_at_ref, const std::vector<double>& alpha,
                          const ReferenceView& ref, const LossWeights& w,
                          Image* g_pixels = nullptr, std::vector<double>* g_alpha = nullptr,
                          LossCallCounts* counts = nullptr) {
    if (counts) ++counts->ref;
    const int wpx = render_at_ref.width;
    const int hpx = render_at_ref.height;
    if (ref.x_r.width != wpx || ref.x_r.height != hpx ||
        ref.x_r.channels != render_at_ref.channels)
        throw DomainError("reference image shape does not match the render");
    if (ref.mask.width != wpx || ref.mask.height != hpx || ref.mask.channels != 1)
        throw DomainError("reference mask shape does not match the render");
    if (alpha.size() != std::size_t(wpx) * hpx)
        throw DomainError("alpha size does not match the render");

    if (g_alpha) g_alpha->assign(alpha.size(), 0.0);
    RefResult r;
    for (int y = 0; y < hpx; ++y) {
        for (int x = 0; x < wpx; ++x) {
            const double m = ref.mask.at(x, y, 0);
            for (int c = 0; c < render_at_ref.channels; ++c) {
                const double diff = ref.x_r.at(x, y, c) - render_at_ref.at(x, y, c);
                r.rgb_term += m * diff * diff;
                if (g_pixels) g_pixels->at(x, y, c) += 2.0 * w.rgb * m * (-diff);
            }
            const double a = alpha[std::size_t(y) * wpx + x];
            const double clamped = std::min(1.0, std::max(0.0, a));
            const double dm = m - clamped;
            r.mask_term += dm * dm;
            if (g_alpha && a > 0.0 && a < 1.0)
                (*g_alpha)[std::size_t(y) * wpx + x] = 2.0 * w.mask * (clamped - m);
        }
    }
    r.rgb_term *= w.rgb;
    r.mask_term *= w.mask;
    r.loss = r.rgb_term + r.mask_term;
    return r;
}

// ---------------------------------------------------------------------------
// Compositions
// ---------------------------------------------------------------------------

enum class PlanarPhase { S, C };  // S: augmented SDS branch, C: consistency branch

struct PlanarInputs {
    const Denoiser* prior = nullptr;
    const NoiseSchedule* schedule = nullptr;
    const ImageEncoder* encoder = nullptr;
    std::vector<double> prompt;  // modality embedding C_m
    AugmentationSpec aug;
    double t = 0.5;     // timestep for the S branch
    int cds_index = 1;  // schedule grid index for the C branch pair
    Latent eps;
};

struct PlanarResult {
    double loss = 0;
    double ms = 0;      // weighted modality-similarity term
    double branch = 0;  // weighted SDS or CDS term
    double nz = 0;      // weighted depth-variance part (S branch on NeRF only)
};

// Pixel-level planar supervision: the modality-similarity term plus exactly
// one diffusion branch selected by the phase.
inline PlanarResult planar_loss(PlanarPhase phase, const PlanarInputs& in, const Image& x,
                                const RenderOutput* nerf, const LossWeights& w, Rng& rng,
                                Image* g_pixels = nullptr, std::vector<double>* g_zvar = nullptr,
                                LossCallCounts* counts = nullptr) {
    if (!in.prior || !in.schedule || !in.encoder)
        throw ConfigError("planar loss needs a prior, schedule, and encoder");
    PlanarResult r;

    if (counts) ++counts->ms;
    std::vector<Image> ms_grads;
    const MsResult ms = ms_loss(in.prompt, {x}, in.aug, w.ms_branch, *in.encoder, rng,
                                g_pixels ? &ms_grads : nullptr);
    r.ms = w.ms * ms.loss;
    if (g_pixels)
        for (std::size_t i = 0; i < g_pixels->data.size(); ++i)
            g_pixels->data[i] += w.ms * ms_grads[0].data[i];

    const PriorCondition cond = embedding_condition(in.prompt);
    if (phase == PlanarPhase::S) {
        const AugSdsResult a = aug_sds_loss(*in.prior, *in.schedule, x, in.t, cond, in.eps, w,
                                            nerf, g_pixels, g_zvar, nullptr, counts);
        r.branch = a.surrogate;
        r.nz = a.nz;
    } else {
        const auto [t1, t2] = in.schedule->adjacent_pair(in.cds_index);
        Image g_cds;
        if (g_pixels) g_cds = Image(x.width, x.height, x.channels);
        const double c = cds_loss(*in.prior, *in.schedule, x, t1, t2, cond, in.eps, w,
                                  g_pixels ? &g_cds : nullptr, nullptr, counts);
        r.branch = w.cds * c;
        if (g_pixels)
            for (std::size_t i = 0; i < g_pixels->data.size(); ++i)
                g_pixels->data[i] += w.cds * g_cds.data[i];
        if (g_zvar) g_zvar->clear();
    }
    r.loss = r.ms + r.branch + r.nz;
    return r;
}

struct StereoResult {
    double loss = 0;
    double sds3d = 0;  // weighted 3D-aware branch
    double ref = 0;    // reference reconstruction total
    double ref_rgb = 0;
    double ref_mask = 0;
};

// Spatial-level stereoscopic supervision: the view-conditioned distillation
// branch, weighted once here, plus the reference-view reconstruction.
inline StereoResult stereo_loss(const Denoiser& prior3d, const NoiseSchedule& sched,
                                const Image& x_view, double t, const ReferenceView& ref,
                                const CameraPose& pose, const Latent& eps,
                                const Image& render_at_ref, const std::vector<double>& alpha_ref,
                                const LossWeights& w, Image* g_view = nullptr,
                                Image* g_ref_pixels = nullptr,
                                std::vector<double>* g_alpha = nullptr,
                                LossCallCounts* counts = nullptr) {
    StereoResult r;
    Image g_sds3d;
    if (g_view) g_sds3d = Image(x_view.width, x_view.height, x_view.channels);
    const double raw =
        sds3d_grad(prior3d, sched, x_view, t, ref, pose, eps, w, g_view ? &g_sds3d : nullptr,
                   nullptr, counts);
    r.sds3d = w.sds3d * raw;
    if (g_view)
        for (std::size_t i = 0; i < g_view->data.size(); ++i)
            g_view->data[i] += w.sds3d * g_sds3d.data[i];

    const RefResult rr =
        ref_loss(render_at_ref, alpha_ref, ref, w, g_ref_pixels, g_alpha, counts);
    r.ref = rr.loss;
    r.ref_rgb = rr.rgb_term;
    r.ref_mask = rr.mask_term;
    r.loss = r.sds3d + r.ref;
    return r;
}

struct HybridResult {
    double loss = 0;
    PlanarResult planar;
    StereoResult stereo;
};

// Full per-iteration objective: pixel-level planar supervision and
// spatial-level stereoscopic supervision over the same rendered view, plus
// the reference reconstruction. Gradient buffers accumulate, so callers pass
// zeroed images. The sampled timestep and noise are shared by both diffusion
// branches; the priors may differ.
inline HybridResult hybrid_loss(PlanarPhase phase, const PlanarInputs& in,
                                const Denoiser& prior3d, const Image& x, const RenderOutput* nerf,
                                const ReferenceView& ref, const CameraPose& pose,
                                const Image& render_at_ref, const std::vector<double>& alpha_ref,
                                const LossWeights& w, Rng& rng, Image* g_view = nullptr,
                                std::vector<double>* g_zvar = nullptr,
                                Image* g_ref_pixels = nullptr,
                                std::vector<double>* g_alpha = nullptr,
                                LossCallCounts* counts = nullptr) {
    HybridResult h;
    h.planar = planar_loss(phase, in, x, nerf, w, rng, g_view, g_zvar, counts);
    h.stereo = stereo_loss(prior3d, *in.schedule, x, in.t, ref, pose, in.eps, render_at_ref,
                           alpha_ref, w, g_view, g_ref_pixels, g_alpha, counts);
    h.loss = h.planar.loss + h.stereo.loss;
    return h;
}

} // namespace x3d
