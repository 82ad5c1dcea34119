#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "x3d/camera.hpp"
#include "x3d/codec.hpp"
#include "x3d/errors.hpp"
#include "x3d/image.hpp"
#include "x3d/schedule.hpp"
#include "x3d/vec.hpp"

namespace x3d {

// Condition handed to a denoiser: either a modality embedding, or a
// reference view paired with the relative camera transform from the
// reference pose to the queried pose.
struct PriorCondition {
    enum class Kind { Embedding, View };
    Kind kind = Kind::Embedding;
    std::vector<double> embedding;
    Image reference;
    Mat3 rotation = Mat3::identity();
    Vec3 translation{0, 0, 0};
};

inline PriorCondition embedding_condition(std::vector<double> e) {
    double n2 = 0;
    for (double v : e) n2 += v * v;
    if (!(n2 > 0)) throw DomainError("embedding condition must be a nonzero vector");
    const double inv = 1.0 / std::sqrt(n2);
    for (double& v : e) v *= inv;
    PriorCondition c;
    c.kind = PriorCondition::Kind::Embedding;
    c.embedding = std::move(e);
    return c;
}

// World-to-camera extrinsics: x_cam = R x_world + t with R = pose.rotation().
inline Vec3 extrinsic_translation(const CameraPose& pose) {
    return -(pose.rotation() * pose.position());
}

// Transform mapping reference-camera coordinates to query-camera coordinates.
inline Mat3 relative_rotation(const CameraPose& ref, const CameraPose& query) {
    return query.rotation() * ref.rotation().transposed();
}

inline PriorCondition view_condition(const Image& reference, const CameraPose& ref_pose,
                                     const CameraPose& query_pose) {
    PriorCondition c;
    c.kind = PriorCondition::Kind::View;
    c.reference = reference;
    c.rotation = relative_rotation(ref_pose, query_pose);
    c.translation = extrinsic_translation(query_pose) - c.rotation * extrinsic_translation(ref_pose);
    return c;
}

// Geodesic angle between two rotations, in radians.
inline double rotation_angle(const Mat3& a, const Mat3& b) {
    const Mat3 rel = a * b.transposed();
    const double tr = rel.m[0][0] + rel.m[1][1] + rel.m[2][2];
    return std::acos(std::clamp((tr - 1.0) * 0.5, -1.0, 1.0));
}

// x0-prediction denoiser: denoise returns an estimate of the clean latent.
// Implementations must be pure functions of (z_t, t, cond).
class Denoiser {
public:
    virtual ~Denoiser() = default;

    virtual Latent denoise(const Latent& z_t, double t, const PriorCondition& cond) const = 0;

    // Cotangent pullback g^T dD/dz_t. The default is the zero pullback, exact
    // for priors whose output is constant in z_t and the documented
    // stop-gradient treatment for priors with no reachable Jacobian.
    virtual std::vector<double> denoise_vjp(const Latent& z_t, double t,
                                            const PriorCondition& cond,
                                            const std::vector<double>& g) const {
        (void)t;
        (void)cond;
        (void)g;
        return std::vector<double>(z_t.size(), 0.0);
    }
};

struct GmComponent {
    double weight = 1.0;
    std::vector<double> mean;
    double stddev = 0.0;
};

// Gaussian-mixture clean-data prior with the exact posterior mean as its
// denoiser. Under z0 ~ sum_k pi_k N(mu_k, s_k^2 I) and z_t = z0 + sigma(t) e
// the responsibilities are r_k ∝ pi_k N(z_t; mu_k, (s_k^2 + sigma^2) I) and
// the posterior mean is sum_k r_k (s_k^2 z_t + sigma^2 mu_k) / (s_k^2 + sigma^2).
class GmPrior : public Denoiser {
public:
    GmPrior(std::vector<GmComponent> components, NoiseSchedule schedule)
        : comps_(std::move(components)), schedule_(schedule) {
        if (comps_.empty()) throw DomainError("gm prior needs at least one component");
        double wsum = 0;
        for (const GmComponent& c : comps_) {
            if (c.weight < 0) throw DomainError("gm component weight must be >= 0");
            if (c.stddev < 0) throw DomainError("gm component stddev must be >= 0");
            if (c.mean.size() != comps_.front().mean.size())
                throw DomainError("gm component means must share one dimension");
            wsum += c.weight;
        }
        if (std::abs(wsum - 1.0) > 1e-9) throw DomainError("gm component weights must sum to 1");
    }

    const NoiseSchedule& schedule() const { return schedule_; }

    Latent denoise(const Latent& z_t, double t, const PriorCondition& cond) const override {
        (void)cond;
        const std::vector<double> r = responsibilities(z_t, t);
        const double s2 = sigma2(t);
        Latent out = z_t;
        std::fill(out.data.begin(), out.data.end(), 0.0);
        for (std::size_t k = 0; k < comps_.size(); ++k) {
            const GmComponent& c = comps_[k];
            const double v = c.stddev * c.stddev + s2;
            const double a = r[k] * c.stddev * c.stddev / v;
            const double b = r[k] * s2 / v;
            for (std::size_t i = 0; i < out.data.size(); ++i)
                out.data[i] += a * z_t.data[i] + b * c.mean[i];
        }
        return out;
    }

    std::vector<double> denoise_vjp(const Latent& z_t, double t, const PriorCondition& cond,
                                    const std::vector<double>& g) const override {
        (void)cond;
        if (g.size() != z_t.size()) throw DomainError("gm vjp cotangent size mismatch");
        const std::vector<double> r = responsibilities(z_t, t);
        const double s2 = sigma2(t);
        const std::size_t d = z_t.size();
        const std::size_t K = comps_.size();

        // zhat = sum_k r_k a_k with a_k = (s_k^2 z + sigma^2 mu_k) / v_k, so
        // g^T dzhat/dz = sum_k r_k (s_k^2 / v_k) g
        //             + sum_k (g . a_k) r_k (grad log N_k - sum_j r_j grad log N_j)
        // with grad log N_k = (mu_k - z) / v_k.
        std::vector<double> out(d, 0.0);
        double diag = 0;
        for (std::size_t k = 0; k < K; ++k) {
            const double v = comps_[k].stddev * comps_[k].stddev + s2;
            diag += r[k] * comps_[k].stddev * comps_[k].stddev / v;
        }
        for (std::size_t i = 0; i < d; ++i) out[i] = diag * g[i];

        std::vector<double> g_dot_a(K, 0.0);
        for (std::size_t k = 0; k < K; ++k) {
            const GmComponent& c = comps_[k];
            const double v = c.stddev * c.stddev + s2;
            double acc = 0;
            for (std::size_t i = 0; i < d; ++i)
                acc += g[i] * (c.stddev * c.stddev * z_t.data[i] + s2 * c.mean[i]) / v;
            g_dot_a[k] = acc;
        }
        std::vector<double> gbar(d, 0.0);
        for (std::size_t k = 0; k < K; ++k) {
            const double v = comps_[k].stddev * comps_[k].stddev + s2;
            for (std::size_t i = 0; i < d; ++i)
                gbar[i] += r[k] * (comps_[k].mean[i] - z_t.data[i]) / v;
        }
        for (std::size_t k = 0; k < K; ++k) {
            const double v = comps_[k].stddev * comps_[k].stddev + s2;
            const double coef = g_dot_a[k] * r[k];
            for (std::size_t i = 0; i < d; ++i)
                out[i] += coef * ((comps_[k].mean[i] - z_t.data[i]) / v - gbar[i]);
        }
        return out;
    }

private:
    double sigma2(double t) const {
        const double s = schedule_.sigma(t);
        return s * s;
    }

    std::vector<double> responsibilities(const Latent& z_t, double t) const {
        const std::size_t d = z_t.size();
        if (comps_.front().mean.size() != d)
            throw DomainError("gm prior dimension does not match the latent");
        const double s2 = sigma2(t);
        const std::size_t K = comps_.size();
        std::vector<double> logw(K);
        for (std::size_t k = 0; k < K; ++k) {
            const GmComponent& c = comps_[k];
            const double v = c.stddev * c.stddev + s2;
            if (!(v > 0)) throw DomainError("gm posterior undefined: zero total variance");
            double dist2 = 0;
            for (std::size_t i = 0; i < d; ++i) {
                const double r = z_t.data[i] - c.mean[i];
                dist2 += r * r;
            }
            logw[k] = std::log(c.weight) - 0.5 * double(d) * std::log(2.0 * kPi * v) -
                      dist2 / (2.0 * v);
        }
        const double m = *std::max_element(logw.begin(), logw.end());
        double norm = 0;
        std::vector<double> r(K);
        for (std::size_t k = 0; k < K; ++k) {
            r[k] = std::exp(logw[k] - m);
            norm += r[k];
        }
        for (double& v : r) v /= norm;
        return r;
    }

    static constexpr double kPi = 3.14159265358979323846;

    std::vector<GmComponent> comps_;
    NoiseSchedule schedule_;
};

// Pose-indexed table of ground-truth renders standing in for a
// view-conditioned prior: the denoised estimate is the encoded stored render
// whose camera rotation is angularly nearest the queried view. The output is
// constant in z_t, so the inherited zero pullback is exact.
class MultiviewOraclePrior : public Denoiser {
public:
    MultiviewOraclePrior() = default;
    explicit MultiviewOraclePrior(const CameraPose& reference_pose) : ref_pose_(reference_pose) {}

    void add_view(const CameraPose& pose, const Image& render) { views_.push_back({pose, render}); }

    std::size_t view_count() const { return views_.size(); }
    const CameraPose& reference_pose() const { return ref_pose_; }

    // Index of the stored view angularly nearest the query rotation; ties
    // resolve to the lowest index.
    std::size_t nearest_view(const Mat3& query_rotation) const {
        if (views_.empty()) throw DenoiserUnavailable("multiview oracle holds no stored views");
        std::size_t best = 0;
        double best_angle = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < views_.size(); ++i) {
            const double a = rotation_angle(views_[i].pose.rotation(), query_rotation);
            if (a < best_angle) {
                best_angle = a;
                best = i;
            }
        }
        return best;
    }

    Latent denoise(const Latent& z_t, double t, const PriorCondition& cond) const override {
        (void)t;
        if (views_.empty()) throw DenoiserUnavailable("multiview oracle holds no stored views");
        if (cond.kind != PriorCondition::Kind::View)
            throw DenoiserUnavailable("multiview oracle requires a view condition");
        // The condition carries the transform from the reference pose, so the
        // queried camera rotation is R_rel * R_ref.
        const Mat3 query_rot = cond.rotation * ref_pose_.rotation();
        const Image& render = views_[nearest_view(query_rot)].render;
        if (render.channels != z_t.channels)
            throw DomainError("multiview oracle channel count does not match the latent");
        if (render.width == z_t.width && render.height == z_t.height)
            return latent_from_image(render);
        return latent_from_image(resize_bilinear(render, z_t.width, z_t.height));
    }

private:
    struct StoredView {
        CameraPose pose;
        Image render;
    };

    CameraPose ref_pose_;
    std::vector<StoredView> views_;
};

} // namespace x3d
