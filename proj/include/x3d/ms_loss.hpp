#pragma once
#include <cmath>
#include <cstddef>
#include <vector>

#include "x3d/augment.hpp"
#include "x3d/encoder.hpp"
#include "x3d/errors.hpp"
#include "x3d/image.hpp"
#include "x3d/rng.hpp"

namespace x3d {

struct MsWeights {
    double g = 1.0;
    double l = 1.0;
    double z = 1.0;
};

struct MsResult {
    double loss = 0;
    // Per-branch alignment sums sum_i W_i * mean_images cos(C_m, E(a_i(x))),
    // before negation and branch weighting.
    double align_g = 0;
    double align_l = 0;
    double align_z = 0;
};

// Modality similarity loss. Each augmentation branch (perspective, crop,
// normalize) accumulates prompt-to-render cosine alignment over spec.n
// draws; the total is negated so that gradient descent increases alignment.
// One transform is drawn per (branch, draw) and shared across all images, so
// the value is invariant to image order. Pixel gradients flow through the
// encoder and the augmentation resampling.
inline MsResult ms_loss(const std::vector<double>& prompt, const std::vector<Image>& images,
                        const AugmentationSpec& spec, const MsWeights& weights,
                        const ImageEncoder& encoder, Rng& rng,
                        std::vector<Image>* g_images = nullptr) {
    if (images.empty()) throw DomainError("ms_loss needs at least one rendered image");
    if (spec.n < 1) throw DomainError("ms_loss needs at least one augmentation draw");
    if (!spec.weights.empty() && int(spec.weights.size()) != spec.n)
        throw DomainError("augmentation weight count does not match draw count");
    const int w = images.front().width;
    const int h = images.front().height;
    const int ch = images.front().channels;
    for (const Image& img : images)
        if (img.width != w || img.height != h || img.channels != ch)
            throw DomainError("ms_loss images must share one shape");

    double pn2 = 0;
    for (double v : prompt) pn2 += v * v;
    if (!(pn2 > 0)) throw DomainError("ms_loss prompt embedding must be nonzero");
    std::vector<double> c_m = prompt;
    const double pinv = 1.0 / std::sqrt(pn2);
    for (double& v : c_m) v *= pinv;

    if (g_images) {
        g_images->clear();
        for (const Image& img : images) g_images->emplace_back(img.width, img.height, img.channels);
    }

    const double inv_images = 1.0 / double(images.size());
    const double branch_w[3] = {weights.g, weights.l, weights.z};
    double align[3] = {0, 0, 0};
    for (int branch = 0; branch < 3; ++branch) {
        for (int i = 0; i < spec.n; ++i) {
            const WarpPlan plan =
                branch == 0
                    ? draw_perspective_warp(w, h, ch, spec.perspective_jitter, rng)
                    : (branch == 1 ? draw_crop_warp(w, h, ch, spec, rng)
                                   : make_normalize(w, h, ch, spec));
            const double draw_w = spec.weight(i);
            for (std::size_t m = 0; m < images.size(); ++m) {
                const Image aug = apply_augmentation(plan, images[m]);
                const std::vector<double> e = encoder.embed(aug);
                if (e.size() != c_m.size())
                    throw DomainError("prompt embedding dimension does not match the encoder");
                double cosine = 0;
                for (std::size_t j = 0; j < e.size(); ++j) cosine += c_m[j] * e[j];
                align[branch] += draw_w * inv_images * cosine;
                if (g_images) {
                    const double coef = -branch_w[branch] * draw_w * inv_images;
                    std::vector<double> g_e(c_m.size());
                    for (std::size_t j = 0; j < c_m.size(); ++j) g_e[j] = coef * c_m[j];
                    Image g_aug(w, h, ch);
                    encoder.embed_backward(aug, g_e, g_aug);
                    augmentation_backward(plan, g_aug, (*g_images)[m]);
                }
            }
        }
    }

    MsResult r;
    r.align_g = align[0];
    r.align_l = align[1];
    r.align_z = align[2];
    r.loss = -(weights.g * align[0] + weights.l * align[1] + weights.z * align[2]);
    return r;
}

} // namespace x3d
