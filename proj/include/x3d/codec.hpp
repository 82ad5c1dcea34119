#pragma once
#include <cstddef>
#include <vector>

#include "x3d/errors.hpp"
#include "x3d/image.hpp"

namespace x3d {

// Planar latent tensor, data[(c * height + y) * width + x].
struct Latent {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    std::size_t size() const { return data.size(); }

    double& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const {
        return data[(std::size_t(c) * height + y) * width + x];
    }
};

inline Latent make_latent(int channels, int height, int width, double fill = 0.0) {
    if (channels < 1 || height < 1 || width < 1)
        throw DomainError("latent dimensions must be positive");
    Latent z;
    z.channels = channels;
    z.height = height;
    z.width = width;
    z.data.assign(std::size_t(channels) * height * width, fill);
    return z;
}

// Identity codec: the latent space is the image space, reordered from
// interleaved pixels to planar channels. decode(encode(x)) == x exactly.
inline Latent latent_from_image(const Image& img) {
    Latent z = make_latent(img.channels, img.height, img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) z.at(c, y, x) = img.at(x, y, c);
    return z;
}

inline Image image_from_latent(const Latent& z) {
    Image img(z.width, z.height, z.channels);
    for (int c = 0; c < z.channels; ++c)
        for (int y = 0; y < z.height; ++y)
            for (int x = 0; x < z.width; ++x) img.at(x, y, c) = z.at(c, y, x);
    return img;
}

// Adjoint of latent_from_image: scatters latent cotangents back onto image
// pixel cotangents. The mapping is a permutation, so this is its transpose.
inline void latent_from_image_backward(const Latent& g_latent, Image& g_image) {
    for (int c = 0; c < g_latent.channels; ++c)
        for (int y = 0; y < g_latent.height; ++y)
            for (int x = 0; x < g_latent.width; ++x)
                g_image.at(x, y, c) += g_latent.at(c, y, x);
}

} // namespace x3d
