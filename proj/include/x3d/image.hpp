#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "x3d/errors.hpp"

namespace x3d {

// Interleaved row-major float image, values nominally in [0,1] for display
// channels but unconstrained in general (normal maps, latents).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {}

    double& at(int x, int y, int c) { return data[(std::size_t(y) * width + x) * channels + c]; }
    double at(int x, int y, int c) const { return data[(std::size_t(y) * width + x) * channels + c]; }
    std::size_t size() const { return data.size(); }
};

inline double srgb_encode(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}

inline double srgb_decode(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

// PPM P6, 8-bit, sRGB transfer applied on write and inverted on read.
inline void write_ppm(const std::string& path, const Image& img) {
    if (img.channels != 3) throw DomainError("write_ppm: need 3 channels, got " + std::to_string(img.channels));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("write_ppm: cannot open " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(std::size_t(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[std::size_t(x) * 3 + c] =
                    (unsigned char)std::lround(255.0 * srgb_encode(img.at(x, y, c)));
        f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!f) throw Error("write_ppm: write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("read_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw DomainError("read_ppm: not a P6 file: " + path);
    auto next_token = [&f, &path]() {
        // Header tokens may be separated by whitespace or #-comments.
        std::string tok;
        for (;;) {
            f >> tok;
            if (!f) throw DomainError("read_ppm: truncated header in " + path);
            if (tok[0] == '#') { std::string rest; std::getline(f, rest); continue; }
            return tok;
        }
    };
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (maxval != 255) throw DomainError("read_ppm: only maxval 255 supported");
    if (w <= 0 || h <= 0) throw DomainError("read_ppm: bad dimensions");
    f.get();
    Image img(w, h, 3);
    std::vector<unsigned char> buf(std::size_t(w) * h * 3);
    f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (std::size_t(f.gcount()) != buf.size()) throw DomainError("read_ppm: truncated pixel data in " + path);
    for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = srgb_decode(buf[i] / 255.0);
    return img;
}

// Bilinear resample to (w, h). Sample positions map pixel centers to pixel
// centers so a same-size resize is the identity.
inline Image resize_bilinear(const Image& src, int w, int h) {
    Image dst(w, h, src.channels);
    const double sx = double(src.width) / w;
    const double sy = double(src.height) / h;
    for (int y = 0; y < h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = std::clamp(int(std::floor(fy)), 0, src.height - 1);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = std::clamp(fy - y0, 0.0, 1.0);
        for (int x = 0; x < w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = std::clamp(int(std::floor(fx)), 0, src.width - 1);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = std::clamp(fx - x0, 0.0, 1.0);
            for (int c = 0; c < src.channels; ++c) {
                const double v = (1 - wy) * ((1 - wx) * src.at(x0, y0, c) + wx * src.at(x1, y0, c)) +
                                 wy * ((1 - wx) * src.at(x0, y1, c) + wx * src.at(x1, y1, c));
                dst.at(x, y, c) = v;
            }
        }
    }
    return dst;
}

} // namespace x3d
