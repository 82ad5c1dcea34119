#pragma once
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "x3d/augment.hpp"
#include "x3d/base64.hpp"
#include "x3d/errors.hpp"
#include "x3d/image.hpp"
#include "x3d/remote.hpp"
#include "x3d/rng.hpp"

namespace x3d {

// Maps images into the shared unit-norm embedding space.
class ImageEncoder {
public:
    virtual ~ImageEncoder() = default;

    virtual std::vector<double> embed(const Image& img) const = 0;

    // Accumulates g_embedding^T dE/dpixels into g_pixels. The default adds
    // nothing: encoders without a reachable Jacobian act as stop-gradients.
    virtual void embed_backward(const Image& img, const std::vector<double>& g_embedding,
                                Image& g_pixels) const {
        (void)img;
        (void)g_embedding;
        (void)g_pixels;
    }
};

// Deterministic stand-in for a pretrained image encoder: the image is
// downsampled to an 8x8 grid of three opponent-color moments (mean
// intensity, red-green, blue-yellow), projected by a fixed seeded random
// matrix, and L2-normalized. Linear up to the final normalization, so the
// pixel adjoint is exact.
class ToyEncoder : public ImageEncoder {
public:
    explicit ToyEncoder(int dim = 64, std::uint64_t seed = 2024) : dim_(dim) {
        if (dim < 1) throw DomainError("encoder dimension must be positive");
        Rng rng(seed);
        proj_.resize(std::size_t(dim) * kFeatures);
        const double scale = 1.0 / std::sqrt(double(kFeatures));
        for (double& v : proj_) v = rng.normal() * scale;
    }

    int dim() const { return dim_; }

    std::vector<double> embed(const Image& img) const override {
        const std::vector<double> f = features(img);
        std::vector<double> e(std::size_t(dim_), 0.0);
        for (int i = 0; i < dim_; ++i) {
            double acc = 0;
            const double* row = proj_.data() + std::size_t(i) * kFeatures;
            for (int j = 0; j < kFeatures; ++j) acc += row[j] * f[std::size_t(j)];
            e[std::size_t(i)] = acc;
        }
        double n2 = 0;
        for (double v : e) n2 += v * v;
        const double n = std::sqrt(n2);
        if (n < 1e-12) throw DomainError("degenerate feature vector cannot be normalized");
        for (double& v : e) v /= n;
        return e;
    }

    void embed_backward(const Image& img, const std::vector<double>& g_embedding,
                        Image& g_pixels) const override {
        const std::vector<double> f = features(img);
        std::vector<double> raw(std::size_t(dim_), 0.0);
        for (int i = 0; i < dim_; ++i) {
            double acc = 0;
            const double* row = proj_.data() + std::size_t(i) * kFeatures;
            for (int j = 0; j < kFeatures; ++j) acc += row[j] * f[std::size_t(j)];
            raw[std::size_t(i)] = acc;
        }
        double n2 = 0;
        for (double v : raw) n2 += v * v;
        const double n = std::sqrt(n2);
        if (n < 1e-12) throw DomainError("degenerate feature vector cannot be normalized");

        // Through y = v / |v|: g_v = (g_y - (y . g_y) y) / |v|.
        double ydotg = 0;
        for (int i = 0; i < dim_; ++i) ydotg += raw[std::size_t(i)] / n * g_embedding[std::size_t(i)];
        std::vector<double> g_raw(std::size_t(dim_), 0.0);
        for (int i = 0; i < dim_; ++i)
            g_raw[std::size_t(i)] = (g_embedding[std::size_t(i)] - ydotg * raw[std::size_t(i)] / n) / n;

        std::vector<double> g_f(kFeatures, 0.0);
        for (int i = 0; i < dim_; ++i) {
            const double* row = proj_.data() + std::size_t(i) * kFeatures;
            for (int j = 0; j < kFeatures; ++j) g_f[std::size_t(j)] += row[j] * g_raw[std::size_t(i)];
        }
        scatter_features(img, g_f, g_pixels);
    }

private:
    static constexpr int kGrid = 8;
    static constexpr int kFeatures = kGrid * kGrid * 3;

    static void check_shape(const Image& img) {
        if (img.width < 8 || img.height < 8)
            throw DomainError("encoder input must be at least 8x8");
        if (img.channels != 3 && img.channels != 1)
            throw DomainError("encoder input must have 1 or 3 channels");
    }

    static void cell_rgb(const Image& img, int gx, int gy, double rgb[3]) {
        const double sx = (gx + 0.5) * double(img.width) / kGrid;
        const double sy = (gy + 0.5) * double(img.height) / kGrid;
        const detail::Tap t = detail::tap_at(sx, sy, img.width, img.height);
        for (int c = 0; c < 3; ++c) {
            const int ch = img.channels == 1 ? 0 : c;
            rgb[c] =
                (1 - t.wy) * ((1 - t.wx) * img.at(t.x0, t.y0, ch) + t.wx * img.at(t.x1, t.y0, ch)) +
                t.wy * ((1 - t.wx) * img.at(t.x0, t.y1, ch) + t.wx * img.at(t.x1, t.y1, ch));
        }
    }

    static std::vector<double> features(const Image& img) {
        check_shape(img);
        std::vector<double> f(kFeatures);
        for (int gy = 0; gy < kGrid; ++gy) {
            for (int gx = 0; gx < kGrid; ++gx) {
                double rgb[3];
                cell_rgb(img, gx, gy, rgb);
                const std::size_t base = std::size_t(gy * kGrid + gx) * 3;
                f[base + 0] = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                f[base + 1] = rgb[0] - rgb[1];
                f[base + 2] = rgb[2] - 0.5 * (rgb[0] + rgb[1]);
            }
        }
        return f;
    }

    static void scatter_features(const Image& img, const std::vector<double>& g_f,
                                 Image& g_pixels) {
        for (int gy = 0; gy < kGrid; ++gy) {
            for (int gx = 0; gx < kGrid; ++gx) {
                const std::size_t base = std::size_t(gy * kGrid + gx) * 3;
                const double g_mean = g_f[base + 0] / 3.0;
                const double g_rg = g_f[base + 1];
                const double g_by = g_f[base + 2];
                const double g_rgb[3] = {g_mean + g_rg - 0.5 * g_by, g_mean - g_rg - 0.5 * g_by,
                                         g_mean + g_by};
                const double sx = (gx + 0.5) * double(img.width) / kGrid;
                const double sy = (gy + 0.5) * double(img.height) / kGrid;
                const detail::Tap t = detail::tap_at(sx, sy, img.width, img.height);
                for (int c = 0; c < 3; ++c) {
                    const int ch = img.channels == 1 ? 0 : c;
                    const double g = g_rgb[c];
                    g_pixels.at(t.x0, t.y0, ch) += (1 - t.wy) * (1 - t.wx) * g;
                    g_pixels.at(t.x1, t.y0, ch) += (1 - t.wy) * t.wx * g;
                    g_pixels.at(t.x0, t.y1, ch) += t.wy * (1 - t.wx) * g;
                    g_pixels.at(t.x1, t.y1, ch) += t.wy * t.wx * g;
                }
            }
        }
    }

    int dim_;
    std::vector<double> proj_;
};

// Encoder backed by an out-of-process model over the NDJSON protocol
// (op "embed"). The remote Jacobian is unreachable, so the inherited zero
// pullback applies. The returned embedding is renormalized to absorb
// float32 quantization.
class RemoteEncoder : public ImageEncoder {
public:
    RemoteEncoder(std::string host, int port, int timeout_ms = 30000)
        : client_(std::move(host), port, timeout_ms) {}

    std::vector<double> embed(const Image& img) const override {
        nlohmann::json req = {{"v", 1},
                              {"op", "embed"},
                              {"shape", {img.channels, img.height, img.width}},
                              {"image", floats_to_base64(latent_from_image(img).data)}};
        const nlohmann::json resp = client_.roundtrip(req);
        if (!resp.contains("embedding") || !resp["embedding"].is_string())
            throw DenoiserUnavailable("encoder response malformed: missing embedding payload");
        std::vector<double> e;
        try {
            e = base64_to_floats(resp["embedding"].get<std::string>());
        } catch (const DomainError& err) {
            throw DenoiserUnavailable("encoder response malformed: " + std::string(err.what()));
        }
        double n2 = 0;
        for (double v : e) n2 += v * v;
        const double n = std::sqrt(n2);
        if (e.empty() || n < 1e-12)
            throw DenoiserUnavailable("encoder returned a degenerate embedding");
        for (double& v : e) v /= n;
        return e;
    }

private:
    mutable NdjsonClient client_;
};

// -log( exp(s_pos/t) / sum_j exp(s_j/t) ) over similarities s_j = x . y_j,
// the positive included once in the denominator.
inline double infonce(const std::vector<double>& x, std::size_t positive,
                      const std::vector<std::vector<double>>& ys, double temperature) {
    if (!(temperature > 0)) throw DomainError("infonce temperature must be positive");
    if (positive >= ys.size()) throw DomainError("infonce positive index out of range");
    std::vector<double> s(ys.size());
    for (std::size_t j = 0; j < ys.size(); ++j) {
        if (ys[j].size() != x.size()) throw DomainError("infonce embedding dimension mismatch");
        double acc = 0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * ys[j][i];
        s[j] = acc / temperature;
    }
    double m = s[0];
    for (double v : s) m = std::max(m, v);
    double lse = 0;
    for (double v : s) lse += std::exp(v - m);
    return -(s[positive] - m) + std::log(lse);
}

// Raw little-endian float32 embedding files.
inline std::vector<double> read_embedding_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DomainError("cannot open embedding file: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % 4 != 0)
        throw DomainError("embedding file length must be a positive multiple of 4: " + path);
    std::vector<double> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        float f;
        __builtin_memcpy(&f, bytes.data() + i * 4, 4);
        out[i] = double(f);
    }
    return out;
}

inline void write_embedding_file(const std::string& path, const std::vector<double>& e) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DomainError("cannot write embedding file: " + path);
    for (double v : e) {
        const float f = float(v);
        char bytes[4];
        __builtin_memcpy(bytes, &f, 4);
        out.write(bytes, 4);
    }
    if (!out) throw DomainError("embedding file write failed: " + path);
}

} // namespace x3d
