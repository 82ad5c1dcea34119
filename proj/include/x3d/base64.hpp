#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "x3d/errors.hpp"

namespace x3d {

inline std::string base64_encode(const std::uint8_t* data, std::size_t n) {
    static const char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= n; i += 3) {
        const std::uint32_t v = (std::uint32_t(data[i]) << 16) | (std::uint32_t(data[i + 1]) << 8) | data[i + 2];
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out.push_back(tbl[v & 63]);
    }
    if (i + 1 == n) {
        const std::uint32_t v = std::uint32_t(data[i]) << 16;
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (i + 2 == n) {
        const std::uint32_t v = (std::uint32_t(data[i]) << 16) | (std::uint32_t(data[i + 1]) << 8);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::string base64_encode(const std::vector<std::uint8_t>& data) {
    return base64_encode(data.data(), data.size());
}

// Strict: rejects non-alphabet characters, bad padding, and trailing garbage.
inline std::vector<std::uint8_t> base64_decode(const std::string& s) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (s.size() % 4 != 0) throw DomainError("base64: length not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(s.size() / 4 * 3);
    for (std::size_t i = 0; i < s.size(); i += 4) {
        const bool last = i + 4 == s.size();
        int pad = 0;
        std::uint32_t v = 0;
        for (int j = 0; j < 4; ++j) {
            const char c = s[i + j];
            if (c == '=') {
                if (!last || j < 2) throw DomainError("base64: misplaced padding");
                ++pad;
                v <<= 6;
            } else {
                if (pad) throw DomainError("base64: data after padding");
                const int d = val(c);
                if (d < 0) throw DomainError(std::string("base64: invalid character '") + c + "'");
                v = (v << 6) | std::uint32_t(d);
            }
        }
        out.push_back(std::uint8_t((v >> 16) & 0xff));
        if (pad < 2) out.push_back(std::uint8_t((v >> 8) & 0xff));
        if (pad < 1) out.push_back(std::uint8_t(v & 0xff));
    }
    return out;
}

// Latent payloads travel as little-endian float32.
inline std::string floats_to_base64(const std::vector<double>& v) {
    std::vector<std::uint8_t> bytes(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const float f = float(v[i]);
        std::uint32_t u;
        static_assert(sizeof(u) == sizeof(f));
        __builtin_memcpy(&u, &f, 4);
        bytes[i * 4 + 0] = std::uint8_t(u & 0xff);
        bytes[i * 4 + 1] = std::uint8_t((u >> 8) & 0xff);
        bytes[i * 4 + 2] = std::uint8_t((u >> 16) & 0xff);
        bytes[i * 4 + 3] = std::uint8_t((u >> 24) & 0xff);
    }
    return base64_encode(bytes);
}

inline std::vector<double> base64_to_floats(const std::string& s) {
    const auto bytes = base64_decode(s);
    if (bytes.size() % 4 != 0) throw DomainError("base64 float payload: byte count not a multiple of 4");
    std::vector<double> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint32_t u = std::uint32_t(bytes[i * 4 + 0]) | (std::uint32_t(bytes[i * 4 + 1]) << 8) |
                                (std::uint32_t(bytes[i * 4 + 2]) << 16) | (std::uint32_t(bytes[i * 4 + 3]) << 24);
        float f;
        __builtin_memcpy(&f, &u, 4);
        out[i] = double(f);
    }
    return out;
}

} // namespace x3d
