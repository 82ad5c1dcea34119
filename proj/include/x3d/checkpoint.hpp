#pragma once
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "x3d/errors.hpp"
#include "x3d/optim.hpp"

namespace x3d {

// On-disk training snapshot. Everything needed to continue a run bit-exactly:
// parameters, optimizer moments, and the generator state. Integers and
// float64 payloads are little-endian.
struct CheckpointData {
    int phase = 1;
    long long iteration = 0;
    std::uint64_t config_hash = 0;
    std::vector<std::pair<std::string, std::vector<double>>> params;
    std::vector<std::pair<std::string, OptimState>> optim;
    std::array<std::uint64_t, 4> rng_state{};
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_doubles(std::string& out, const std::vector<double>& xs) {
    put_u64(out, xs.size());
    for (double x : xs) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        put_u64(out, bits);
    }
}

inline void put_string(std::string& out, const std::string& s) {
    put_u32(out, std::uint32_t(s.size()));
    out += s;
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw ConfigError("checkpoint file truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::vector<double> doubles() {
        const std::uint64_t n = u64();
        need(n * 8);
        std::vector<double> xs(n);
        for (std::uint64_t i = 0; i < n; ++i) {
            const std::uint64_t bits = u64();
            std::memcpy(&xs[i], &bits, 8);
        }
        return xs;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointData& ck) {
    std::string out;
    out += "X3D1";
    detail::put_u32(out, std::uint32_t(ck.phase));
    detail::put_u64(out, std::uint64_t(ck.iteration));
    detail::put_u64(out, ck.config_hash);

    detail::put_u32(out, std::uint32_t(ck.params.size()));
    for (const auto& [name, data] : ck.params) {
        detail::put_string(out, name);
        detail::put_doubles(out, data);
    }

    detail::put_u32(out, std::uint32_t(ck.optim.size()));
    for (const auto& [name, st] : ck.optim) {
        detail::put_string(out, name);
        detail::put_u64(out, std::uint64_t(st.step));
        detail::put_doubles(out, st.m);
        detail::put_doubles(out, st.v);
        detail::put_doubles(out, st.n);
        detail::put_doubles(out, st.g_prev);
    }

    for (std::uint64_t w : ck.rng_state) detail::put_u64(out, w);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot open checkpoint file for writing: " + path);
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw ConfigError("failed writing checkpoint file: " + path);
}

inline CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open checkpoint file: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    detail::Reader r{buf};
    r.need(4);
    if (buf.compare(0, 4, "X3D1") != 0)
        throw ConfigError("not a checkpoint file (bad magic): " + path);
    r.pos = 4;

    CheckpointData ck;
    ck.phase = int(r.u32());
    ck.iteration = (long long)(r.u64());
    ck.config_hash = r.u64();

    const std::uint32_t n_params = r.u32();
    for (std::uint32_t i = 0; i < n_params; ++i) {
        std::string name = r.str();
        std::vector<double> data = r.doubles();
        ck.params.emplace_back(std::move(name), std::move(data));
    }

    const std::uint32_t n_optim = r.u32();
    for (std::uint32_t i = 0; i < n_optim; ++i) {
        std::string name = r.str();
        OptimState st;
        st.step = (long long)(r.u64());
        st.m = r.doubles();
        st.v = r.doubles();
        st.n = r.doubles();
        st.g_prev = r.doubles();
        ck.optim.emplace_back(std::move(name), std::move(st));
    }

    for (std::uint64_t& w : ck.rng_state) w = r.u64();
    if (r.pos != buf.size()) throw ConfigError("checkpoint file has trailing bytes: " + path);
    return ck;
}

} // namespace x3d
