#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "x3d/base64.hpp"
#include "x3d/codec.hpp"
#include "x3d/encoder.hpp"
#include "x3d/errors.hpp"
#include "x3d/log.hpp"
#include "x3d/prior.hpp"
#include "x3d/schedule.hpp"

// Reference out-of-process prior speaking the newline-delimited JSON
// protocol. Ops: "denoise" (echo mode returns the latent unchanged, gm mode
// answers with a single-Gaussian posterior mean) and "embed" (toy encoder).
// One JSON object per line in each direction; any request-level failure is
// answered with {"v":1,"ok":false,"err":...} and the connection stays open.

namespace {

struct Options {
    std::string host = "127.0.0.1";
    int port = 0; // 0 picks an ephemeral port, printed on stdout
    std::string mode = "gm";
    double mean = 0.5;
    double stddev = 0.4;
    double sigma_min = 0.05;
    double sigma_max = 5.0;
    int grid_n = 50;
    int encoder_dim = 64;
    std::uint64_t encoder_seed = 2024;
};

nlohmann::json error_reply(const std::string& msg) {
    return {{"v", 1}, {"ok", false}, {"err", msg}};
}

// Shape-checked base64 float32 payload. The shape field is shared by both
// ops; the payload key differs ("latent" vs "image").
x3d::Latent read_payload(const nlohmann::json& req, const char* key) {
    if (!req.contains("shape") || !req["shape"].is_array() || req["shape"].size() != 3)
        throw x3d::DomainError("shape must be [channels, height, width]");
    int dims[3];
    for (int i = 0; i < 3; ++i) {
        if (!req["shape"][i].is_number_integer())
            throw x3d::DomainError("shape must hold integers");
        dims[i] = req["shape"][i].get<int>();
    }
    if (!req.contains(key) || !req[key].is_string())
        throw x3d::DomainError(std::string(key) + " payload missing");
    std::vector<double> vals = x3d::base64_to_floats(req[key].get<std::string>());
    x3d::Latent z = x3d::make_latent(dims[0], dims[1], dims[2]);
    if (vals.size() != z.size())
        throw x3d::DomainError("payload holds " + std::to_string(vals.size()) +
                               " values, expected " + std::to_string(z.size()));
    z.data = std::move(vals);
    return z;
}

nlohmann::json handle_denoise(const Options& opt, const x3d::NoiseSchedule& schedule,
                              const nlohmann::json& req) {
    const x3d::Latent z = read_payload(req, "latent");
    if (opt.mode == "echo")
        return {{"v", 1}, {"ok", true}, {"denoised", req["latent"]}};
    if (!req.contains("t") || !req["t"].is_number())
        throw x3d::DomainError("t must be a number");
    const double t = req["t"].get<double>();
    x3d::GmComponent c;
    c.weight = 1.0;
    c.mean.assign(z.size(), opt.mean);
    c.stddev = opt.stddev;
    const x3d::GmPrior prior({c}, schedule);
    const x3d::Latent out = prior.denoise(z, t, x3d::PriorCondition{});
    return {{"v", 1}, {"ok", true}, {"denoised", x3d::floats_to_base64(out.data)}};
}

nlohmann::json handle_embed(const x3d::ToyEncoder& encoder, const nlohmann::json& req) {
    const x3d::Latent z = read_payload(req, "image");
    const std::vector<double> e = encoder.embed(x3d::image_from_latent(z));
    return {{"v", 1}, {"ok", true}, {"embedding", x3d::floats_to_base64(e)}};
}

nlohmann::json handle_line(const Options& opt, const x3d::NoiseSchedule& schedule,
                           const x3d::ToyEncoder& encoder, const std::string& line) {
    nlohmann::json req;
    try {
        req = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        return error_reply("request is not valid JSON: " + std::string(e.what()));
    }
    if (!req.is_object() || !req.contains("v") || !req["v"].is_number_integer() ||
        req["v"].get<int>() != 1)
        return error_reply("unsupported protocol version, expected v=1");
    const std::string op = req.value("op", "");
    try {
        if (op == "denoise") return handle_denoise(opt, schedule, req);
        if (op == "embed") return handle_embed(encoder, req);
    } catch (const x3d::Error& e) {
        return error_reply(e.what());
    }
    return error_reply("unknown op \"" + op + "\"");
}

bool send_all(int fd, const std::string& frame) {
    std::size_t sent = 0;
    while (sent < frame.size()) {
        const ssize_t n = ::send(fd, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
        if (n > 0) {
            sent += std::size_t(n);
            continue;
        }
        if (n < 0 && errno == EINTR) continue;
        return false;
    }
    return true;
}

void serve_connection(int fd, const Options& opt) {
    const x3d::NoiseSchedule schedule(opt.sigma_min, opt.sigma_max, opt.grid_n);
    const x3d::ToyEncoder encoder(opt.encoder_dim, opt.encoder_seed);
    std::string buf;
    char chunk[4096];
    for (;;) {
        std::size_t nl;
        while ((nl = buf.find('\n')) != std::string::npos) {
            const std::string line = buf.substr(0, nl);
            buf.erase(0, nl + 1);
            const nlohmann::json resp = handle_line(opt, schedule, encoder, line);
            if (!send_all(fd, resp.dump() + "\n")) {
                ::close(fd);
                return;
            }
        }
        const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
        if (n > 0) {
            buf.append(chunk, std::size_t(n));
            continue;
        }
        if (n < 0 && errno == EINTR) continue;
        break; // peer closed or hard error
    }
    ::close(fd);
}

} // namespace

int main(int argc, char** argv) {
    Options opt;
    CLI::App app{"Reference NDJSON prior server (denoise + embed)"};
    app.add_option("--host", opt.host, "IPv4 address to bind");
    app.add_option("--port", opt.port, "TCP port, 0 for an ephemeral one");
    app.add_option("--mode", opt.mode, "Denoise behaviour: gm or echo")
        ->check(CLI::IsMember({"gm", "echo"}));
    app.add_option("--mean", opt.mean, "gm mode: constant clean-image value");
    app.add_option("--stddev", opt.stddev, "gm mode: component spread");
    app.add_option("--sigma-min", opt.sigma_min, "Noise schedule lower bound");
    app.add_option("--sigma-max", opt.sigma_max, "Noise schedule upper bound");
    app.add_option("--grid-n", opt.grid_n, "Noise schedule grid size");
    app.add_option("--encoder-dim", opt.encoder_dim, "Embedding dimension for op embed");
    app.add_option("--encoder-seed", opt.encoder_seed, "Toy encoder projection seed");
    CLI11_PARSE(app, argc, argv);

    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listener < 0) {
        std::fprintf(stderr, "error: socket: %s\n", std::strerror(errno));
        return 1;
    }
    const int one = 1;
    ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(std::uint16_t(opt.port));
    if (::inet_pton(AF_INET, opt.host.c_str(), &addr.sin_addr) != 1) {
        std::fprintf(stderr, "error: not an IPv4 address: %s\n", opt.host.c_str());
        return 1;
    }
    if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 ||
        ::listen(listener, 16) < 0) {
        std::fprintf(stderr, "error: bind %s:%d: %s\n", opt.host.c_str(), opt.port,
                     std::strerror(errno));
        return 1;
    }
    socklen_t len = sizeof addr;
    ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
    std::printf("listening on %s:%d\n", opt.host.c_str(), int(ntohs(addr.sin_port)));
    std::fflush(stdout);

    for (;;) {
        const int fd = ::accept(listener, nullptr, nullptr);
        if (fd < 0) {
            if (errno == EINTR) continue;
            std::fprintf(stderr, "error: accept: %s\n", std::strerror(errno));
            return 1;
        }
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        x3d::log::debug("connection accepted");
        std::thread(serve_connection, fd, opt).detach();
    }
}
