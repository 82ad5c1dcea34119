#pragma once
#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <mutex>
#include <string>
#include <utility>

#include "json.hpp"
#include "x3d/base64.hpp"
#include "x3d/errors.hpp"
#include "x3d/prior.hpp"

namespace x3d {

// One-request-in-flight newline-delimited JSON client. Each call writes a
// single line and blocks for a single response line, bounded by the timeout.
// Any transport or framing failure closes the connection so the next call
// reconnects from scratch.
class NdjsonClient {
public:
    NdjsonClient(std::string host, int port, int timeout_ms = 30000)
        : host_(std::move(host)), port_(port), timeout_ms_(timeout_ms) {}

    ~NdjsonClient() { close_fd(); }

    NdjsonClient(const NdjsonClient&) = delete;
    NdjsonClient& operator=(const NdjsonClient&) = delete;

    nlohmann::json roundtrip(const nlohmann::json& request) {
        std::lock_guard<std::mutex> lock(mu_);
        const auto deadline = std::chrono::steady_clock::now() +
                              std::chrono::milliseconds(timeout_ms_);
        ensure_connected(deadline);
        send_line(request.dump(), deadline);
        const std::string line = recv_line(deadline);

        nlohmann::json resp;
        try {
            resp = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail("prior response malformed: " + std::string(e.what()));
        }
        if (!resp.is_object() || !resp.contains("v") || !resp["v"].is_number_integer())
            fail("prior response malformed: missing version field");
        if (resp["v"].get<int>() != 1)
            fail("prior protocol version mismatch: got v=" + resp["v"].dump());
        if (!resp.contains("ok") || !resp["ok"].is_boolean())
            fail("prior response malformed: missing ok field");
        if (!resp["ok"].get<bool>()) {
            std::string msg = "prior reported failure";
            if (resp.contains("err") && resp["err"].is_string())
                msg += ": " + resp["err"].get<std::string>();
            throw DenoiserUnavailable(msg);
        }
        return resp;
    }

private:
    using Clock = std::chrono::steady_clock;

    [[noreturn]] void fail(const std::string& msg) {
        close_fd();
        throw DenoiserUnavailable(msg);
    }

    void close_fd() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
        rxbuf_.clear();
    }

    int remaining_ms(Clock::time_point deadline) {
        const auto left =
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
        return int(std::max<long long>(0, left.count()));
    }

    void wait_io(short events, Clock::time_point deadline, const char* what) {
        pollfd p{};
        p.fd = fd_;
        p.events = events;
        const int rc = ::poll(&p, 1, remaining_ms(deadline));
        if (rc == 0)
            fail("prior request timed out after " + std::to_string(timeout_ms_) + " ms (" +
                 what + ")");
        if (rc < 0) fail("prior connection failed: " + std::string(std::strerror(errno)));
    }

    void ensure_connected(Clock::time_point deadline) {
        if (fd_ >= 0) return;
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        const int rc = ::getaddrinfo(host_.c_str(), std::to_string(port_).c_str(), &hints, &res);
        if (rc != 0)
            throw DenoiserUnavailable("prior connection failed: " +
                                      std::string(::gai_strerror(rc)));
        std::string err = "no usable address";
        for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
            const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
            if (fd < 0) {
                err = std::strerror(errno);
                continue;
            }
            ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL, 0) | O_NONBLOCK);
            const int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
                fd_ = fd;
                break;
            }
            if (errno != EINPROGRESS) {
                err = std::strerror(errno);
                ::close(fd);
                continue;
            }
            pollfd p{};
            p.fd = fd;
            p.events = POLLOUT;
            const int prc = ::poll(&p, 1, remaining_ms(deadline));
            int so_err = prc > 0 ? 0 : ETIMEDOUT;
            if (prc > 0) {
                socklen_t len = sizeof so_err;
                ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &so_err, &len);
            }
            if (so_err == 0) {
                fd_ = fd;
                break;
            }
            err = std::strerror(so_err);
            ::close(fd);
        }
        ::freeaddrinfo(res);
        if (fd_ < 0) throw DenoiserUnavailable("prior connection failed: " + err);
    }

    void send_line(const std::string& body, Clock::time_point deadline) {
        std::string frame = body;
        frame.push_back('\n');
        std::size_t sent = 0;
        while (sent < frame.size()) {
            const ssize_t n =
                ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
            if (n > 0) {
                sent += std::size_t(n);
                continue;
            }
            if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
                wait_io(POLLOUT, deadline, "send");
                continue;
            }
            if (n < 0 && errno == EINTR) continue;
            fail("prior connection failed: " + std::string(std::strerror(errno)));
        }
    }

    std::string recv_line(Clock::time_point deadline) {
        for (;;) {
            const std::size_t nl = rxbuf_.find('\n');
            if (nl != std::string::npos) {
                std::string line = rxbuf_.substr(0, nl);
                rxbuf_.erase(0, nl + 1);
                return line;
            }
            char buf[4096];
            const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
            if (n > 0) {
                rxbuf_.append(buf, std::size_t(n));
                continue;
            }
            if (n == 0) fail("prior response malformed: connection closed mid-frame");
            if (errno == EAGAIN || errno == EWOULDBLOCK) {
                wait_io(POLLIN, deadline, "recv");
                continue;
            }
            if (errno == EINTR) continue;
            fail("prior connection failed: " + std::string(std::strerror(errno)));
        }
    }

    std::string host_;
    int port_;
    int timeout_ms_;
    int fd_ = -1;
    std::string rxbuf_;
    std::mutex mu_;
};

inline nlohmann::json condition_to_json(const PriorCondition& cond) {
    if (cond.kind == PriorCondition::Kind::Embedding)
        return {{"kind", "embedding"}, {"data", floats_to_base64(cond.embedding)}};
    nlohmann::json rot = nlohmann::json::array();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) rot.push_back(cond.rotation.m[i][j]);
    return {{"kind", "view"},
            {"data",
             {{"rotation", rot},
              {"translation", {cond.translation.x, cond.translation.y, cond.translation.z}},
              {"reference",
               {{"shape", {cond.reference.channels, cond.reference.height, cond.reference.width}},
                {"data", floats_to_base64(latent_from_image(cond.reference).data)}}}}}};
}

// Denoiser backed by an out-of-process prior over the NDJSON protocol.
// The remote Jacobian is unreachable, so the inherited zero pullback applies
// and the prior is treated as a stop-gradient.
class RemoteDenoiser : public Denoiser {
public:
    RemoteDenoiser(std::string host, int port, int timeout_ms = 30000)
        : client_(std::move(host), port, timeout_ms) {}

    Latent denoise(const Latent& z_t, double t, const PriorCondition& cond) const override {
        nlohmann::json req = {{"v", 1},
                              {"op", "denoise"},
                              {"t", t},
                              {"shape", {z_t.channels, z_t.height, z_t.width}},
                              {"latent", floats_to_base64(z_t.data)},
                              {"cond", condition_to_json(cond)}};
        const nlohmann::json resp = client_.roundtrip(req);
        if (!resp.contains("denoised") || !resp["denoised"].is_string())
            throw DenoiserUnavailable("prior response malformed: missing denoised payload");
        std::vector<double> vals;
        try {
            vals = base64_to_floats(resp["denoised"].get<std::string>());
        } catch (const DomainError& e) {
            throw DenoiserUnavailable("prior response malformed: " + std::string(e.what()));
        }
        if (vals.size() != z_t.size())
            throw DenoiserUnavailable("prior response malformed: payload holds " +
                                      std::to_string(vals.size()) + " values, expected " +
                                      std::to_string(z_t.size()));
        Latent out = z_t;
        out.data = std::move(vals);
        return out;
    }

private:
    mutable NdjsonClient client_;
};

} // namespace x3d
