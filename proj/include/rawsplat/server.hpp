#pragma once

#include "rawsplat/protocol.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <cstdlib>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>

namespace rawsplat {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = boost::beast::websocket;
using tcp = boost::asio::ip::tcp;

inline constexpr const char* kAddressEnv = "RAWSPLAT_ADDR";

struct BindAddress {
    std::string host = "127.0.0.1";
    unsigned short port = 8765;
};

/// Parses "host:port" (or ":port", or "port").
inline BindAddress parse_bind_address(const std::string& text) {
    BindAddress a;
    const auto colon = text.rfind(':');
    const std::string host = colon == std::string::npos ? "" : text.substr(0, colon);
    const std::string port = colon == std::string::npos ? text : text.substr(colon + 1);
    if (!host.empty()) a.host = host;
    try {
        std::size_t pos = 0;
        const int p = std::stoi(port, &pos);
        if (pos != port.size() || p < 0 || p > 65535) throw std::out_of_range(port);
        a.port = static_cast<unsigned short>(p);
    } catch (const std::exception&) {
        throw InvalidArgumentError("invalid bind address '" + text + "'");
    }
    return a;
}

/// The environment variable wins over the command-line value.
inline BindAddress resolve_bind_address(const std::string& flag_value) {
    if (const char* env = std::getenv(kAddressEnv); env && *env) return parse_bind_address(env);
    return parse_bind_address(flag_value);
}

class FrameServer;

namespace detail {

class Session : public std::enable_shared_from_this<Session> {
public:
    Session(tcp::socket socket, FrameServer& server) : ws_(std::move(socket)), server_(server) {}

    void run() {
        net::dispatch(ws_.get_executor(), [self = shared_from_this()] { self->accept(); });
    }

private:
    void accept() {
        ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
        ws_.read_message_max(1 << 20);
        ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
            if (!ec) self->read();
        });
    }

    void read() {
        ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec) return;
            std::string msg = beast::buffers_to_string(self->buffer_.data());
            self->buffer_.consume(self->buffer_.size());
            self->handle(msg, self->ws_.got_text());
            self->read();
        });
    }

    void handle(const std::string& msg, bool text);
    void start_render();

    void send(bool text, std::string data) {
        outbox_.emplace_back(text, std::move(data));
        if (!writing_) write();
    }

    void write() {
        writing_ = true;
        ws_.text(outbox_.front().first);
        ws_.async_write(net::buffer(outbox_.front().second),
                        [self = shared_from_this()](beast::error_code ec, std::size_t) {
                            self->outbox_.pop_front();
                            if (ec) return;
                            if (self->outbox_.empty()) {
                                self->writing_ = false;
                            } else {
                                self->write();
                            }
                        });
    }

    websocket::stream<beast::tcp_stream> ws_;
    FrameServer& server_;
    beast::flat_buffer buffer_;
    std::deque<std::pair<bool, std::string>> outbox_;
    bool writing_ = false;
    std::optional<RenderRequest> pending_;
    bool rendering_ = false;
};

} // namespace detail

/// WebSocket frame server. Renders from an immutable scene snapshot that can
/// be replaced while clients are connected.
class FrameServer {
public:
    explicit FrameServer(std::shared_ptr<const TrainedScene> scene, unsigned render_threads = 0)
        : scene_(std::move(scene)), acceptor_(ioc_),
          pool_(render_threads ? render_threads : std::max(1u, worker_count())) {
        if (!scene_) throw InvalidArgumentError("frame server needs a scene");
    }
    FrameServer(const FrameServer&) = delete;
    FrameServer& operator=(const FrameServer&) = delete;
    ~FrameServer() { stop(); }

    /// Binds and starts serving on a background thread. Returns the bound
    /// port (useful with port 0).
    unsigned short start(const BindAddress& addr) {
        const tcp::endpoint ep(net::ip::make_address(addr.host), addr.port);
        acceptor_.open(ep.protocol());
        acceptor_.set_option(net::socket_base::reuse_address(true));
        acceptor_.bind(ep);
        acceptor_.listen(net::socket_base::max_listen_connections);
        accept();
        io_thread_ = std::thread([this] { ioc_.run(); });
        return acceptor_.local_endpoint().port();
    }

    /// Blocks until stop() is called from another thread or a signal handler.
    void wait() {
        std::unique_lock lock(stop_mu_);
        stop_cv_.wait(lock, [&] { return stopped_; });
    }

    void stop() {
        {
            std::lock_guard lock(stop_mu_);
            if (stopped_) return;
            stopped_ = true;
        }
        stop_cv_.notify_all();
        net::post(ioc_, [this] {
            beast::error_code ec;
            acceptor_.close(ec);
        });
        ioc_.stop();
        pool_.join();
        if (io_thread_.joinable()) io_thread_.join();
    }

    void swap_scene(std::shared_ptr<const TrainedScene> scene) {
        if (!scene) throw InvalidArgumentError("cannot swap in an empty scene");
        std::lock_guard lock(scene_mu_);
        scene_ = std::move(scene);
    }

    std::shared_ptr<const TrainedScene> snapshot() const {
        std::lock_guard lock(scene_mu_);
        return scene_;
    }

    std::uint64_t next_frame_id() { return ++frame_counter_; }
    std::uint64_t frames_served() const { return frame_counter_.load(); }
    net::thread_pool& pool() { return pool_; }

private:
    void accept() {
        acceptor_.async_accept(net::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
            if (ec) return;
            socket.set_option(tcp::no_delay(true), ec);
            std::make_shared<detail::Session>(std::move(socket), *this)->run();
            accept();
        });
    }

    mutable std::mutex scene_mu_;
    std::shared_ptr<const TrainedScene> scene_;
    net::io_context ioc_;
    tcp::acceptor acceptor_;
    net::thread_pool pool_;
    std::thread io_thread_;
    std::atomic<std::uint64_t> frame_counter_{0};
    std::mutex stop_mu_;
    std::condition_variable stop_cv_;
    bool stopped_ = false;
};

namespace detail {

inline void Session::handle(const std::string& msg, bool text) {
    if (!text) {
        send(true, error_message("binary control messages are not supported"));
        return;
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(msg);
    } catch (const nlohmann::json::exception&) {
        send(true, error_message("control message is not valid JSON"));
        return;
    }
    if (!j.is_object()) {
        send(true, error_message("control message must be a JSON object"));
        return;
    }
    const std::uint64_t request_id = j.value("request_id", std::uint64_t{0});
    const std::string type = j.value("type", std::string());
    if (type == "hello") {
        const int version = j.value("version", kProtocolVersion);
        if (version != kProtocolVersion) {
            send(true, error_message("protocol version mismatch: server speaks " + std::to_string(kProtocolVersion),
                                     request_id));
            return;
        }
        send(true, hello_message(*server_.snapshot()));
    } else if (type == "render") {
        try {
            pending_ = parse_render_request(j);
        } catch (const ProtocolError& e) {
            send(true, error_message(e.what(), request_id));
            return;
        }
        start_render();
    } else {
        send(true, error_message("unknown message type '" + type + "'", request_id));
    }
}

inline void Session::start_render() {
    if (rendering_ || !pending_) return;
    rendering_ = true;
    RenderRequest req = std::move(*pending_);
    pending_.reset();
    auto scene = server_.snapshot();
    net::post(server_.pool(), [self = shared_from_this(), scene = std::move(scene), req = std::move(req)] {
        bool text = false;
        std::string bytes;
        try {
            bytes = render_frame(*scene, req, self->server_.next_frame_id());
        } catch (const std::exception& e) {
            text = true;
            bytes = error_message(e.what(), req.request_id);
        }
        net::post(self->ws_.get_executor(), [self, text, bytes = std::move(bytes)]() mutable {
            self->rendering_ = false;
            self->send(text, std::move(bytes));
            self->start_render();
        });
    });
}

} // namespace detail

/// Blocking WebSocket client, used by tests and the command line.
class FrameClient {
public:
    FrameClient() : ws_(ioc_) {}

    void connect(const std::string& host, unsigned short port) {
        tcp::resolver resolver(ioc_);
        const auto results = resolver.resolve(host, std::to_string(port));
        net::connect(ws_.next_layer(), results.begin(), results.end());
        ws_.next_layer().set_option(tcp::no_delay(true));
        ws_.handshake(host + ":" + std::to_string(port), "/");
    }

    void send(const std::string& text) {
        ws_.text(true);
        ws_.write(net::buffer(text));
    }

    void send_json(const nlohmann::json& j) { send(j.dump()); }

    struct Message {
        bool text = false;
        std::string data;
    };

    Message receive() {
        beast::flat_buffer buffer;
        ws_.read(buffer);
        return {ws_.got_text(), beast::buffers_to_string(buffer.data())};
    }

    void close() {
        beast::error_code ec;
        ws_.close(websocket::close_code::normal, ec);
    }

private:
    net::io_context ioc_;
    websocket::stream<tcp::socket> ws_;
};

} // namespace rawsplat
