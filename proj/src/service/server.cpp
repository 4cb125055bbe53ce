#include "cvthead/service/server.hpp"

#include <sys/socket.h>

#include <atomic>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <condition_variable>
#include <list>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "cvthead/service/params_json.hpp"

namespace cvthead::service {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using nlohmann::json;

void ServiceConfig::validate() const {
  if (port < 1 || port > 65535) throw ConfigError("port must be in [1, 65535], got " + std::to_string(port));
  if (frame_size <= 0 || max_frame_size <= 0) throw ConfigError("frame sizes must be positive");
  if (frame_size > max_frame_size) throw ConfigError("frame_size exceeds max_frame_size");
}

namespace {

HttpReply json_reply(unsigned status, const json& j) { return {status, "application/json", j.dump()}; }

HttpReply error_reply(unsigned status, const std::string& msg, const char* key, const std::string& value) {
  return json_reply(status, {{"error", msg}, {key, value}});
}

struct Request {
  head_model::AvatarParams params;
  RenderMode mode;
  int size;
};

// Throws ParamsError for anything the client got wrong.
Request parse_request(const Avatar& avatar, const ServiceConfig& cfg, const json& j) {
  Request r{{}, cfg.default_mode, cfg.frame_size};
  if (!j.is_object()) throw ParamsError("params", "expected a JSON object");
  if (j.contains("mode")) {
    if (!j["mode"].is_string()) throw ParamsError("mode", "expected a string");
    try {
      r.mode = parse_mode(j["mode"].get<std::string>());
    } catch (const ConfigError& e) {
      throw ParamsError("mode", e.what());
    }
  }
  if (j.contains("size")) {
    if (!j["size"].is_number_integer()) throw ParamsError("size", "expected an integer");
    r.size = j["size"].get<int>();
  }
  if (r.size <= 0 || r.size > cfg.max_frame_size) {
    throw ParamsError("size", "must be in [1, " + std::to_string(cfg.max_frame_size) + "]");
  }
  try {
    avatar.check_size(r.size, r.mode);
  } catch (const ConfigError& e) {
    throw ParamsError("size", e.what());
  }
  r.params = params_from_json(j, avatar.model());
  return r;
}

std::string png_bytes(const Image8& img) {
  const auto bytes = encode_png(img);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace

HttpReply handle_http(const Avatar& avatar, const ServiceConfig& cfg, std::string_view method, std::string_view target,
                      std::string_view body) {
  const auto path = target.substr(0, target.find('?'));
  if (method == "OPTIONS") return {204, "text/plain", ""};
  if (path == "/v1/model") {
    if (method != "GET") return error_reply(405, "use GET", "path", std::string(path));
    return json_reply(200, model_info(avatar, cfg.frame_size));
  }
  if (path == "/v1/presets") {
    if (method != "GET") return error_reply(405, "use GET", "path", std::string(path));
    json list = json::array();
    for (const auto& [name, p] : presets(avatar.model())) list.push_back({{"name", name}, {"params", params_to_json(p)}});
    return json_reply(200, {{"presets", list}});
  }
  if (path == "/v1/render") {
    if (method != "POST") return error_reply(405, "use POST", "path", std::string(path));
    Request req;
    try {
      json j;
      try {
        j = json::parse(body);
      } catch (const json::parse_error& e) {
        throw ParamsError("params", std::string("invalid JSON: ") + e.what());
      }
      req = parse_request(avatar, cfg, j);
    } catch (const ParamsError& e) {
      return error_reply(400, e.what(), "field", e.field());
    }
    try {
      return {200, "image/png", png_bytes(avatar.render(req.params, req.mode, req.size).image)};
    } catch (const RenderError& e) {
      return error_reply(500, e.what(), "stage", e.stage());
    } catch (const std::exception& e) {
      return error_reply(500, e.what(), "stage", "encode");
    }
  }
  return error_reply(404, "no such endpoint", "path", std::string(path));
}

StreamReply handle_stream_message(const Avatar& avatar, const ServiceConfig& cfg, std::string_view text) {
  json seq = nullptr;
  auto error = [&](const std::string& msg, const char* key, const std::string& value) {
    return StreamReply{false, json{{"seq", seq}, {"error", msg}, {key, value}}.dump()};
  };
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    return error(std::string("invalid JSON: ") + e.what(), "field", "message");
  }
  if (!j.is_object() || !j.contains("seq") || !j["seq"].is_number_unsigned()) {
    return error("message needs a non-negative integer seq", "field", "seq");
  }
  seq = j["seq"];
  Request req;
  try {
    json inner = j.contains("params") ? j["params"] : json::object();
    if (!inner.is_object()) throw ParamsError("params", "expected an object");
    if (j.contains("mode")) inner["mode"] = j["mode"];
    if (j.contains("size")) inner["size"] = j["size"];
    req = parse_request(avatar, cfg, inner);
  } catch (const ParamsError& e) {
    return error(e.what(), "field", e.field());
  }
  std::string png;
  try {
    png = png_bytes(avatar.render(req.params, req.mode, req.size).image);
  } catch (const RenderError& e) {
    return error(e.what(), "stage", e.stage());
  } catch (const std::exception& e) {
    return error(e.what(), "stage", "encode");
  }
  const auto s = seq.get<std::uint64_t>();
  std::string out(8, '\0');
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((s >> (8 * i)) & 0xff);
  out += png;
  return {true, std::move(out)};
}

struct Server::Impl {
  std::shared_ptr<const Avatar> avatar;
  ServiceConfig cfg;
  net::io_context ioc;
  tcp::acceptor acceptor{ioc};
  std::thread accept_thread;
  std::atomic<bool> stopping{false};

  struct Connection {
    std::thread thread;
    int fd = -1;
    std::atomic<bool> done{false};
  };
  std::mutex mu;
  std::condition_variable stopped_cv;
  bool stopped = false;
  std::list<Connection> connections;

  void serve_http(tcp::socket& sock);
  void serve_stream(tcp::socket sock, http::request<http::string_body> req);
  void accept_loop();
};

void Server::Impl::serve_stream(tcp::socket sock, http::request<http::string_body> req) {
  websocket::stream<tcp::socket> ws(std::move(sock));
  beast::error_code ec;
  ws.set_option(websocket::stream_base::decorator(
      [](websocket::response_type& res) { res.set(http::field::server, "cvthead"); }));
  ws.accept(req, ec);
  if (ec) return;
  beast::flat_buffer buf;
  for (;;) {
    buf.clear();
    ws.read(buf, ec);
    if (ec) break;
    const auto text = beast::buffers_to_string(buf.data());
    const auto reply = handle_stream_message(*avatar, cfg, text);
    ws.binary(reply.binary);
    ws.write(net::buffer(reply.payload), ec);
    if (ec) break;
  }
}

void Server::Impl::serve_http(tcp::socket& sock) {
  beast::flat_buffer buf;
  beast::error_code ec;
  for (;;) {
    http::request_parser<http::string_body> parser;
    parser.body_limit(64u << 20);
    http::read(sock, buf, parser, ec);
    if (ec) return;
    auto req = parser.release();
    if (websocket::is_upgrade(req)) {
      if (req.target() == "/v1/stream") {
        serve_stream(std::move(sock), std::move(req));
        return;
      }
      http::response<http::string_body> res{http::status::not_found, req.version()};
      res.body() = R"({"error":"no such stream","path":")" + std::string(req.target()) + "\"}";
      res.prepare_payload();
      http::write(sock, res, ec);
      return;
    }
    const std::string method(req.method_string());
    const std::string target(req.target());
    const auto reply = handle_http(*avatar, cfg, method, target, req.body());
    spdlog::debug("{} {} -> {}", method, target, reply.status);
    http::response<http::string_body> res{http::int_to_status(reply.status), req.version()};
    res.set(http::field::server, "cvthead");
    res.set(http::field::content_type, reply.content_type);
    res.set(http::field::access_control_allow_origin, "*");
    res.set(http::field::access_control_allow_headers, "Content-Type");
    res.set(http::field::access_control_allow_methods, "GET, POST, OPTIONS");
    res.keep_alive(req.keep_alive());
    res.body() = reply.body;
    res.prepare_payload();
    http::write(sock, res, ec);
    if (ec || !req.keep_alive()) break;
  }
  sock.shutdown(tcp::socket::shutdown_send, ec);
}

void Server::Impl::accept_loop() {
  for (;;) {
    tcp::socket sock(ioc);
    beast::error_code ec;
    acceptor.accept(sock, ec);
    if (stopping) break;
    if (ec) {
      spdlog::warn("accept failed: {}", ec.message());
      continue;
    }
    std::lock_guard lock(mu);
    for (auto it = connections.begin(); it != connections.end();) {
      if (it->done) {
        it->thread.join();
        it = connections.erase(it);
      } else {
        ++it;
      }
    }
    auto& conn = connections.emplace_back();
    conn.fd = sock.native_handle();
    conn.thread = std::thread([this, &conn, s = std::move(sock)]() mutable {
      try {
        serve_http(s);
      } catch (const std::exception& e) {
        spdlog::warn("connection error: {}", e.what());
      }
      conn.done = true;
    });
  }
}

Server::Server(std::shared_ptr<const Avatar> avatar, ServiceConfig cfg) : impl_(std::make_unique<Impl>()) {
  cfg.validate();
  impl_->avatar = std::move(avatar);
  impl_->cfg = std::move(cfg);
}

Server::~Server() { stop(); }

std::uint16_t Server::start() {
  auto& im = *impl_;
  const tcp::endpoint ep(net::ip::make_address(im.cfg.host), static_cast<std::uint16_t>(im.cfg.port));
  im.acceptor.open(ep.protocol());
  im.acceptor.set_option(net::socket_base::reuse_address(true));
  im.acceptor.bind(ep);
  im.acceptor.listen();
  const auto port = im.acceptor.local_endpoint().port();
  im.accept_thread = std::thread([&im] { im.accept_loop(); });
  spdlog::info("serving on http://{}:{}", im.cfg.host, port);
  return port;
}

void Server::wait() {
  std::unique_lock lock(impl_->mu);
  impl_->stopped_cv.wait(lock, [&] { return impl_->stopped; });
}

void Server::stop() {
  auto& im = *impl_;
  if (im.stopping.exchange(true)) return;
  if (im.acceptor.is_open()) ::shutdown(im.acceptor.native_handle(), SHUT_RDWR);
  if (im.accept_thread.joinable()) im.accept_thread.join();
  beast::error_code ec;
  im.acceptor.close(ec);
  std::list<Impl::Connection> conns;
  {
    std::lock_guard lock(im.mu);
    for (auto& c : im.connections) {
      if (!c.done) ::shutdown(c.fd, SHUT_RDWR);
    }
    conns.splice(conns.end(), im.connections);
  }
  for (auto& c : conns) c.thread.join();
  {
    std::lock_guard lock(im.mu);
    im.stopped = true;
  }
  im.stopped_cv.notify_all();
}

}  // namespace cvthead::service
