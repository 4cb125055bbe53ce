#include <doctest.h>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <filesystem>
#include <future>
#include <thread>

#include "cvthead/errors.hpp"
#include "cvthead/service/avatar.hpp"
#include "cvthead/service/params_json.hpp"
#include "cvthead/service/png.hpp"
#include "cvthead/service/server.hpp"

using namespace cvthead;
using namespace cvthead::service;
using nlohmann::json;

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

namespace {

const head_model::HeadModel& model() {
  static const auto m = head_model::generate_synthetic_model(0);
  return m;
}

std::shared_ptr<const Avatar> avatar() {
  static const auto a = std::make_shared<const Avatar>(model(), std::nullopt);
  return a;
}

std::string png_string(const Image8& img) {
  const auto b = encode_png(img);
  return {b.begin(), b.end()};
}

Image8 decode(const std::string& s) {
  return decode_png(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

int free_port() {
  net::io_context ioc;
  tcp::acceptor a(ioc, tcp::endpoint(net::ip::make_address("127.0.0.1"), 0));
  return a.local_endpoint().port();
}

struct RunningServer {
  ServiceConfig cfg;
  Server server;
  explicit RunningServer(ServiceConfig c) : cfg(std::move(c)), server(avatar(), cfg) { server.start(); }
};

ServiceConfig test_config() {
  ServiceConfig c;
  c.port = free_port();
  c.frame_size = 64;
  return c;
}

http::response<http::string_body> request(int port, http::verb verb, const std::string& target,
                                          const std::string& body = "") {
  net::io_context ioc;
  tcp::socket sock(ioc);
  sock.connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), static_cast<unsigned short>(port)));
  http::request<http::string_body> req{verb, target, 11};
  req.set(http::field::host, "127.0.0.1");
  req.set(http::field::content_type, "application/json");
  req.body() = body;
  req.prepare_payload();
  http::write(sock, req);
  beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(sock, buf, res);
  beast::error_code ec;
  sock.shutdown(tcp::socket::shutdown_both, ec);
  return res;
}

json render_body(const head_model::AvatarParams& p, const std::string& mode, int size) {
  auto j = params_to_json(p);
  j["mode"] = mode;
  j["size"] = size;
  return j;
}

head_model::AvatarParams varied(int k) {
  auto p = head_model::AvatarParams::zeros(model());
  p.theta[1] = 0.1f * static_cast<float>(k);
  p.phi[0] = 0.3f * static_cast<float>(k % 3);
  p.camera.scale = 1.0f + 0.05f * static_cast<float>(k);
  return p;
}

}  // namespace

TEST_CASE("params JSON: round trip and field-level errors") {
  const auto& m = model();
  auto p = head_model::AvatarParams::zeros(m);
  p.beta[3] = 0.5f;
  p.phi[1] = -1.25f;
  p.theta[7] = 0.2f;
  p.camera = {1.2f, 0.1f, -0.05f};
  const auto back = params_from_json(params_to_json(p), m);
  CHECK(back.beta == p.beta);
  CHECK(back.phi == p.phi);
  CHECK(back.theta == p.theta);
  CHECK(back.camera.scale == p.camera.scale);
  CHECK(back.camera.ty == p.camera.ty);
  CHECK_FALSE(back.offsets.has_value());

  head_model::Vertices off = head_model::Vertices::Zero(static_cast<Eigen::Index>(m.n_vertices()), 3);
  off(10, 2) = 0.01f;
  p.offsets = off;
  const auto with_off = params_from_json(params_to_json(p), m);
  REQUIRE(with_off.offsets.has_value());
  CHECK((*with_off.offsets)(10, 2) == 0.01f);

  auto field_of = [&](const std::string& text) {
    try {
      parse_params(text, m);
    } catch (const ParamsError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  CHECK(field_of(R"({"beta":[1,2,3]})") == "beta");
  CHECK(field_of(R"({"theta":[0]})") == "theta");
  CHECK(field_of(R"({"phi":"x"})") == "phi");
  CHECK(field_of(R"({"camera":{"scale":"big","tx":0,"ty":0}})") == "camera.scale");
  CHECK(field_of(R"({"offsets":[[0,0]]})").starts_with("offsets"));
  CHECK(field_of("[1,2]") != "<none>");
  CHECK(field_of("{}") == "<none>");
}

TEST_CASE("PNG encode/decode round trip") {
  for (int ch : {1, 3, 4}) {
    Image8 img{7, 5, ch, {}};
    for (int i = 0; i < 7 * 5 * ch; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 37 % 256));
    CHECK(decode(png_string(img)) == img);
  }
  const std::vector<std::uint8_t> junk{1, 2, 3, 4};
  CHECK_THROWS_AS(decode_png(junk), FormatError);
}

TEST_CASE("handle_http: model info, presets, render and errors") {
  const auto& a = *avatar();
  ServiceConfig cfg;
  cfg.frame_size = 64;

  const auto info = handle_http(a, cfg, "GET", "/v1/model", "");
  REQUIRE(info.status == 200);
  const auto j = json::parse(info.body);
  CHECK(j["n_vertices"] == 5023);
  CHECK(j["n_coarse"] == 314);
  CHECK(j["shape_dims"] == model().shape_dims());
  CHECK(j["expr_dims"] == model().expr_dims());
  CHECK(j["joints"] == model().n_joints());
  CHECK(j["frame_size"] == 64);

  const auto pre = json::parse(handle_http(a, cfg, "GET", "/v1/presets", "").body);
  REQUIRE(pre["presets"].size() >= 5);
  for (const auto& e : pre["presets"]) CHECK_NOTHROW(params_from_json(e["params"], model()));

  for (const std::string mode : {"depth", "splat", "neural", "oracle"}) {
    const auto p = varied(2);
    const auto r = handle_http(a, cfg, "POST", "/v1/render", render_body(p, mode, 64).dump());
    REQUIRE(r.status == 200);
    CHECK(r.content_type == "image/png");
    const auto img = decode(r.body);
    CHECK(img.width == 64);
    CHECK(img.channels == (mode == "depth" ? 1 : 3));
    CHECK(img == a.render(p, parse_mode(mode), 64).image);
  }

  auto error = [&](const std::string& body) {
    const auto r = handle_http(a, cfg, "POST", "/v1/render", body);
    return std::make_pair(r.status, json::parse(r.body));
  };
  auto [s1, e1] = error(R"({"beta":[1,2]})");
  CHECK(s1 == 400);
  CHECK(e1["field"] == "beta");
  CHECK(e1["error"].get<std::string>().find("beta") != std::string::npos);
  auto [s2, e2] = error(R"({"mode":"wireframe"})");
  CHECK(s2 == 400);
  CHECK(e2["field"] == "mode");
  auto [s3, e3] = error(R"({"mode":"neural","size":60})");
  CHECK(s3 == 400);
  CHECK(e3["field"] == "size");
  auto [s4, e4] = error("{not json");
  CHECK(s4 == 400);
  auto [s5, e5] = error(R"({"size":4096})");
  CHECK(s5 == 400);
  CHECK(e5["field"] == "size");

  CHECK(handle_http(a, cfg, "GET", "/v1/nothing", "").status == 404);
  CHECK(handle_http(a, cfg, "GET", "/v1/render", "").status == 405);
  CHECK(handle_http(a, cfg, "POST", "/v1/model", "").status == 405);
}

TEST_CASE("handle_stream_message: binary frame tagged with seq, text errors") {
  const auto& a = *avatar();
  ServiceConfig cfg;
  cfg.frame_size = 32;
  json msg{{"seq", 258}, {"mode", "depth"}, {"params", params_to_json(varied(1))}};
  const auto r = handle_stream_message(a, cfg, msg.dump());
  REQUIRE(r.binary);
  REQUIRE(r.payload.size() > 8);
  CHECK(static_cast<unsigned char>(r.payload[0]) == 2);
  CHECK(static_cast<unsigned char>(r.payload[1]) == 1);
  for (int i = 2; i < 8; ++i) CHECK(r.payload[i] == 0);
  CHECK(decode(r.payload.substr(8)) == a.render(varied(1), RenderMode::depth, 32).image);

  const auto bad = handle_stream_message(a, cfg, R"({"seq":4,"params":{"beta":[0]}})");
  CHECK_FALSE(bad.binary);
  const auto e = json::parse(bad.payload);
  CHECK(e["seq"] == 4);
  CHECK(e["field"] == "beta");
  CHECK_FALSE(handle_stream_message(a, cfg, R"({"params":{}})").binary);
}

TEST_CASE("ServiceConfig validation") {
  ServiceConfig c;
  c.port = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.port = 65536;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.port = 65535;
  CHECK_NOTHROW(c.validate());
  c.frame_size = 2048;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("server: HTTP endpoints over a socket") {
  RunningServer s(test_config());
  const auto info = request(s.cfg.port, http::verb::get, "/v1/model");
  CHECK(info.result_int() == 200);
  CHECK(json::parse(info.body())["n_vertices"] == 5023);
  CHECK(info[http::field::access_control_allow_origin] == "*");

  const auto p = varied(3);
  const auto png = request(s.cfg.port, http::verb::post, "/v1/render", render_body(p, "oracle", 64).dump());
  CHECK(png.result_int() == 200);
  CHECK(decode(png.body()) == avatar()->render(p, RenderMode::oracle, 64).image);

  const auto bad = request(s.cfg.port, http::verb::post, "/v1/render", R"({"beta":[1]})");
  CHECK(bad.result_int() == 400);
  CHECK(json::parse(bad.body())["field"] == "beta");
  CHECK(request(s.cfg.port, http::verb::options, "/v1/render").result_int() == 204);
}

TEST_CASE("server: five stream messages come back as seq 1..5 in order") {
  RunningServer s(test_config());
  net::io_context ioc;
  websocket::stream<tcp::socket> ws(ioc);
  ws.next_layer().connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), static_cast<unsigned short>(s.cfg.port)));
  ws.handshake("127.0.0.1", "/v1/stream");
  // All five go out before any reply is read.
  for (int k = 1; k <= 5; ++k) {
    ws.text(true);
    ws.write(net::buffer(json{{"seq", k}, {"mode", k % 2 ? "depth" : "splat"}, {"size", 48},
                              {"params", params_to_json(varied(k))}}
                             .dump()));
  }
  for (int k = 1; k <= 5; ++k) {
    beast::flat_buffer buf;
    ws.read(buf);
    REQUIRE(ws.got_binary());
    const auto data = beast::buffers_to_string(buf.data());
    std::uint64_t seq = 0;
    for (int i = 7; i >= 0; --i) seq = (seq << 8) | static_cast<unsigned char>(data[i]);
    CHECK(seq == static_cast<std::uint64_t>(k));
    const auto expect = avatar()->render(varied(k), k % 2 ? RenderMode::depth : RenderMode::splat, 48).image;
    CHECK(decode(data.substr(8)) == expect);
  }
  ws.text(true);
  ws.write(net::buffer(std::string(R"({"seq":6,"params":{"theta":[1]}})")));
  beast::flat_buffer buf;
  ws.read(buf);
  CHECK(ws.got_text());
  const auto e = json::parse(beast::buffers_to_string(buf.data()));
  CHECK(e["seq"] == 6);
  CHECK(e["field"] == "theta");
  ws.close(websocket::close_code::normal);
}

TEST_CASE("server: concurrent renders equal sequential ones") {
  RunningServer s(test_config());
  constexpr int kRequests = 8;
  std::vector<std::string> bodies;
  for (int k = 0; k < kRequests; ++k) bodies.push_back(render_body(varied(k), k % 2 ? "neural" : "oracle", 32).dump());
  std::vector<std::string> sequential;
  for (const auto& b : bodies) sequential.push_back(request(s.cfg.port, http::verb::post, "/v1/render", b).body());

  std::vector<std::future<std::string>> futs;
  for (int k = 0; k < kRequests; ++k) {
    futs.push_back(std::async(std::launch::async, [&, k] {
      return request(s.cfg.port, http::verb::post, "/v1/render", bodies[static_cast<std::size_t>(k)]).body();
    }));
  }
  for (int k = 0; k < kRequests; ++k) CHECK(futs[static_cast<std::size_t>(k)].get() == sequential[static_cast<std::size_t>(k)]);
}

TEST_CASE("server: stop() returns with an idle connection open") {
  auto s = std::make_unique<RunningServer>(test_config());
  net::io_context ioc;
  tcp::socket idle(ioc);
  idle.connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), static_cast<unsigned short>(s->cfg.port)));
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  s->server.stop();
  s->server.wait();
  s.reset();
  CHECK(true);
}
