#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "cvthead/service/avatar.hpp"

namespace cvthead::service {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  int frame_size = 256;
  int max_frame_size = 1024;
  RenderMode default_mode = RenderMode::depth;

  // Port in [1, 65535]; frame sizes positive with frame_size <= max_frame_size.
  void validate() const;
};

struct HttpReply {
  unsigned status = 200;
  std::string content_type;
  std::string body;
};

// GET /v1/model, GET /v1/presets, POST /v1/render. Bad params give 400 with
// {"error","field"}; a failing render stage gives 500 with {"error","stage"}.
HttpReply handle_http(const Avatar& avatar, const ServiceConfig& cfg, std::string_view method, std::string_view target,
                      std::string_view body);

struct StreamReply {
  bool binary = false;
  std::string payload;
};

// One /v1/stream message {"seq":k,"mode":m,"params":{..},"size":s}. A frame
// reply is binary: 8-byte little-endian seq followed by the PNG. Errors are
// text {"seq":k,"error":..,"field"|"stage":..}.
StreamReply handle_stream_message(const Avatar& avatar, const ServiceConfig& cfg, std::string_view text);

// Blocking-socket server, one thread per connection. Frames on one WebSocket
// are produced in arrival order.
class Server {
 public:
  Server(std::shared_ptr<const Avatar> avatar, ServiceConfig cfg);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and starts accepting; returns the bound port.
  std::uint16_t start();
  // Blocks until stop() is called from another thread or a signal handler.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cvthead::service
