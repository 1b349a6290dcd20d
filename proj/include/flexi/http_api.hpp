#pragma once

#include <functional>
#include <memory>
#include <string>
#include <thread>

#include "flexi/backends.hpp"
#include "flexi/gateway.hpp"
#include "flexi/telemetry.hpp"

namespace httplib {
class Server;
}

namespace flexi {

/// Owns an httplib::Server and the thread running it.
class HttpService {
 public:
  HttpService();
  virtual ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  /// Binds and serves on the calling thread until stop().
  bool run(const std::string& host, int port);
  void stop();

 protected:
  std::unique_ptr<httplib::Server> server_;

 private:
  std::thread thread_;
};

/// The gateway's HTTP surface: chat, tags, metrics and admin endpoints.
class GatewayServer : public HttpService {
 public:
  using LatestSample = std::function<std::optional<telemetry::MetricsSample>()>;

  GatewayServer(gateway::Gateway& gw, LatestSample latest);
};

/// A simulated inference server speaking POST /api/chat without auth, so
/// load tests and gateways can target it like a real serving process.
class SimHttpServer : public HttpService {
 public:
  SimHttpServer(std::shared_ptr<SimBackend> backend, double default_timeout_s);

 private:
  std::shared_ptr<SimBackend> backend_;
};

/// Splits "host:port". Throws std::invalid_argument.
std::pair<std::string, int> parse_listen(const std::string& listen);

}  // namespace flexi
