#include "flexi/http_api.hpp"

#include <httplib.h>

namespace flexi {

namespace {

using gateway::ApiError;
using nlohmann::json;

constexpr std::size_t kWorkerThreads = 64;

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const ApiError& e) {
  send_json(res, e.status(), gateway::error_body(e));
}

std::optional<std::string> auth_header(const httplib::Request& req) {
  if (!req.has_header("Authorization")) return std::nullopt;
  return req.get_header_value("Authorization");
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw ApiError(400, "invalid_request", std::string("malformed JSON: ") + e.what());
  }
}

/// Runs `fn`, mapping exceptions to the error body.
template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const ApiError& e) {
    send_error(res, e);
  } catch (const ValidationError& e) {
    send_error(res, ApiError(400, "invalid_request", e.what()));
  } catch (const std::exception& e) {
    send_error(res, ApiError(502, "internal_error", e.what()));
  }
}

json tags_body(const std::vector<std::string>& names) {
  json models = json::array();
  for (const auto& n : names) models.push_back({{"name", n}});
  return {{"models", models}};
}

void send_metrics(const httplib::Request& req, httplib::Response& res,
                  const std::optional<telemetry::MetricsSample>& sample) {
  if (!sample) throw ApiError(503, "no_metrics", "no metrics sample available yet");
  if (req.get_param_value("format") == "lines") {
    std::string text;
    for (const auto& line : telemetry::export_lines(*sample)) text += line + "\n";
    res.status = 200;
    res.set_content(text, "text/plain");
  } else {
    send_json(res, 200, json(*sample));
  }
}

}  // namespace

std::pair<std::string, int> parse_listen(const std::string& listen) {
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("listen address needs host:port");
  const auto host = listen.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(listen.substr(colon + 1));
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid port in '" + listen + "'");
  }
  if (port < 0 || port > 65535) throw std::invalid_argument("invalid port in '" + listen + "'");
  return {host.empty() ? "127.0.0.1" : host, port};
}

HttpService::HttpService() : server_(std::make_unique<httplib::Server>()) {
  server_->new_task_queue = [] { return new httplib::ThreadPool(kWorkerThreads); };
  server_->Get("/health", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}});
  });
}

HttpService::~HttpService() { stop(); }

int HttpService::start(const std::string& host, int port) {
  int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

bool HttpService::run(const std::string& host, int port) { return server_->listen(host, port); }

void HttpService::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

GatewayServer::GatewayServer(gateway::Gateway& gw, LatestSample latest) {
  auto require_admin = [&gw](const httplib::Request& req) {
    auto p = gw.access().authenticate(auth_header(req));
    if (p.role != "admin") throw ApiError(403, "forbidden", "admin role required");
    return p;
  };

  server_->Post("/api/chat", [&gw](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      auto principal = gw.access().authenticate(auth_header(req));
      auto request = gateway::parse_chat_request(parse_body(req));
      send_json(res, 200, json(gw.handle_chat(principal, std::move(request))));
    });
  });

  server_->Get("/api/tags", [&gw](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      gw.access().authenticate(auth_header(req));
      send_json(res, 200, tags_body(gw.served_models()));
    });
  });

  server_->Get("/metrics", [&gw, latest](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      gw.access().authenticate(auth_header(req));
      auto sample = latest ? latest() : std::nullopt;
      if (sample && !sample->stale) sample->outstanding_requests = gw.total_outstanding();
      send_metrics(req, res, sample);
    });
  });

  server_->Put(R"(/admin/models/([^/]+))",
               [&gw, require_admin](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, [&] {
                   require_admin(req);
                   auto body = parse_body(req);
                   if (!body.is_object()) throw ApiError(400, "invalid_request", "expected an object");
                   body["name"] = req.matches[1].str();
                   auto card = body.get<ModelCard>();
                   gw.registry().register_model(card);
                   send_json(res, 200, json(card));
                 });
               });

  server_->Put(R"(/admin/keys/([^/]+))",
               [&gw, require_admin](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, [&] {
                   require_admin(req);
                   auto body = parse_body(req);
                   if (!body.is_object() || !body.contains("role") || !body["role"].is_string()) {
                     throw ApiError(400, "invalid_request", "key needs a string 'role'");
                   }
                   gateway::KeyEntry key;
                   key.key_id = req.matches[1].str();
                   key.role = body["role"].get<std::string>();
                   key.display_name = body.value("display_name", key.key_id);
                   key.revoked = body.value("revoked", false);
                   gw.access().put_key(key);
                   send_json(res, 200, {{"id", key.key_id}, {"role", key.role},
                                        {"display_name", key.display_name}, {"revoked", key.revoked}});
                 });
               });

  server_->Put(R"(/admin/templates/([^/]+))",
               [&gw, require_admin](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, [&] {
                   require_admin(req);
                   auto body = parse_body(req);
                   if (!body.is_object() || !body.contains("body") || !body["body"].is_string()) {
                     throw ApiError(400, "invalid_request", "template needs a string 'body'");
                   }
                   gateway::PromptTemplate t;
                   t.id = req.matches[1].str();
                   t.body = body["body"].get<std::string>();
                   t.required_params = body.value("required_params", std::set<std::string>{});
                   t.defaults = body.value("defaults", std::map<std::string, std::string>{});
                   gw.templates().put(t);
                   send_json(res, 200, {{"id", t.id}, {"body", t.body}});
                 });
               });

  server_->Get("/admin/usage",
               [&gw, require_admin](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, [&] {
                   require_admin(req);
                   send_json(res, 200, json(gw.usage()));
                 });
               });
}

SimHttpServer::SimHttpServer(std::shared_ptr<SimBackend> backend, double default_timeout_s)
    : backend_(std::move(backend)) {
  auto* b = backend_.get();
  server_->Post("/api/chat", [b, default_timeout_s](const httplib::Request& req,
                                                    httplib::Response& res) {
    guarded(res, [&] {
      auto request = gateway::parse_chat_request(parse_body(req));
      request.model = lowercase(request.model);
      if (!b->models().count(request.model)) {
        throw ApiError(404, "model_not_found", "model '" + request.model + "' is not served");
      }
      if (request.messages.empty()) throw ApiError(400, "invalid_request", "'messages' is empty");
      double timeout = default_timeout_s;
      if (req.has_header(kTimeoutHeader)) {
        try {
          timeout = std::stod(req.get_header_value(kTimeoutHeader));
        } catch (const std::exception&) {
          throw ApiError(400, "invalid_request", "bad timeout header");
        }
      }
      const long prompt = gateway::estimate_tokens(request.messages);
      auto reply = b->generate(request, prompt, timeout);
      gateway::ChatResponse out;
      out.model = request.model;
      out.message.content = std::move(reply.content);
      out.prompt_tokens = reply.prompt_tokens;
      out.completion_tokens = reply.completion_tokens;
      out.total_duration_s = reply.duration_s;
      out.timed_out = reply.timed_out;
      send_json(res, 200, json(out));
    });
  });

  server_->Get("/api/tags", [b](const httplib::Request&, httplib::Response& res) {
    auto models = b->models();
    send_json(res, 200, tags_body({models.begin(), models.end()}));
  });

  server_->Get("/metrics", [b](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      auto sample = b->sim().with_server([](sim::SimServer& s) { return telemetry::snapshot(s); });
      send_metrics(req, res, sample);
    });
  });
}

}  // namespace flexi
