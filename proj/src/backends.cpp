#include "flexi/backends.hpp"

#include <httplib.h>

namespace flexi {

std::string synthetic_completion(long tokens) {
  static constexpr const char* kWords[] = {"the", "model", "answers", "with", "simulated",
                                           "tokens", "for", "this", "request"};
  std::string out;
  for (long i = 0; i < tokens; ++i) {
    if (i) out += ' ';
    out += kWords[i % std::size(kWords)];
  }
  return out;
}

SimBackend::SimBackend(std::string id, sim::SimServer server, double speedup, std::uint64_t seed,
                       double output_mean, double output_jitter)
    : id_(std::move(id)), lengths_(seed, output_mean, output_jitter) {
  for (const auto& m : server.served_models()) models_.insert(m);
  sim_ = std::make_unique<sim::RealTimeSim>(std::move(server), speedup);
}

gateway::BackendReply SimBackend::generate(const gateway::ChatRequest& request,
                                           long prompt_tokens, double timeout_s) {
  long output = 0;
  {
    std::lock_guard lock(rng_mutex_);
    output = lengths_.draw(request.options.max_tokens.value_or(gateway::kDefaultMaxTokens));
  }
  sim::JobId id = 0;
  try {
    id = sim_->submit(request.model, prompt_tokens, output, timeout_s);
  } catch (const sim::UnknownModel& e) {
    throw gateway::ApiError(503, "no_backend", e.what());
  } catch (const sim::InsufficientMemory& e) {
    throw gateway::ApiError(503, "insufficient_memory", e.what());
  }
  const auto job = sim_->wait(id);

  gateway::BackendReply reply;
  reply.prompt_tokens = prompt_tokens;
  reply.duration_s = *job.finish_time - job.submit_time;
  if (job.status == sim::JobStatus::Completed) {
    reply.completion_tokens = job.output_tokens;
    reply.content = synthetic_completion(job.output_tokens);
  } else {
    reply.timed_out = true;
    reply.duration_s = timeout_s;
  }
  return reply;
}

HttpBackend::HttpBackend(std::string id, std::string base_url, std::set<std::string> models,
                         double time_scale)
    : id_(std::move(id)),
      base_url_(std::move(base_url)),
      models_(std::move(models)),
      time_scale_(time_scale) {
  if (!(time_scale_ > 0)) throw std::invalid_argument("HttpBackend: time_scale must be > 0");
}

gateway::BackendReply HttpBackend::generate(const gateway::ChatRequest& request,
                                            long /*prompt_tokens*/, double timeout_s) {
  httplib::Client client(base_url_);
  const double wall_timeout = timeout_s / time_scale_ + 5.0;
  const auto secs = static_cast<time_t>(wall_timeout);
  const auto usecs = static_cast<time_t>((wall_timeout - static_cast<double>(secs)) * 1e6);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(10, 0);
  client.set_connection_timeout(5, 0);

  nlohmann::json body = request;
  body.erase("template_id");
  body.erase("template_params");
  httplib::Headers headers{{kTimeoutHeader, std::to_string(timeout_s)}};
  auto res = client.Post("/api/chat", headers, body.dump(), "application/json");
  if (!res) {
    if (res.error() == httplib::Error::Read) {
      gateway::BackendReply reply;
      reply.timed_out = true;
      reply.duration_s = timeout_s;
      return reply;
    }
    throw gateway::ApiError(502, "backend_error",
                            "backend '" + id_ + "' unreachable: " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw gateway::ApiError(502, "backend_error",
                            "backend '" + id_ + "' returned HTTP " + std::to_string(res->status));
  }
  gateway::ChatResponse parsed;
  try {
    parsed = nlohmann::json::parse(res->body).get<gateway::ChatResponse>();
  } catch (const std::exception& e) {
    throw gateway::ApiError(502, "backend_error",
                            "backend '" + id_ + "' sent an invalid body: " + e.what());
  }
  gateway::BackendReply reply;
  reply.content = std::move(parsed.message.content);
  reply.prompt_tokens = parsed.prompt_tokens;
  reply.completion_tokens = parsed.completion_tokens;
  reply.duration_s = parsed.total_duration_s;
  reply.timed_out = parsed.timed_out;
  return reply;
}

}  // namespace flexi
