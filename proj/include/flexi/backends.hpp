#pragma once

#include <memory>
#include <mutex>
#include <string>

#include "flexi/gateway.hpp"
#include "flexi/realtime.hpp"

namespace flexi {

/// In-process simulated server behind the gateway's Backend interface.
/// Durations are reported in simulated seconds.
class SimBackend : public gateway::Backend {
 public:
  SimBackend(std::string id, sim::SimServer server, double speedup, std::uint64_t seed,
             double output_mean = 500, double output_jitter = 0.1);

  const std::string& id() const override { return id_; }
  std::set<std::string> models() const override { return models_; }
  gateway::BackendReply generate(const gateway::ChatRequest& request, long prompt_tokens,
                                 double timeout_s) override;

  sim::RealTimeSim& sim() { return *sim_; }

 private:
  std::string id_;
  std::set<std::string> models_;
  std::unique_ptr<sim::RealTimeSim> sim_;
  std::mutex rng_mutex_;
  sim::OutputLength lengths_;
};

/// Forwards requests to a remote server speaking POST /api/chat.
class HttpBackend : public gateway::Backend {
 public:
  /// `time_scale`: backend seconds per wall second, used to size the client
  /// read timeout when the remote is a sped-up simulator.
  HttpBackend(std::string id, std::string base_url, std::set<std::string> models,
              double time_scale = 1.0);

  const std::string& id() const override { return id_; }
  std::set<std::string> models() const override { return models_; }
  std::string endpoint() const override { return base_url_; }
  gateway::BackendReply generate(const gateway::ChatRequest& request, long prompt_tokens,
                                 double timeout_s) override;

 private:
  std::string id_;
  std::string base_url_;
  std::set<std::string> models_;
  double time_scale_;
};

/// Placeholder completion text of exactly `tokens` words.
std::string synthetic_completion(long tokens);

inline constexpr const char* kTimeoutHeader = "X-Flexi-Timeout";

}  // namespace flexi
