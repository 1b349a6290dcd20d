#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <random>
#include <thread>

#include "flexi/sim.hpp"

namespace flexi::sim {

/// Seeded generation-length draw: round(mean * U[1 - jitter, 1 + jitter]),
/// capped at the request's max_tokens.
class OutputLength {
 public:
  OutputLength(std::uint64_t seed, double mean = 500, double jitter = 0.1);
  long draw(long max_tokens);

 private:
  std::mt19937_64 rng_;
  double mean_;
  double jitter_;
};

/// Paces a SimServer against the wall clock: one simulated second takes
/// 1/speedup real seconds. All access is serialized by an internal mutex.
class RealTimeSim {
 public:
  RealTimeSim(SimServer server, double speedup);
  ~RealTimeSim();
  RealTimeSim(const RealTimeSim&) = delete;
  RealTimeSim& operator=(const RealTimeSim&) = delete;

  JobId submit(const std::string& model, long prompt_tokens, long output_tokens,
               std::optional<double> timeout);
  /// Blocks until the job completes, times out or is cancelled.
  SimJob wait(JobId id);
  bool cancel(JobId id);

  double speedup() const { return speedup_; }
  double now();

  template <typename F>
  auto with_server(F&& f) {
    std::lock_guard lock(mutex_);
    advance_locked();
    return f(server_);
  }

 private:
  void advance_locked();
  void drive(std::stop_token stop);

  std::mutex mutex_;
  std::condition_variable_any cv_;
  SimServer server_;
  double speedup_;
  std::chrono::steady_clock::time_point wall_origin_;
  double sim_origin_;
  std::uint64_t generation_ = 0;  // bumped when the event set changes
  std::jthread driver_;
};

}  // namespace flexi::sim
