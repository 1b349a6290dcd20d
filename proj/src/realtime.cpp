#include "flexi/realtime.hpp"

#include <algorithm>
#include <cmath>

namespace flexi::sim {

OutputLength::OutputLength(std::uint64_t seed, double mean, double jitter)
    : rng_(seed), mean_(mean), jitter_(jitter) {
  if (!(mean > 0)) throw std::invalid_argument("OutputLength: mean must be > 0");
  if (!(jitter >= 0 && jitter < 1)) throw std::invalid_argument("OutputLength: jitter in [0,1)");
}

long OutputLength::draw(long max_tokens) {
  // 53 high bits -> [0,1); avoids implementation-defined std distributions.
  const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
  const double factor = 1.0 - jitter_ + 2.0 * jitter_ * u;
  const long tokens = std::max(1L, std::lround(mean_ * factor));
  return max_tokens > 0 ? std::min(tokens, max_tokens) : tokens;
}

RealTimeSim::RealTimeSim(SimServer server, double speedup)
    : server_(std::move(server)),
      speedup_(speedup),
      wall_origin_(std::chrono::steady_clock::now()),
      sim_origin_(server_.clock()) {
  if (!(speedup > 0)) throw std::invalid_argument("RealTimeSim: speedup must be > 0");
  driver_ = std::jthread([this](std::stop_token st) { drive(st); });
}

RealTimeSim::~RealTimeSim() {
  driver_.request_stop();
  cv_.notify_all();
}

void RealTimeSim::advance_locked() {
  const std::chrono::duration<double> wall = std::chrono::steady_clock::now() - wall_origin_;
  const double target = sim_origin_ + wall.count() * speedup_;
  if (target > server_.clock()) {
    if (!server_.run_until(target).empty()) cv_.notify_all();
  }
}

double RealTimeSim::now() {
  std::lock_guard lock(mutex_);
  advance_locked();
  return server_.clock();
}

JobId RealTimeSim::submit(const std::string& model, long prompt_tokens, long output_tokens,
                          std::optional<double> timeout) {
  std::lock_guard lock(mutex_);
  advance_locked();
  auto id = server_.submit(model, prompt_tokens, output_tokens, timeout);
  ++generation_;
  cv_.notify_all();
  return id;
}

SimJob RealTimeSim::wait(JobId id) {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [&] { return server_.job(id).finished(); });
  SimJob job = server_.job(id);
  server_.forget(id);
  return job;
}

bool RealTimeSim::cancel(JobId id) {
  std::lock_guard lock(mutex_);
  advance_locked();
  bool cancelled = server_.cancel(id);
  if (cancelled) {
    ++generation_;
    cv_.notify_all();
  }
  return cancelled;
}

void RealTimeSim::drive(std::stop_token stop) {
  using namespace std::chrono;
  std::unique_lock lock(mutex_);
  while (!stop.stop_requested()) {
    advance_locked();
    auto wake = steady_clock::now() + milliseconds(20);
    if (auto next = server_.next_event_time()) {
      const double wall_s = (*next - sim_origin_) / speedup_;
      auto at = wall_origin_ + duration_cast<steady_clock::duration>(duration<double>(wall_s));
      wake = std::min(wake, at);
    }
    const auto seen = generation_;
    cv_.wait_until(lock, stop, wake, [&] { return generation_ != seen; });
  }
}

}  // namespace flexi::sim
