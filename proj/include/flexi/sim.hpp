#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexi/registry.hpp"

namespace flexi::sim {

class InsufficientMemory : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnknownModel : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GpuSpec {
  int id = 0;
  double vram_gb = 0;
  double max_power_w = 0;
  double idle_power_w = 0;

  void validate() const;
};

struct Placement {
  std::string model;
  std::vector<int> gpu_ids;             // ascending
  std::map<int, double> vram_per_gpu;   // GB reserved on each chosen GPU

  double total_gb() const;
};

/// Per-GPU VRAM bookkeeping shared by placement and the server.
class GpuPool {
 public:
  explicit GpuPool(std::vector<GpuSpec> gpus);

  const std::vector<GpuSpec>& gpus() const { return gpus_; }
  double free_gb(int gpu) const;
  double reserved_gb(int gpu) const;
  double total_free_gb() const;

  void reserve(const Placement& p);
  void release(const Placement& p);

 private:
  std::vector<GpuSpec> gpus_;
  std::vector<double> reserved_;
};

/// Fewest GPUs that can hold the footprint split evenly; lowest ids among
/// equal counts. Does not reserve. Throws InsufficientMemory.
Placement place_model(const ModelCard& card, const GpuPool& pool);

/// Seconds to serve one request on an otherwise idle instance.
/// Prompt evaluation runs at ten times the generation rate.
double service_time(const ModelCard& card, long prompt_tokens, long output_tokens,
                    double cold_load_s = 0.0);

inline constexpr double kPromptRateFactor = 10.0;

using JobId = std::uint64_t;

enum class JobStatus { Queued, Running, Completed, TimedOut, Cancelled };

struct SimJob {
  JobId id = 0;
  std::string model;
  long prompt_tokens = 0;
  long output_tokens = 0;
  double submit_time = 0;
  std::optional<double> start_time;
  std::optional<double> finish_time;
  std::optional<double> deadline;
  JobStatus status = JobStatus::Queued;
  int instance = -1;

  bool finished() const {
    return status == JobStatus::Completed || status == JobStatus::TimedOut ||
           status == JobStatus::Cancelled;
  }
};

/// How a configured model is served. `parallel` > 1 lets one instance run
/// that many jobs at once under processor sharing.
struct ModelServing {
  ModelCard card;
  int instances = 1;
  int parallel = 1;
  double cold_load_s = 0;
};

struct InstanceInfo {
  int id = 0;
  std::string model;
  Placement placement;
  std::size_t queued = 0;
  std::size_t running = 0;
};

/// Discrete-event model of one multi-GPU inference server over a virtual clock.
/// Not thread-safe; see RealTimeSim for a paced, locked wrapper.
class SimServer {
 public:
  explicit SimServer(std::vector<GpuSpec> gpus);

  /// Registers how a model is served. Does not load it.
  void configure(ModelServing serving);
  /// Loads configured models in registration order while they fit.
  void preload();

  /// Repeatedly places `card` until VRAM runs out or `limit` instances exist.
  /// Spawned instances are warm unless `cold` is set.
  int spawn_instances(const ModelCard& card, int limit, bool cold = false);
  /// Drops every instance of `model` and returns its VRAM. Fails if any has work.
  bool release_model(const std::string& model);

  /// Enqueues on the instance of `model` with the fewest jobs in system
  /// (tie: lowest instance id). A configured model that is not resident is
  /// loaded first, evicting idle models least-recently used first.
  JobId submit(const std::string& model, long prompt_tokens, long output_tokens,
               std::optional<double> timeout = std::nullopt);
  bool cancel(JobId id);

  /// Processes every event with time <= t; returns jobs that finished.
  std::vector<SimJob> run_until(double t);
  /// Time of the next pending event, if any.
  std::optional<double> next_event_time() const;

  double clock() const { return clock_; }
  double power_draw() const;
  bool gpu_busy(int gpu) const;

  const GpuPool& pool() const { return pool_; }
  const SimJob& job(JobId id) const;
  void forget(JobId id);
  std::vector<InstanceInfo> instances() const;
  std::vector<std::string> loaded_models() const;
  std::vector<std::string> served_models() const;
  std::optional<ModelCard> card(const std::string& model) const;
  std::size_t jobs_in_system() const;

 private:
  struct Instance {
    int id = 0;
    std::string model;
    Placement placement;
    int parallel = 1;
    double cold_load_s = 0;
    bool cold = false;
    std::deque<JobId> queue;
    std::vector<JobId> running;
    double last_update = 0;
  };
  struct Progress {
    double remaining = 0;  // seconds of solo service left
    double projected_finish = 0;
  };
  enum class EventKind { Completion = 0, Deadline = 1 };
  struct Event {
    double time;
    JobId job;
    EventKind kind;
  };

  Instance* instance_by_id(int id);
  const ModelServing* serving(const std::string& key) const;
  void ensure_resident(const std::string& key);
  std::optional<Event> next_event() const;
  void settle(Instance& inst, double now);
  void reproject(Instance& inst, double now);
  void start_ready(Instance& inst, double now);
  void finish(JobId id, JobStatus status, double now);

  GpuPool pool_;
  std::map<std::string, ModelServing> serving_;
  std::vector<std::string> serving_order_;
  std::vector<Instance> instances_;
  std::map<std::string, std::uint64_t> last_used_;
  std::map<JobId, SimJob> jobs_;
  std::map<JobId, Progress> progress_;
  double clock_ = 0;
  JobId next_job_ = 0;
  int next_instance_ = 0;
  std::uint64_t use_counter_ = 0;
};

}  // namespace flexi::sim
