#pragma once

#include <chrono>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flexi/sim.hpp"

namespace flexi::telemetry {

struct GpuMetrics {
  int id = 0;
  long mem_used_mb = 0;
  long mem_total_mb = 0;
  int util_pct = 0;
  double power_w = 0;
};

struct MetricsSample {
  double timestamp = 0;
  bool stale = false;
  std::vector<GpuMetrics> gpus;
  std::vector<std::string> loaded_models;
  long outstanding_requests = 0;

  double total_power_w() const;
};

void to_json(nlohmann::json& j, const MetricsSample& s);
void from_json(const nlohmann::json& j, MetricsSample& s);

/// Produces a snapshot at time t, or nullopt / throws when unavailable.
using MetricsSource = std::function<std::optional<MetricsSample>(double t)>;

/// Never fabricates: an unavailable source yields a stale sample with no
/// numeric fields.
MetricsSample sample_metrics(const MetricsSource& source, double t);

/// Snapshot of a simulated server at its current clock.
MetricsSample snapshot(const sim::SimServer& server);

/// Source over a virtual-clock simulator: advances it to t, then snapshots.
MetricsSource sim_source(sim::SimServer& server);

struct Window {
  double t0 = 0;
  double t1 = 0;
};

inline constexpr double kJoulesPerKwh = 3.6e6;

/// Trapezoidal integral of total power over the non-stale samples inside
/// `window`, in kWh. Throws std::invalid_argument with fewer than two samples
/// or non-increasing timestamps.
double integrate_energy(const std::vector<MetricsSample>& samples, Window window);

struct EnergyReport {
  std::optional<Window> window;
  double energy_kwh = 0;
  std::optional<double> avg_daily_kwh;
  double cost = 0;
  double co2_kg = 0;
  double price_per_kwh = 0;
  double intensity_g_per_kwh = 0;
};

void to_json(nlohmann::json& j, const EnergyReport& r);

/// With `annualize`, `energy_kwh` is a daily figure scaled by 365.
EnergyReport cost_report(double energy_kwh, double price_per_kwh, double co2_g_per_kwh,
                         bool annualize, std::optional<Window> window = std::nullopt);

/// Local-check style lines: one per GPU plus a server summary, or a single
/// status-2 line for a stale sample.
std::vector<std::string> export_lines(const MetricsSample& sample);
std::string format_number(double v);

/// Ordered, concurrently readable sample store with optional NDJSON persistence.
class SampleStore {
 public:
  explicit SampleStore(std::string path = {});

  void append(const MetricsSample& s);
  std::optional<MetricsSample> latest() const;
  std::vector<MetricsSample> all() const;

  static std::vector<MetricsSample> load_ndjson(const std::string& path);

 private:
  mutable std::mutex mutex_;
  std::string path_;
  std::vector<MetricsSample> samples_;
};

/// Calls sample_metrics every `period` and appends to the store.
class Sampler {
 public:
  Sampler(MetricsSource source, std::function<double()> clock, SampleStore& store,
          std::chrono::milliseconds period);
  ~Sampler();
  Sampler(const Sampler&) = delete;
  Sampler& operator=(const Sampler&) = delete;

 private:
  std::jthread thread_;
};

}  // namespace flexi::telemetry
