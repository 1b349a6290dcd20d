#include "flexi/telemetry.hpp"

#include <charconv>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <stdexcept>

namespace flexi::telemetry {

double MetricsSample::total_power_w() const {
  double sum = 0;
  for (const auto& g : gpus) sum += g.power_w;
  return sum;
}

void to_json(nlohmann::json& j, const MetricsSample& s) {
  j = {{"timestamp", s.timestamp}, {"stale", s.stale}};
  if (s.stale) return;
  j["gpus"] = nlohmann::json::array();
  for (const auto& g : s.gpus) {
    j["gpus"].push_back({{"id", g.id},
                         {"mem_used_mb", g.mem_used_mb},
                         {"mem_total_mb", g.mem_total_mb},
                         {"util_pct", g.util_pct},
                         {"power_w", g.power_w}});
  }
  j["loaded_models"] = s.loaded_models;
  j["outstanding_requests"] = s.outstanding_requests;
}

void from_json(const nlohmann::json& j, MetricsSample& s) {
  s = {};
  s.timestamp = j.at("timestamp").get<double>();
  s.stale = j.value("stale", false);
  if (s.stale) return;
  for (const auto& g : j.at("gpus")) {
    s.gpus.push_back({g.at("id").get<int>(), g.at("mem_used_mb").get<long>(),
                      g.at("mem_total_mb").get<long>(), g.at("util_pct").get<int>(),
                      g.at("power_w").get<double>()});
  }
  s.loaded_models = j.value("loaded_models", std::vector<std::string>{});
  s.outstanding_requests = j.value("outstanding_requests", 0L);
}

MetricsSample sample_metrics(const MetricsSource& source, double t) {
  std::optional<MetricsSample> got;
  try {
    if (source) got = source(t);
  } catch (const std::exception&) {
    got.reset();
  }
  if (!got) {
    MetricsSample stale;
    stale.timestamp = t;
    stale.stale = true;
    return stale;
  }
  got->timestamp = t;
  return *got;
}

MetricsSample snapshot(const sim::SimServer& server) {
  MetricsSample s;
  s.timestamp = server.clock();
  for (const auto& g : server.pool().gpus()) {
    const bool busy = server.gpu_busy(g.id);
    s.gpus.push_back({g.id, std::lround(server.pool().reserved_gb(g.id) * 1024.0),
                      std::lround(g.vram_gb * 1024.0), busy ? 100 : 0,
                      g.idle_power_w + (busy ? g.max_power_w - g.idle_power_w : 0.0)});
  }
  s.loaded_models = server.loaded_models();
  s.outstanding_requests = static_cast<long>(server.jobs_in_system());
  return s;
}

MetricsSource sim_source(sim::SimServer& server) {
  return [&server](double t) -> std::optional<MetricsSample> {
    if (t > server.clock()) server.run_until(t);
    return snapshot(server);
  };
}

double integrate_energy(const std::vector<MetricsSample>& samples, Window window) {
  std::vector<const MetricsSample*> inside;
  for (const auto& s : samples) {
    if (!s.stale && s.timestamp >= window.t0 && s.timestamp <= window.t1) inside.push_back(&s);
  }
  if (inside.size() < 2) {
    throw std::invalid_argument("integrate_energy: need at least two samples in the window");
  }
  double joules = 0;
  for (std::size_t i = 1; i < inside.size(); ++i) {
    const double dt = inside[i]->timestamp - inside[i - 1]->timestamp;
    if (!(dt > 0)) throw std::invalid_argument("integrate_energy: timestamps must increase");
    joules += 0.5 * (inside[i]->total_power_w() + inside[i - 1]->total_power_w()) * dt;
  }
  return joules / kJoulesPerKwh;
}

void to_json(nlohmann::json& j, const EnergyReport& r) {
  j = {{"energy_kwh", r.energy_kwh},
       {"cost", r.cost},
       {"co2_kg", r.co2_kg},
       {"price_per_kwh", r.price_per_kwh},
       {"intensity_g_per_kwh", r.intensity_g_per_kwh}};
  if (r.window) j["window"] = {r.window->t0, r.window->t1};
  if (r.avg_daily_kwh) j["avg_daily_kwh"] = *r.avg_daily_kwh;
}

EnergyReport cost_report(double energy_kwh, double price_per_kwh, double co2_g_per_kwh,
                         bool annualize, std::optional<Window> window) {
  if (!(energy_kwh >= 0)) throw ValidationError("energy_kwh", "must be >= 0");
  if (!(price_per_kwh >= 0)) throw ValidationError("price_per_kwh", "must be >= 0");
  if (!(co2_g_per_kwh >= 0)) throw ValidationError("co2_g_per_kwh", "must be >= 0");
  EnergyReport r;
  r.price_per_kwh = price_per_kwh;
  r.intensity_g_per_kwh = co2_g_per_kwh;
  if (annualize) {
    r.avg_daily_kwh = energy_kwh;
    r.energy_kwh = energy_kwh * 365.0;
    r.window = Window{0, 365.0 * 86400.0};
  } else {
    r.energy_kwh = energy_kwh;
    r.window = window;
    if (window && window->t1 > window->t0) {
      r.avg_daily_kwh = energy_kwh / ((window->t1 - window->t0) / 86400.0);
    }
  }
  r.cost = r.energy_kwh * price_per_kwh;
  r.co2_kg = r.energy_kwh * co2_g_per_kwh / 1000.0;
  return r;
}

std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) return std::to_string(v);
  return std::string(buf, end);
}

std::vector<std::string> export_lines(const MetricsSample& sample) {
  if (sample.stale) return {"2 flexi_server - SOURCE STALE"};
  std::vector<std::string> lines;
  for (const auto& g : sample.gpus) {
    const auto id = std::to_string(g.id);
    lines.push_back("0 flexi_gpu" + id + " mem_used_mb=" + std::to_string(g.mem_used_mb) +
                    "|util_pct=" + std::to_string(g.util_pct) +
                    "|power_w=" + format_number(g.power_w) + " GPU " + id + " OK");
  }
  lines.push_back("0 flexi_server outstanding=" + std::to_string(sample.outstanding_requests) +
                  "|models=" + std::to_string(sample.loaded_models.size()) + " SERVER OK");
  return lines;
}

SampleStore::SampleStore(std::string path) : path_(std::move(path)) {}

void SampleStore::append(const MetricsSample& s) {
  std::lock_guard lock(mutex_);
  samples_.push_back(s);
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    out << nlohmann::json(s).dump() << '\n';
  }
}

std::optional<MetricsSample> SampleStore::latest() const {
  std::lock_guard lock(mutex_);
  if (samples_.empty()) return std::nullopt;
  return samples_.back();
}

std::vector<MetricsSample> SampleStore::all() const {
  std::lock_guard lock(mutex_);
  return samples_;
}

std::vector<MetricsSample> SampleStore::load_ndjson(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open sample store " + path);
  std::vector<MetricsSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<MetricsSample>());
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

Sampler::Sampler(MetricsSource source, std::function<double()> clock, SampleStore& store,
                 std::chrono::milliseconds period) {
  thread_ = std::jthread([source = std::move(source), clock = std::move(clock), &store,
                          period](std::stop_token stop) {
    std::mutex m;
    std::condition_variable_any cv;
    std::unique_lock lock(m);
    while (!stop.stop_requested()) {
      store.append(sample_metrics(source, clock()));
      cv.wait_for(lock, stop, period, [] { return false; });
    }
  });
}

Sampler::~Sampler() { thread_.request_stop(); }

}  // namespace flexi::telemetry
