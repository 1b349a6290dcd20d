#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "flexi/config.hpp"
#include "flexi/registry.hpp"
#include "flexi/telemetry.hpp"

namespace flexi::testing {

inline std::string source_path(const std::string& rel) {
  return std::string(FLEXI_SOURCE_DIR) + "/" + rel;
}

inline Config server_b_config() { return load_config(source_path("configs/server-b.json")); }
inline Config server_a_config() { return load_config(source_path("configs/server-a.json")); }

inline ModelCard card(const std::string& name, double tps, double mem_gb = 1.0,
                      long context = 8192) {
  ModelCard c;
  c.name = name;
  c.param_count_b = 7;
  c.context_length = context;
  c.license = "MIT";
  c.mem_footprint_gb = mem_gb;
  c.throughput_tps = tps;
  for (auto k : kAllBenchmarks) c.scores[k] = 0.5;
  return c;
}

inline BenchmarkScores scores(std::initializer_list<double> values) {
  BenchmarkScores s;
  auto it = values.begin();
  for (auto k : kAllBenchmarks) {
    if (it == values.end()) break;
    s[k] = *it++;
  }
  return s;
}

/// Published two-decimal averages of the benchmark table.
inline const std::map<std::string, double>& published_averages() {
  static const std::map<std::string, double> table{
      {"command-r+", 0.75}, {"dbrx", 0.75},    {"gemma", 0.69},   {"llama3", 0.79},
      {"llava", 0.52},      {"mistral", 0.77}, {"mixtral", 0.79}, {"phi3", 0.74},
  };
  return table;
}

// ------------------------------------------------------------ stats oracle

struct StatsOracle {
  double mean = 0;
  double std = 0;
  int timeouts = 0;
};

/// Clamp, then two-pass mean and n-1 standard deviation.
inline StatsOracle direct_stats(const std::vector<double>& raw, double timeout) {
  std::vector<double> x;
  StatsOracle r;
  for (double v : raw) {
    if (v >= timeout) ++r.timeouts;
    x.push_back(std::min(v, timeout));
  }
  double sum = 0;
  for (double v : x) sum += v;
  r.mean = sum / static_cast<double>(x.size());
  if (x.size() > 1) {
    double ss = 0;
    for (double v : x) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(x.size() - 1));
  }
  return r;
}

inline bool close_rel(double a, double b, double rel) {
  const double scale = std::max({std::fabs(a), std::fabs(b), 1e-300});
  return std::fabs(a - b) <= rel * scale || (a == 0 && b == 0);
}

// ------------------------------------------------------ FIFO brute force

struct OracleJob {
  double submit = 0;
  double service = 0;
};

/// Naive FIFO re-simulation of `instances` single-slot servers. Arrivals go
/// to the instance with the fewest jobs in system at that instant (ties:
/// lowest index); jobs finishing at exactly the arrival time have left.
/// Each step rescans every job to find the next event. Jobs must be sorted
/// by submit time.
inline std::vector<double> fifo_oracle(const std::vector<OracleJob>& jobs, int instances) {
  const std::size_t n = jobs.size();
  std::vector<int> where(n, -1);
  std::vector<std::optional<double>> start(n), finish(n);
  std::size_t arrived = 0;
  double now = 0;
  while (true) {
    // Next completion among running jobs.
    std::optional<double> next_finish;
    for (std::size_t j = 0; j < n; ++j) {
      if (start[j] && !finish[j]) {
        const double f = *start[j] + jobs[j].service;
        if (!next_finish || f < *next_finish) next_finish = f;
      }
    }
    const bool have_arrival = arrived < n;
    if (!next_finish && !have_arrival) break;
    if (next_finish && (!have_arrival || *next_finish <= jobs[arrived].submit)) {
      now = *next_finish;
      for (std::size_t j = 0; j < n; ++j) {
        if (start[j] && !finish[j] && *start[j] + jobs[j].service == now) finish[j] = now;
      }
    } else {
      now = jobs[arrived].submit;
      int best = 0;
      long best_count = std::numeric_limits<long>::max();
      for (int i = 0; i < instances; ++i) {
        long count = 0;
        for (std::size_t j = 0; j < arrived; ++j) {
          if (where[j] == i && !finish[j]) ++count;
        }
        if (count < best_count) {
          best_count = count;
          best = i;
        }
      }
      where[arrived] = best;
      ++arrived;
    }
    // Start the oldest waiting job on every idle instance.
    for (int i = 0; i < instances; ++i) {
      bool busy = false;
      for (std::size_t j = 0; j < arrived; ++j) {
        if (where[j] == i && start[j] && !finish[j]) busy = true;
      }
      if (busy) continue;
      for (std::size_t j = 0; j < arrived; ++j) {
        if (where[j] == i && !start[j]) {
          start[j] = now;
          break;
        }
      }
    }
  }
  std::vector<double> out;
  for (auto& f : finish) out.push_back(*f);
  return out;
}

// -------------------------------------------------------- line parser

struct ParsedGpuLine {
  int id = -1;
  long mem_used_mb = 0;
  int util_pct = 0;
  double power_w = 0;
};

struct ParsedLines {
  std::vector<ParsedGpuLine> gpus;
  std::optional<long> outstanding;
  std::optional<long> models;
  bool stale = false;
  bool ok = true;
};

/// Reads the local-check dialect back: "<status> <service> <k=v|k=v|-> <text>".
inline ParsedLines parse_lines(const std::vector<std::string>& lines) {
  ParsedLines out;
  for (const auto& line : lines) {
    std::istringstream in(line);
    int status = -1;
    std::string service, perf;
    if (!(in >> status >> service >> perf)) {
      out.ok = false;
      continue;
    }
    if (status == 2) {
      out.stale = true;
      continue;
    }
    std::map<std::string, std::string> kv;
    std::istringstream fields(perf);
    std::string item;
    while (std::getline(fields, item, '|')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) {
        out.ok = false;
        continue;
      }
      kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    if (service.rfind("flexi_gpu", 0) == 0) {
      ParsedGpuLine g;
      g.id = std::stoi(service.substr(9));
      g.mem_used_mb = std::stol(kv.at("mem_used_mb"));
      g.util_pct = std::stoi(kv.at("util_pct"));
      g.power_w = std::strtod(kv.at("power_w").c_str(), nullptr);
      out.gpus.push_back(g);
    } else if (service == "flexi_server") {
      out.outstanding = std::stol(kv.at("outstanding"));
      out.models = std::stol(kv.at("models"));
    } else {
      out.ok = false;
    }
  }
  return out;
}

inline telemetry::MetricsSample random_sample(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> ngpu(1, 8), util(0, 100), nmodels(0, 6);
  std::uniform_int_distribution<long> mem(0, 48 * 1024), outstanding(0, 500);
  std::uniform_real_distribution<double> power(0.0, 400.0);
  telemetry::MetricsSample s;
  s.timestamp = std::uniform_real_distribution<double>(0, 1e6)(rng);
  const int n = ngpu(rng);
  for (int i = 0; i < n; ++i) {
    telemetry::GpuMetrics g;
    g.id = i;
    g.mem_total_mb = 48 * 1024;
    g.mem_used_mb = mem(rng);
    g.util_pct = util(rng);
    // Mix of round and arbitrary doubles.
    g.power_w = (rng() % 3 == 0) ? std::round(power(rng)) : power(rng);
    s.gpus.push_back(g);
  }
  const int m = nmodels(rng);
  for (int i = 0; i < m; ++i) s.loaded_models.push_back("model" + std::to_string(i));
  s.outstanding_requests = outstanding(rng);
  return s;
}

/// Constant-power trace sampled every `step` seconds over [0, duration].
inline std::vector<telemetry::MetricsSample> constant_trace(double watts, double duration,
                                                             double step) {
  std::vector<telemetry::MetricsSample> out;
  const long n = static_cast<long>(std::llround(duration / step));
  for (long i = 0; i <= n; ++i) {
    telemetry::MetricsSample s;
    s.timestamp = static_cast<double>(i) * step;
    telemetry::GpuMetrics g;
    g.power_w = watts;
    s.gpus.push_back(g);
    out.push_back(s);
  }
  return out;
}

}  // namespace flexi::testing
