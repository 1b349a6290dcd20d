#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flexi/realtime.hpp"
#include "flexi/sim.hpp"

namespace flexi::loadtest {

struct Prompt {
  std::string label;
  std::string text;
};

/// The five concurrency-test prompts.
std::vector<Prompt> default_prompts();
/// JSON list of {"label", "text"}.
std::vector<Prompt> load_prompts(const std::string& path);

struct LoadTestPlan {
  std::string endpoint;
  std::vector<std::string> models;
  std::vector<Prompt> prompts;
  std::vector<int> concurrency_levels{1, 10, 30};
  double timeout_s = 300;
  int repetitions = 3;
  std::uint64_t seed = 42;
  long max_tokens = 1024;

  void validate() const;
};

struct LatencyStats {
  double mean = 0;
  double std = 0;
  int timeout_count = 0;
};

/// Clamps every sample to `timeout`, then mean and sample std (n-1; 0 for
/// n = 1). Samples at or above the timeout count as timeouts.
LatencyStats latency_stats(std::span<const double> samples, double timeout);

struct LatencyCell {
  std::string model;
  std::string prompt;  // label
  int concurrency = 1;
  double mean = 0;
  double std = 0;
  int timeout_count = 0;
  int n = 0;
  int transport_errors = 0;
};

struct LoadTestReport {
  LoadTestPlan plan;
  std::vector<LatencyCell> cells;
  double wall_clock_s = 0;

  const LatencyCell* find(const std::string& model, const std::string& prompt,
                          int concurrency) const;
};

void to_json(nlohmann::json& j, const LoadTestPlan& p);
void to_json(nlohmann::json& j, const LatencyCell& c);
void to_json(nlohmann::json& j, const LoadTestReport& r);

struct RequestSample {
  double latency_s = 0;
  long completion_tokens = 0;
  bool timed_out = false;
  bool transport_error = false;
};

/// Something a load test can fire requests at.
class LoadTarget {
 public:
  virtual ~LoadTarget() = default;
  /// Throws std::runtime_error when the target cannot be reached.
  virtual void check_reachable() = 0;
  /// Issues `concurrency` requests at the same instant and waits for all.
  virtual std::vector<RequestSample> fire(const std::string& model, const std::string& prompt,
                                          int concurrency, double timeout_s, long max_tokens) = 0;
};

/// In-process simulator on a virtual clock; fully deterministic per seed.
class SimTarget : public LoadTarget {
 public:
  SimTarget(sim::SimServer server, std::uint64_t seed, double output_mean = 500,
            double output_jitter = 0.1);

  void check_reachable() override {}
  std::vector<RequestSample> fire(const std::string& model, const std::string& prompt,
                                  int concurrency, double timeout_s, long max_tokens) override;

  sim::SimServer& server() { return server_; }

 private:
  sim::SimServer server_;
  sim::OutputLength lengths_;
};

/// Remote endpoint speaking POST /api/chat; one thread and connection per
/// in-flight request. Latency is the server-reported total_duration_s.
class HttpTarget : public LoadTarget {
 public:
  /// `time_scale`: server seconds per wall second (a simulator's speedup).
  HttpTarget(std::string base_url, std::optional<std::string> api_key = std::nullopt,
             double time_scale = 1.0);

  void check_reachable() override;
  std::vector<RequestSample> fire(const std::string& model, const std::string& prompt,
                                  int concurrency, double timeout_s, long max_tokens) override;

 private:
  std::string base_url_;
  std::optional<std::string> api_key_;
  double time_scale_;
};

LoadTestReport run_plan(const LoadTestPlan& plan, LoadTarget& target);

/// Sequential single requests until `duration_s` of target time is used;
/// sum(completion_tokens) / sum(latency). Throws when none completes.
double measure_throughput(LoadTarget& target, const std::string& model, const std::string& prompt,
                          double duration_s, long max_tokens = 1024);

enum class ReportFormat { Markdown, Csv, Json };
std::optional<ReportFormat> parse_format(std::string_view name);
std::string render_report(const LoadTestReport& report, ReportFormat format);

/// "4", "0.7", "283.33": up to two decimals without trailing zeros.
std::string format_seconds(double v);

}  // namespace flexi::loadtest
