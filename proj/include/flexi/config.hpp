#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flexi/gateway.hpp"
#include "flexi/registry.hpp"
#include "flexi/sim.hpp"

namespace flexi {

/// Schema violation; `pointer()` is the JSON pointer of the offending value.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string pointer, const std::string& message)
      : std::runtime_error((pointer.empty() ? std::string("/") : pointer) + ": " + message),
        pointer_(std::move(pointer)) {}
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

struct SimModelConfig {
  std::string name;
  std::optional<double> mem_footprint_gb;  // defaults to the registry card
  int instances = 1;
  int parallel = 1;
  double cold_load_s = 0;
  std::optional<double> throughput_tps;    // overrides the registry card
  std::optional<long> context_length;
};

struct SimConfig {
  std::vector<sim::GpuSpec> gpus;
  std::vector<SimModelConfig> models;
  double speedup = 1.0;
  std::uint64_t seed = 0;
  double output_tokens_mean = 500;
  double output_jitter = 0.1;
};

struct BackendConfig {
  std::string id;
  std::optional<SimConfig> simulator;
  std::optional<std::string> url;
  std::set<std::string> models;  // for url backends
  double time_scale = 1.0;
};

struct ServerConfig {
  std::string listen = "127.0.0.1:8080";
  double timeout_s = gateway::kDefaultTimeoutS;
  bool log_content = false;
};

struct TelemetryConfig {
  double sample_period_s = 60;
  double price_per_kwh = 0.30;
  double co2_g_per_kwh = 380;
  std::string store_path;
};

struct Config {
  ServerConfig server;
  std::vector<BackendConfig> backends;
  std::vector<ModelCard> registry;
  std::vector<gateway::Role> roles;
  std::vector<gateway::KeyEntry> keys;
  std::vector<gateway::PromptTemplate> templates;
  TelemetryConfig telemetry;
};

inline constexpr const char* kConfigEnv = "FLEXI_CONFIG";

Config parse_config(const nlohmann::json& doc);
SimConfig parse_sim_config(const nlohmann::json& doc, const std::string& pointer = "");
/// Reads `path`, or $FLEXI_CONFIG when set. Throws ConfigError.
Config load_config(const std::string& path);
std::string resolve_config_path(const std::string& path);

Registry make_registry(const Config& config);

/// Cards for each configured model, preloaded in configuration order.
sim::SimServer build_sim_server(const SimConfig& config, const Registry& registry);

struct Runtime {
  std::shared_ptr<Registry> registry;
  std::shared_ptr<gateway::AccessControl> access;
  std::shared_ptr<gateway::TemplateStore> templates;
  std::vector<std::shared_ptr<gateway::Backend>> backends;
  std::unique_ptr<gateway::Gateway> gateway;
};

Runtime build_runtime(const Config& config);

}  // namespace flexi
