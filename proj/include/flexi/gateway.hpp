#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "flexi/registry.hpp"

namespace flexi::gateway {

/// Error carrying the HTTP status it maps to.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const noexcept { return status_; }
  const std::string& code() const noexcept { return code_; }

 private:
  int status_;
  std::string code_;
};

nlohmann::json error_body(const ApiError& e);

struct Role {
  std::string name;
  std::set<std::string> model_allowlist;  // lower-case names, or "*"
  int max_concurrent = 1;
  int rate_limit = 60;  // requests per minute

  void validate() const;
  bool permits(std::string_view model) const;
};

struct KeyEntry {
  std::string key_id;
  std::string role;
  std::string display_name;
  bool revoked = false;
};

struct Principal {
  std::string key_id;
  std::string role;
  std::string display_name;
};

struct Decision {
  bool allowed = false;
  int status = 200;
  std::string reason;

  static Decision allow() { return {true, 200, {}}; }
  static Decision deny(int status, std::string reason) { return {false, status, std::move(reason)}; }
};

class AccessControl;

/// Holds one in-flight slot for a principal; releases it on destruction.
class Admission {
 public:
  Admission() = default;
  Admission(AccessControl* owner, std::string key_id)
      : owner_(owner), key_id_(std::move(key_id)) {}
  Admission(Admission&& other) noexcept;
  Admission& operator=(Admission&& other) noexcept;
  Admission(const Admission&) = delete;
  Admission& operator=(const Admission&) = delete;
  ~Admission();

 private:
  AccessControl* owner_ = nullptr;
  std::string key_id_;
};

/// Key table, role table, per-key in-flight counts and fixed-window rate limits.
class AccessControl {
 public:
  using Clock = std::function<double()>;  // seconds

  explicit AccessControl(Clock clock = {});

  void put_role(Role role);
  void put_key(KeyEntry key);
  std::optional<Role> role(const std::string& name) const;
  std::vector<KeyEntry> keys() const;

  /// Resolves "Bearer <key>". Throws ApiError(401).
  Principal authenticate(const std::optional<std::string>& auth_header) const;

  /// Pure check; consumes nothing.
  Decision authorize(const Principal& p, std::string_view model) const;

  /// authorize() plus atomically taking an in-flight slot and a rate-limit token.
  std::optional<Admission> admit(const Principal& p, std::string_view model, Decision& decision);

  int in_flight(const std::string& key_id) const;

 private:
  friend class Admission;
  void release(const std::string& key_id);
  Decision check_locked(const Principal& p, std::string_view model, double now) const;

  mutable std::mutex mutex_;
  Clock clock_;
  std::map<std::string, Role> roles_;
  std::map<std::string, KeyEntry> keys_;
  std::map<std::string, int> in_flight_;
  struct Window {
    long index = -1;
    int count = 0;
  };
  std::map<std::string, Window> windows_;
};

struct PromptTemplate {
  std::string id;
  std::string body;
  std::set<std::string> required_params;
  std::map<std::string, std::string> defaults;

  /// Placeholder names in `body`, in order of first appearance.
  std::vector<std::string> placeholders() const;
  void validate() const;
};

class TemplateStore {
 public:
  void put(PromptTemplate t);
  std::optional<PromptTemplate> get(const std::string& id) const;
  std::string render(const std::string& id, const std::map<std::string, std::string>& params) const;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, PromptTemplate> templates_;
};

std::string render_template(const PromptTemplate& t,
                            const std::map<std::string, std::string>& params);

struct Message {
  std::string role;
  std::string content;
};

struct ChatOptions {
  std::optional<double> temperature;
  std::optional<long> max_tokens;
  std::optional<long> seed;
};

inline constexpr double kDefaultTemperature = 0.8;
inline constexpr long kDefaultMaxTokens = 512;
inline constexpr double kDefaultTimeoutS = 300.0;

struct ChatRequest {
  std::string model;
  std::vector<Message> messages;
  ChatOptions options;
  std::optional<std::string> template_id;
  std::map<std::string, std::string> template_params;
};

struct ChatResponse {
  std::string model;
  Message message{"assistant", {}};
  long prompt_tokens = 0;
  long completion_tokens = 0;
  double total_duration_s = 0;
  bool timed_out = false;
};

void to_json(nlohmann::json& j, const ChatRequest& r);
/// Throws ApiError(400) on malformed bodies.
ChatRequest parse_chat_request(const nlohmann::json& j);
void to_json(nlohmann::json& j, const ChatResponse& r);
void from_json(const nlohmann::json& j, ChatResponse& r);

/// One token per whitespace-separated word over all message contents.
long estimate_tokens(const std::vector<Message>& messages);
long estimate_tokens(std::string_view text);

/// Fills defaults, clamps temperature to [0,2], checks the model against the
/// registry (404) and the prompt against its context length (400).
ChatRequest validate_request(ChatRequest raw, const Registry& registry);

struct BackendReply {
  std::string content;
  long prompt_tokens = 0;
  long completion_tokens = 0;
  double duration_s = 0;
  bool timed_out = false;
};

/// A serving endpoint the gateway can dispatch to.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual const std::string& id() const = 0;
  virtual std::set<std::string> models() const = 0;
  /// Network destination, empty for in-process backends.
  virtual std::string endpoint() const { return {}; }
  /// Runs one request; gives up after `timeout_s` on the backend's clock.
  /// Throws ApiError(502) on backend failure.
  virtual BackendReply generate(const ChatRequest& request, long prompt_tokens,
                                double timeout_s) = 0;
};

struct BackendHandle {
  std::string id;
  std::set<std::string> models_served;
  int outstanding = 0;
};

/// Least outstanding among backends serving `model`; ties go to the smallest id.
/// Throws ApiError(503) when none serves it.
std::string route(std::string_view model, const std::vector<BackendHandle>& backends);

struct UsageRecord {
  double timestamp = 0;
  std::string key_id;
  std::string model;
  std::string backend;
  long prompt_tokens = 0;
  long completion_tokens = 0;
  double duration_s = 0;
  bool timed_out = false;
  std::optional<std::string> prompt;      // only with content logging enabled
  std::optional<std::string> completion;  // likewise
};

void to_json(nlohmann::json& j, const UsageRecord& r);

struct GatewayOptions {
  double timeout_s = kDefaultTimeoutS;
  bool log_content = false;
};

class Gateway {
 public:
  Gateway(GatewayOptions options, std::shared_ptr<Registry> registry,
          std::shared_ptr<AccessControl> access, std::shared_ptr<TemplateStore> templates,
          std::vector<std::shared_ptr<Backend>> backends);

  ChatResponse handle_chat(const std::optional<std::string>& auth_header, ChatRequest request);
  ChatResponse handle_chat(const Principal& principal, ChatRequest request);

  /// Registered models that at least one backend serves.
  std::vector<std::string> served_models() const;
  std::vector<BackendHandle> snapshot() const;
  int outstanding(const std::string& backend_id) const;
  int total_outstanding() const;
  std::vector<UsageRecord> usage() const;
  std::vector<std::string> endpoints() const;

  Registry& registry() { return *registry_; }
  AccessControl& access() { return *access_; }
  TemplateStore& templates() { return *templates_; }
  const GatewayOptions& options() const { return options_; }
  const std::vector<std::shared_ptr<Backend>>& backends() const { return backends_; }

 private:
  struct Slot {
    std::shared_ptr<Backend> backend;
    std::set<std::string> models;
    std::unique_ptr<std::atomic<int>> outstanding;
  };

  GatewayOptions options_;
  std::shared_ptr<Registry> registry_;
  std::shared_ptr<AccessControl> access_;
  std::shared_ptr<TemplateStore> templates_;
  std::vector<std::shared_ptr<Backend>> backends_;
  std::vector<Slot> slots_;
  mutable std::mutex usage_mutex_;
  std::vector<UsageRecord> usage_;
};

}  // namespace flexi::gateway
