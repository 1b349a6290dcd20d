#include "flexi/gateway.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <regex>
#include <sstream>

namespace flexi::gateway {

nlohmann::json error_body(const ApiError& e) {
  return {{"error", {{"code", e.code()}, {"message", e.what()}}}};
}

namespace {

ApiError bad_request(const std::string& msg) { return ApiError(400, "invalid_request", msg); }

double steady_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

double wall_seconds() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

}  // namespace

// ---------------------------------------------------------------- access

void Role::validate() const {
  if (name.empty()) throw ValidationError("name", "role name must be non-empty");
  if (max_concurrent <= 0) throw ValidationError("max_concurrent", "must be > 0");
  if (rate_limit <= 0) throw ValidationError("rate_limit", "must be > 0");
}

bool Role::permits(std::string_view model) const {
  if (model_allowlist.count("*")) return true;
  return model_allowlist.count(lowercase(model)) > 0;
}

Admission::Admission(Admission&& other) noexcept
    : owner_(std::exchange(other.owner_, nullptr)), key_id_(std::move(other.key_id_)) {}

Admission& Admission::operator=(Admission&& other) noexcept {
  if (this != &other) {
    if (owner_) owner_->release(key_id_);
    owner_ = std::exchange(other.owner_, nullptr);
    key_id_ = std::move(other.key_id_);
  }
  return *this;
}

Admission::~Admission() {
  if (owner_) owner_->release(key_id_);
}

AccessControl::AccessControl(Clock clock) : clock_(clock ? std::move(clock) : steady_seconds) {}

void AccessControl::put_role(Role role) {
  role.validate();
  std::set<std::string> normalized;
  for (const auto& m : role.model_allowlist) normalized.insert(m == "*" ? m : lowercase(m));
  role.model_allowlist = std::move(normalized);
  std::lock_guard lock(mutex_);
  roles_.insert_or_assign(role.name, std::move(role));
}

void AccessControl::put_key(KeyEntry key) {
  if (key.key_id.empty()) throw ValidationError("key_id", "must be non-empty");
  std::lock_guard lock(mutex_);
  if (!roles_.count(key.role)) {
    throw ValidationError("role", "unknown role '" + key.role + "' for key '" + key.key_id + "'");
  }
  keys_.insert_or_assign(key.key_id, std::move(key));
}

std::optional<Role> AccessControl::role(const std::string& name) const {
  std::lock_guard lock(mutex_);
  auto it = roles_.find(name);
  if (it == roles_.end()) return std::nullopt;
  return it->second;
}

std::vector<KeyEntry> AccessControl::keys() const {
  std::lock_guard lock(mutex_);
  std::vector<KeyEntry> out;
  for (const auto& [_, k] : keys_) out.push_back(k);
  return out;
}

Principal AccessControl::authenticate(const std::optional<std::string>& auth_header) const {
  if (!auth_header || auth_header->empty()) {
    throw ApiError(401, "unauthorized", "missing credentials");
  }
  constexpr std::string_view prefix = "Bearer ";
  if (auth_header->rfind(prefix, 0) != 0) {
    throw ApiError(401, "unauthorized", "malformed authorization header");
  }
  auto token = auth_header->substr(prefix.size());
  while (!token.empty() && token.back() == ' ') token.pop_back();
  std::lock_guard lock(mutex_);
  auto it = keys_.find(token);
  if (it == keys_.end()) throw ApiError(401, "unauthorized", "unknown key");
  if (it->second.revoked) throw ApiError(401, "unauthorized", "revoked");
  return {it->second.key_id, it->second.role, it->second.display_name};
}

Decision AccessControl::check_locked(const Principal& p, std::string_view model,
                                     double now) const {
  auto role = roles_.find(p.role);
  if (role == roles_.end()) return Decision::deny(403, "unknown role");
  if (!role->second.permits(model)) return Decision::deny(403, "model not permitted");
  auto flight = in_flight_.find(p.key_id);
  if (flight != in_flight_.end() && flight->second >= role->second.max_concurrent) {
    return Decision::deny(429, "concurrency limit");
  }
  auto window = windows_.find(p.key_id);
  const long index = static_cast<long>(std::floor(now / 60.0));
  if (window != windows_.end() && window->second.index == index &&
      window->second.count >= role->second.rate_limit) {
    return Decision::deny(429, "rate limit");
  }
  return Decision::allow();
}

Decision AccessControl::authorize(const Principal& p, std::string_view model) const {
  const double now = clock_();
  std::lock_guard lock(mutex_);
  return check_locked(p, model, now);
}

std::optional<Admission> AccessControl::admit(const Principal& p, std::string_view model,
                                              Decision& decision) {
  const double now = clock_();
  std::lock_guard lock(mutex_);
  decision = check_locked(p, model, now);
  if (!decision.allowed) return std::nullopt;
  ++in_flight_[p.key_id];
  auto& w = windows_[p.key_id];
  const long index = static_cast<long>(std::floor(now / 60.0));
  if (w.index != index) w = {index, 0};
  ++w.count;
  return Admission(this, p.key_id);
}

int AccessControl::in_flight(const std::string& key_id) const {
  std::lock_guard lock(mutex_);
  auto it = in_flight_.find(key_id);
  return it == in_flight_.end() ? 0 : it->second;
}

void AccessControl::release(const std::string& key_id) {
  std::lock_guard lock(mutex_);
  auto it = in_flight_.find(key_id);
  if (it != in_flight_.end() && --it->second <= 0) in_flight_.erase(it);
}

// ------------------------------------------------------------- templates

namespace {

const std::regex& placeholder_re() {
  static const std::regex re(R"(\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\})");
  return re;
}

std::size_t count_open_delims(const std::string& s) {
  std::size_t n = 0;
  for (auto pos = s.find("{{"); pos != std::string::npos; pos = s.find("{{", pos + 2)) ++n;
  return n;
}

}  // namespace

std::vector<std::string> PromptTemplate::placeholders() const {
  std::vector<std::string> names;
  for (std::sregex_iterator it(body.begin(), body.end(), placeholder_re()), end; it != end; ++it) {
    auto name = (*it)[1].str();
    if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
  }
  return names;
}

void PromptTemplate::validate() const {
  if (id.empty()) throw ValidationError("id", "template id must be non-empty");
  const auto matches = static_cast<std::size_t>(
      std::distance(std::sregex_iterator(body.begin(), body.end(), placeholder_re()),
                    std::sregex_iterator()));
  if (count_open_delims(body) != matches) {
    throw ValidationError("body", "contains a malformed placeholder");
  }
  for (const auto& name : placeholders()) {
    if (!required_params.count(name) && !defaults.count(name)) {
      throw ValidationError("body", "placeholder '" + name + "' is neither required nor defaulted");
    }
  }
}

std::string render_template(const PromptTemplate& t,
                            const std::map<std::string, std::string>& params) {
  for (const auto& [name, value] : params) {
    if (!t.required_params.count(name) && !t.defaults.count(name)) {
      throw bad_request("extraneous template parameter '" + name + "'");
    }
    if (value.find("{{") != std::string::npos) {
      throw bad_request("template parameter '" + name + "' contains '{{'");
    }
  }
  for (const auto& name : t.required_params) {
    if (!params.count(name) && !t.defaults.count(name)) {
      throw bad_request("missing template parameter '" + name + "'");
    }
  }
  std::string out;
  auto last = t.body.cbegin();
  for (std::sregex_iterator it(t.body.begin(), t.body.end(), placeholder_re()), end; it != end;
       ++it) {
    const auto& m = *it;
    out.append(last, m[0].first);
    const auto name = m[1].str();
    auto p = params.find(name);
    out += p != params.end() ? p->second : t.defaults.at(name);
    last = m[0].second;
  }
  out.append(last, t.body.cend());
  return out;
}

void TemplateStore::put(PromptTemplate t) {
  t.validate();
  std::lock_guard lock(mutex_);
  templates_.insert_or_assign(t.id, std::move(t));
}

std::optional<PromptTemplate> TemplateStore::get(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = templates_.find(id);
  if (it == templates_.end()) return std::nullopt;
  return it->second;
}

std::string TemplateStore::render(const std::string& id,
                                  const std::map<std::string, std::string>& params) const {
  auto t = get(id);
  if (!t) throw ApiError(404, "template_not_found", "unknown template '" + id + "'");
  return render_template(*t, params);
}

// -------------------------------------------------------------- requests

void to_json(nlohmann::json& j, const ChatRequest& r) {
  j = nlohmann::json{{"model", r.model}, {"messages", nlohmann::json::array()}};
  for (const auto& m : r.messages) j["messages"].push_back({{"role", m.role}, {"content", m.content}});
  nlohmann::json opts = nlohmann::json::object();
  if (r.options.temperature) opts["temperature"] = *r.options.temperature;
  if (r.options.max_tokens) opts["max_tokens"] = *r.options.max_tokens;
  if (r.options.seed) opts["seed"] = *r.options.seed;
  j["options"] = opts;
  if (r.template_id) {
    j["template_id"] = *r.template_id;
    j["template_params"] = r.template_params;
  }
}

ChatRequest parse_chat_request(const nlohmann::json& j) {
  if (!j.is_object()) throw bad_request("request body must be a JSON object");
  ChatRequest r;
  auto model = j.find("model");
  if (model == j.end() || !model->is_string()) throw bad_request("'model' must be a string");
  r.model = model->get<std::string>();
  if (auto msgs = j.find("messages"); msgs != j.end() && !msgs->is_null()) {
    if (!msgs->is_array()) throw bad_request("'messages' must be an array");
    for (std::size_t i = 0; i < msgs->size(); ++i) {
      const auto& m = (*msgs)[i];
      const auto where = "messages[" + std::to_string(i) + "]";
      if (!m.is_object() || !m.contains("role") || !m["role"].is_string() ||
          !m.contains("content") || !m["content"].is_string()) {
        throw bad_request(where + " needs string 'role' and 'content'");
      }
      r.messages.push_back({m["role"].get<std::string>(), m["content"].get<std::string>()});
    }
  }
  if (auto opts = j.find("options"); opts != j.end() && !opts->is_null()) {
    if (!opts->is_object()) throw bad_request("'options' must be an object");
    if (auto t = opts->find("temperature"); t != opts->end() && !t->is_null()) {
      if (!t->is_number()) throw bad_request("'options.temperature' must be a number");
      r.options.temperature = t->get<double>();
    }
    if (auto m = opts->find("max_tokens"); m != opts->end() && !m->is_null()) {
      if (!m->is_number_integer()) throw bad_request("'options.max_tokens' must be an integer");
      r.options.max_tokens = m->get<long>();
    }
    if (auto s = opts->find("seed"); s != opts->end() && !s->is_null()) {
      if (!s->is_number_integer()) throw bad_request("'options.seed' must be an integer");
      r.options.seed = s->get<long>();
    }
  }
  if (auto t = j.find("template_id"); t != j.end() && !t->is_null()) {
    if (!t->is_string()) throw bad_request("'template_id' must be a string");
    r.template_id = t->get<std::string>();
  }
  if (auto p = j.find("template_params"); p != j.end() && !p->is_null()) {
    if (!p->is_object()) throw bad_request("'template_params' must be an object");
    for (const auto& [k, v] : p->items()) {
      if (!v.is_string()) throw bad_request("template parameter '" + k + "' must be a string");
      r.template_params[k] = v.get<std::string>();
    }
  }
  return r;
}

void to_json(nlohmann::json& j, const ChatResponse& r) {
  j = {{"model", r.model},
       {"message", {{"role", r.message.role}, {"content", r.message.content}}},
       {"prompt_tokens", r.prompt_tokens},
       {"completion_tokens", r.completion_tokens},
       {"total_duration_s", r.total_duration_s},
       {"timed_out", r.timed_out}};
}

void from_json(const nlohmann::json& j, ChatResponse& r) {
  r.model = j.at("model").get<std::string>();
  r.message.role = j.at("message").at("role").get<std::string>();
  r.message.content = j.at("message").at("content").get<std::string>();
  r.prompt_tokens = j.at("prompt_tokens").get<long>();
  r.completion_tokens = j.at("completion_tokens").get<long>();
  r.total_duration_s = j.at("total_duration_s").get<double>();
  r.timed_out = j.at("timed_out").get<bool>();
}

long estimate_tokens(std::string_view text) {
  long n = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

long estimate_tokens(const std::vector<Message>& messages) {
  long n = 0;
  for (const auto& m : messages) n += estimate_tokens(m.content);
  return n;
}

ChatRequest validate_request(ChatRequest raw, const Registry& registry) {
  if (raw.model.empty()) throw bad_request("'model' must be non-empty");
  if (raw.messages.empty()) throw bad_request("'messages' must be non-empty");
  for (const auto& m : raw.messages) {
    if (m.role != "system" && m.role != "user" && m.role != "assistant") {
      throw bad_request("unsupported message role '" + m.role + "'");
    }
  }
  auto& opts = raw.options;
  if (opts.temperature && std::isnan(*opts.temperature)) throw bad_request("temperature is NaN");
  opts.temperature = std::clamp(opts.temperature.value_or(kDefaultTemperature), 0.0, 2.0);
  if (opts.max_tokens && *opts.max_tokens <= 0) throw bad_request("'max_tokens' must be positive");
  opts.max_tokens = opts.max_tokens.value_or(kDefaultMaxTokens);

  auto card = registry.find(raw.model);
  if (!card) throw ApiError(404, "model_not_found", "unknown model '" + raw.model + "'");
  raw.model = lowercase(card->name);
  const long prompt = estimate_tokens(raw.messages);
  if (prompt > card->context_length) {
    throw ApiError(400, "context_length_exceeded",
                   "prompt has " + std::to_string(prompt) + " tokens; context_length of " +
                       card->name + " is " + std::to_string(card->context_length));
  }
  return raw;
}

// --------------------------------------------------------------- routing

std::string route(std::string_view model, const std::vector<BackendHandle>& backends) {
  const auto key = lowercase(model);
  const BackendHandle* best = nullptr;
  for (const auto& b : backends) {
    if (!b.models_served.count(key)) continue;
    if (!best || b.outstanding < best->outstanding ||
        (b.outstanding == best->outstanding && b.id < best->id)) {
      best = &b;
    }
  }
  if (!best) throw ApiError(503, "no_backend", "no backend serves model '" + std::string(model) + "'");
  return best->id;
}

void to_json(nlohmann::json& j, const UsageRecord& r) {
  j = {{"timestamp", r.timestamp},         {"key_id", r.key_id},
       {"model", r.model},                 {"backend", r.backend},
       {"prompt_tokens", r.prompt_tokens}, {"completion_tokens", r.completion_tokens},
       {"duration_s", r.duration_s},       {"timed_out", r.timed_out}};
  if (r.prompt) j["prompt"] = *r.prompt;
  if (r.completion) j["completion"] = *r.completion;
}

// --------------------------------------------------------------- gateway

Gateway::Gateway(GatewayOptions options, std::shared_ptr<Registry> registry,
                 std::shared_ptr<AccessControl> access, std::shared_ptr<TemplateStore> templates,
                 std::vector<std::shared_ptr<Backend>> backends)
    : options_(options),
      registry_(std::move(registry)),
      access_(std::move(access)),
      templates_(std::move(templates)),
      backends_(std::move(backends)) {
  if (!(options_.timeout_s > 0)) throw std::invalid_argument("gateway timeout must be > 0");
  for (const auto& b : backends_) {
    std::set<std::string> models;
    for (const auto& m : b->models()) models.insert(lowercase(m));
    slots_.push_back({b, std::move(models), std::make_unique<std::atomic<int>>(0)});
  }
}

ChatResponse Gateway::handle_chat(const std::optional<std::string>& auth_header,
                                  ChatRequest request) {
  return handle_chat(access_->authenticate(auth_header), std::move(request));
}

namespace {

struct OutstandingLease {
  std::atomic<int>& counter;
  explicit OutstandingLease(std::atomic<int>& c) : counter(c) { counter.fetch_add(1); }
  ~OutstandingLease() { counter.fetch_sub(1); }
  OutstandingLease(const OutstandingLease&) = delete;
  OutstandingLease& operator=(const OutstandingLease&) = delete;
};

std::string joined_content(const std::vector<Message>& messages) {
  std::string out;
  for (const auto& m : messages) {
    if (!out.empty()) out += '\n';
    out += m.role + ": " + m.content;
  }
  return out;
}

}  // namespace

ChatResponse Gateway::handle_chat(const Principal& principal, ChatRequest request) {
  Decision decision;
  auto admission = access_->admit(principal, request.model, decision);
  if (!admission) {
    throw ApiError(decision.status, decision.status == 429 ? "rate_limited" : "forbidden",
                   decision.reason);
  }

  if (request.template_id) {
    request.messages.push_back(
        {"user", templates_->render(*request.template_id, request.template_params)});
  }
  request = validate_request(std::move(request), *registry_);
  const long prompt_tokens = estimate_tokens(request.messages);

  const auto chosen = route(request.model, snapshot());
  auto slot = std::find_if(slots_.begin(), slots_.end(),
                           [&](const Slot& s) { return s.backend->id() == chosen; });

  BackendReply reply;
  {
    OutstandingLease lease(*slot->outstanding);
    try {
      reply = slot->backend->generate(request, prompt_tokens, options_.timeout_s);
    } catch (const ApiError&) {
      throw;
    } catch (const std::exception& e) {
      throw ApiError(502, "backend_error", std::string("backend '") + chosen + "' failed: " + e.what());
    }
  }

  ChatResponse response;
  response.model = request.model;
  response.prompt_tokens = reply.prompt_tokens;
  response.completion_tokens = reply.completion_tokens;
  response.message = {"assistant", reply.content};
  response.timed_out = reply.timed_out || reply.duration_s > options_.timeout_s;
  response.total_duration_s = response.timed_out ? options_.timeout_s : reply.duration_s;
  if (response.timed_out) response.message.content.clear();

  UsageRecord record;
  record.timestamp = wall_seconds();
  record.key_id = principal.key_id;
  record.model = response.model;
  record.backend = chosen;
  record.prompt_tokens = response.prompt_tokens;
  record.completion_tokens = response.completion_tokens;
  record.duration_s = response.total_duration_s;
  record.timed_out = response.timed_out;
  if (options_.log_content) {
    record.prompt = joined_content(request.messages);
    record.completion = response.message.content;
  }
  {
    std::lock_guard lock(usage_mutex_);
    usage_.push_back(std::move(record));
  }
  return response;
}

std::vector<BackendHandle> Gateway::snapshot() const {
  std::vector<BackendHandle> out;
  out.reserve(slots_.size());
  for (const auto& s : slots_) out.push_back({s.backend->id(), s.models, s.outstanding->load()});
  return out;
}

std::vector<std::string> Gateway::served_models() const {
  std::set<std::string> names;
  for (const auto& s : slots_) {
    for (const auto& m : s.models) {
      if (auto card = registry_->find(m)) names.insert(lowercase(card->name));
    }
  }
  return {names.begin(), names.end()};
}

int Gateway::outstanding(const std::string& backend_id) const {
  for (const auto& s : slots_) {
    if (s.backend->id() == backend_id) return s.outstanding->load();
  }
  throw std::out_of_range("unknown backend " + backend_id);
}

int Gateway::total_outstanding() const {
  int n = 0;
  for (const auto& s : slots_) n += s.outstanding->load();
  return n;
}

std::vector<UsageRecord> Gateway::usage() const {
  std::lock_guard lock(usage_mutex_);
  return usage_;
}

std::vector<std::string> Gateway::endpoints() const {
  std::vector<std::string> out;
  for (const auto& b : backends_) {
    if (auto e = b->endpoint(); !e.empty()) out.push_back(e);
  }
  return out;
}

}  // namespace flexi::gateway
