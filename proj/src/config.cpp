#include "flexi/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "flexi/backends.hpp"

namespace flexi {

namespace {

using nlohmann::json;

std::string child(const std::string& ptr, const std::string& key) { return ptr + "/" + key; }
std::string child(const std::string& ptr, std::size_t i) { return ptr + "/" + std::to_string(i); }

const json& expect_object(const json& j, const std::string& ptr) {
  if (!j.is_object()) throw ConfigError(ptr, "expected an object");
  return j;
}

const json& expect_array(const json& j, const std::string& ptr) {
  if (!j.is_array()) throw ConfigError(ptr, "expected an array");
  return j;
}

const json* field(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  return it == obj.end() || it->is_null() ? nullptr : &*it;
}

std::string req_string(const json& obj, const std::string& key, const std::string& ptr) {
  const auto* f = field(obj, key);
  if (!f) throw ConfigError(child(ptr, key), "required");
  if (!f->is_string()) throw ConfigError(child(ptr, key), "expected a string");
  return f->get<std::string>();
}

std::optional<std::string> opt_string(const json& obj, const std::string& key,
                                      const std::string& ptr) {
  const auto* f = field(obj, key);
  if (!f) return std::nullopt;
  if (!f->is_string()) throw ConfigError(child(ptr, key), "expected a string");
  return f->get<std::string>();
}

std::optional<double> opt_number(const json& obj, const std::string& key, const std::string& ptr) {
  const auto* f = field(obj, key);
  if (!f) return std::nullopt;
  if (!f->is_number()) throw ConfigError(child(ptr, key), "expected a number");
  return f->get<double>();
}

double req_number(const json& obj, const std::string& key, const std::string& ptr) {
  auto v = opt_number(obj, key, ptr);
  if (!v) throw ConfigError(child(ptr, key), "required");
  return *v;
}

std::optional<long> opt_int(const json& obj, const std::string& key, const std::string& ptr) {
  const auto* f = field(obj, key);
  if (!f) return std::nullopt;
  if (!f->is_number_integer()) throw ConfigError(child(ptr, key), "expected an integer");
  return f->get<long>();
}

void check(bool ok, const std::string& ptr, const std::string& message) {
  if (!ok) throw ConfigError(ptr, message);
}

std::set<std::string> string_set(const json& obj, const std::string& key, const std::string& ptr) {
  std::set<std::string> out;
  const auto* f = field(obj, key);
  if (!f) return out;
  const auto p = child(ptr, key);
  expect_array(*f, p);
  for (std::size_t i = 0; i < f->size(); ++i) {
    check((*f)[i].is_string(), child(p, i), "expected a string");
    out.insert((*f)[i].get<std::string>());
  }
  return out;
}

ModelCard parse_card(const json& j, const std::string& ptr) {
  expect_object(j, ptr);
  ModelCard card;
  try {
    card = j.get<ModelCard>();
    card.validate();
  } catch (const ValidationError& e) {
    auto f = e.field();
    for (auto& c : f) if (c == '.') c = '/';
    throw ConfigError(f.empty() ? ptr : child(ptr, f), e.what());
  }
  return card;
}

}  // namespace

SimConfig parse_sim_config(const json& doc, const std::string& ptr) {
  expect_object(doc, ptr);
  SimConfig sc;
  const auto gpus_ptr = child(ptr, "gpus");
  const auto* gpus = field(doc, "gpus");
  check(gpus != nullptr, gpus_ptr, "required");
  expect_array(*gpus, gpus_ptr);
  check(!gpus->empty(), gpus_ptr, "at least one GPU is required");
  for (std::size_t i = 0; i < gpus->size(); ++i) {
    const auto p = child(gpus_ptr, i);
    const auto& g = expect_object((*gpus)[i], p);
    sim::GpuSpec spec;
    spec.id = static_cast<int>(i);
    spec.vram_gb = req_number(g, "vram_gb", p);
    check(spec.vram_gb > 0, child(p, "vram_gb"), "must be > 0");
    spec.max_power_w = req_number(g, "max_power_w", p);
    spec.idle_power_w = opt_number(g, "idle_power_w", p).value_or(0.0);
    check(spec.idle_power_w >= 0, child(p, "idle_power_w"), "must be >= 0");
    check(spec.max_power_w >= spec.idle_power_w, child(p, "max_power_w"),
          "must be >= idle_power_w");
    sc.gpus.push_back(spec);
  }
  const auto models_ptr = child(ptr, "models");
  if (const auto* models = field(doc, "models")) {
    expect_array(*models, models_ptr);
    for (std::size_t i = 0; i < models->size(); ++i) {
      const auto p = child(models_ptr, i);
      const auto& m = expect_object((*models)[i], p);
      SimModelConfig mc;
      mc.name = req_string(m, "name", p);
      mc.mem_footprint_gb = opt_number(m, "mem_footprint_gb", p);
      if (mc.mem_footprint_gb) check(*mc.mem_footprint_gb > 0, child(p, "mem_footprint_gb"), "must be > 0");
      mc.instances = static_cast<int>(opt_int(m, "instances", p).value_or(1));
      check(mc.instances >= 1, child(p, "instances"), "must be >= 1");
      mc.parallel = static_cast<int>(opt_int(m, "parallel", p).value_or(1));
      check(mc.parallel >= 1, child(p, "parallel"), "must be >= 1");
      mc.cold_load_s = opt_number(m, "cold_load_s", p).value_or(0.0);
      check(mc.cold_load_s >= 0, child(p, "cold_load_s"), "must be >= 0");
      mc.throughput_tps = opt_number(m, "throughput_tps", p);
      if (mc.throughput_tps) check(*mc.throughput_tps > 0, child(p, "throughput_tps"), "must be > 0");
      mc.context_length = opt_int(m, "context_length", p);
      sc.models.push_back(std::move(mc));
    }
  }
  sc.speedup = opt_number(doc, "speedup", ptr).value_or(1.0);
  check(sc.speedup > 0, child(ptr, "speedup"), "must be > 0");
  sc.seed = static_cast<std::uint64_t>(opt_int(doc, "seed", ptr).value_or(0));
  if (const auto* out = field(doc, "output_tokens")) {
    const auto p = child(ptr, "output_tokens");
    expect_object(*out, p);
    sc.output_tokens_mean = opt_number(*out, "mean", p).value_or(500);
    check(sc.output_tokens_mean > 0, child(p, "mean"), "must be > 0");
    sc.output_jitter = opt_number(*out, "jitter", p).value_or(0.1);
    check(sc.output_jitter >= 0 && sc.output_jitter < 1, child(p, "jitter"), "must be in [0,1)");
  }
  return sc;
}

Config parse_config(const json& doc) {
  expect_object(doc, "");
  Config cfg;

  if (const auto* server = field(doc, "server")) {
    const std::string p = "/server";
    expect_object(*server, p);
    cfg.server.listen = opt_string(*server, "listen", p).value_or(cfg.server.listen);
    cfg.server.timeout_s = opt_number(*server, "timeout_s", p).value_or(cfg.server.timeout_s);
    check(cfg.server.timeout_s > 0, p + "/timeout_s", "must be > 0");
    if (const auto* lc = field(*server, "log_content")) {
      check(lc->is_boolean(), p + "/log_content", "expected a boolean");
      cfg.server.log_content = lc->get<bool>();
    }
  }

  if (const auto* reg = field(doc, "registry")) {
    expect_array(*reg, "/registry");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < reg->size(); ++i) {
      const auto p = child("/registry", i);
      auto card = parse_card((*reg)[i], p);
      check(seen.insert(lowercase(card.name)).second, p + "/name",
            "duplicate model name '" + card.name + "'");
      cfg.registry.push_back(std::move(card));
    }
  }
  const auto registry = make_registry(cfg);

  const auto* backends = field(doc, "backends");
  check(backends != nullptr, "/backends", "required");
  expect_array(*backends, "/backends");
  check(!backends->empty(), "/backends", "at least one backend is required");
  std::set<std::string> backend_ids;
  for (std::size_t i = 0; i < backends->size(); ++i) {
    const auto p = child("/backends", i);
    const auto& b = expect_object((*backends)[i], p);
    BackendConfig bc;
    bc.id = req_string(b, "id", p);
    check(backend_ids.insert(bc.id).second, p + "/id", "duplicate backend id '" + bc.id + "'");
    bc.url = opt_string(b, "url", p);
    bc.models = string_set(b, "models", p);
    bc.time_scale = opt_number(b, "time_scale", p).value_or(1.0);
    check(bc.time_scale > 0, p + "/time_scale", "must be > 0");
    if (const auto* s = field(b, "simulator")) bc.simulator = parse_sim_config(*s, p + "/simulator");
    check(bc.url.has_value() != bc.simulator.has_value(), p,
          "backend needs exactly one of 'url' or 'simulator'");
    if (bc.simulator) {
      for (std::size_t m = 0; m < bc.simulator->models.size(); ++m) {
        const auto& mc = bc.simulator->models[m];
        check(registry.contains(mc.name) || mc.throughput_tps.has_value(),
              p + "/simulator/models/" + std::to_string(m) + "/name",
              "model '" + mc.name + "' is not in the registry and has no throughput_tps");
      }
    }
    cfg.backends.push_back(std::move(bc));
  }

  std::set<std::string> role_names;
  if (const auto* roles = field(doc, "roles")) {
    expect_array(*roles, "/roles");
    for (std::size_t i = 0; i < roles->size(); ++i) {
      const auto p = child("/roles", i);
      const auto& r = expect_object((*roles)[i], p);
      gateway::Role role;
      role.name = req_string(r, "name", p);
      role.model_allowlist = string_set(r, "models", p);
      role.max_concurrent = static_cast<int>(opt_int(r, "max_concurrent", p).value_or(4));
      check(role.max_concurrent > 0, p + "/max_concurrent", "must be > 0");
      role.rate_limit = static_cast<int>(opt_int(r, "rate_limit", p).value_or(60));
      check(role.rate_limit > 0, p + "/rate_limit", "must be > 0");
      check(role_names.insert(role.name).second, p + "/name", "duplicate role '" + role.name + "'");
      cfg.roles.push_back(std::move(role));
    }
  }

  if (const auto* keys = field(doc, "keys")) {
    expect_array(*keys, "/keys");
    for (std::size_t i = 0; i < keys->size(); ++i) {
      const auto p = child("/keys", i);
      const auto& k = expect_object((*keys)[i], p);
      gateway::KeyEntry key;
      key.key_id = req_string(k, "id", p);
      key.role = req_string(k, "role", p);
      key.display_name = opt_string(k, "display_name", p).value_or(key.key_id);
      if (const auto* rv = field(k, "revoked")) {
        check(rv->is_boolean(), p + "/revoked", "expected a boolean");
        key.revoked = rv->get<bool>();
      }
      check(role_names.count(key.role) > 0, p + "/role",
            "key '" + key.key_id + "' references unknown role '" + key.role + "'");
      cfg.keys.push_back(std::move(key));
    }
  }

  if (const auto* templates = field(doc, "templates")) {
    expect_array(*templates, "/templates");
    for (std::size_t i = 0; i < templates->size(); ++i) {
      const auto p = child("/templates", i);
      const auto& t = expect_object((*templates)[i], p);
      gateway::PromptTemplate tpl;
      tpl.id = req_string(t, "id", p);
      tpl.body = req_string(t, "body", p);
      tpl.required_params = string_set(t, "required_params", p);
      if (const auto* d = field(t, "defaults")) {
        expect_object(*d, p + "/defaults");
        for (const auto& [name, value] : d->items()) {
          check(value.is_string(), p + "/defaults/" + name, "expected a string");
          tpl.defaults[name] = value.get<std::string>();
        }
      }
      try {
        tpl.validate();
      } catch (const ValidationError& e) {
        throw ConfigError(p + "/" + e.field(), e.what());
      }
      cfg.templates.push_back(std::move(tpl));
    }
  }

  if (const auto* tel = field(doc, "telemetry")) {
    const std::string p = "/telemetry";
    expect_object(*tel, p);
    auto& t = cfg.telemetry;
    t.sample_period_s = opt_number(*tel, "sample_period_s", p).value_or(t.sample_period_s);
    check(t.sample_period_s > 0, p + "/sample_period_s", "must be > 0");
    t.price_per_kwh = opt_number(*tel, "price_per_kwh", p).value_or(t.price_per_kwh);
    check(t.price_per_kwh >= 0, p + "/price_per_kwh", "must be >= 0");
    t.co2_g_per_kwh = opt_number(*tel, "co2_g_per_kwh", p).value_or(t.co2_g_per_kwh);
    check(t.co2_g_per_kwh >= 0, p + "/co2_g_per_kwh", "must be >= 0");
    t.store_path = opt_string(*tel, "store", p).value_or("");
  }
  return cfg;
}

std::string resolve_config_path(const std::string& path) {
  if (const char* env = std::getenv(kConfigEnv); env && *env) return env;
  return path;
}

Config load_config(const std::string& path) {
  const auto resolved = resolve_config_path(path);
  std::ifstream in(resolved);
  if (!in) throw ConfigError("", "cannot open config file '" + resolved + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("", "malformed JSON in '" + resolved + "': " + e.what());
  }
  return parse_config(doc);
}

Registry make_registry(const Config& config) {
  Registry registry;
  for (const auto& card : config.registry) registry.register_model(card);
  return registry;
}

sim::SimServer build_sim_server(const SimConfig& config, const Registry& registry) {
  sim::SimServer server(config.gpus);
  for (const auto& mc : config.models) {
    ModelCard card;
    if (auto found = registry.find(mc.name)) {
      card = *found;
    } else {
      card.name = mc.name;
      card.param_count_b = 1;
      card.context_length = 4096;
      card.mem_footprint_gb = 1;
    }
    card.name = lowercase(card.name);
    if (mc.mem_footprint_gb) card.mem_footprint_gb = *mc.mem_footprint_gb;
    if (mc.throughput_tps) card.throughput_tps = *mc.throughput_tps;
    if (mc.context_length) card.context_length = *mc.context_length;
    server.configure({card, mc.instances, mc.parallel, mc.cold_load_s});
  }
  server.preload();
  return server;
}

Runtime build_runtime(const Config& config) {
  Runtime rt;
  rt.registry = std::make_shared<Registry>(make_registry(config));
  rt.access = std::make_shared<gateway::AccessControl>();
  for (const auto& role : config.roles) rt.access->put_role(role);
  for (const auto& key : config.keys) rt.access->put_key(key);
  rt.templates = std::make_shared<gateway::TemplateStore>();
  for (const auto& t : config.templates) rt.templates->put(t);
  for (const auto& b : config.backends) {
    if (b.simulator) {
      rt.backends.push_back(std::make_shared<SimBackend>(
          b.id, build_sim_server(*b.simulator, *rt.registry), b.simulator->speedup,
          b.simulator->seed, b.simulator->output_tokens_mean, b.simulator->output_jitter));
    } else {
      rt.backends.push_back(std::make_shared<HttpBackend>(b.id, *b.url, b.models, b.time_scale));
    }
  }
  rt.gateway = std::make_unique<gateway::Gateway>(
      gateway::GatewayOptions{config.server.timeout_s, config.server.log_content}, rt.registry,
      rt.access, rt.templates, rt.backends);
  return rt;
}

}  // namespace flexi
