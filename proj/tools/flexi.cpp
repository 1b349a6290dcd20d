// flexi: operator entry point for the gateway, simulator, load tests,
// model selection and energy reports.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "flexi/backends.hpp"
#include "flexi/config.hpp"
#include "flexi/http_api.hpp"
#include "flexi/loadtest.hpp"
#include "flexi/registry.hpp"
#include "flexi/telemetry.hpp"

namespace {

using namespace flexi;

constexpr const char* kDefaultConfig = "flexi.json";

void wait_for_signal() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  int sig = 0;
  sigwait(&set, &sig);
}

void block_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

const BackendConfig& pick_sim_backend(const Config& cfg, const std::string& id) {
  for (const auto& b : cfg.backends) {
    if (b.simulator && (id.empty() || b.id == id)) return b;
  }
  throw std::runtime_error(id.empty() ? "config has no simulator backend"
                                      : "no simulator backend with id '" + id + "'");
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// ------------------------------------------------------------------ serve

int cmd_serve(const std::string& config_path, const std::string& listen_override) {
  auto cfg = load_config(config_path);
  auto rt = build_runtime(cfg);

  std::vector<SimBackend*> sims;
  for (const auto& b : rt.backends) {
    if (auto* s = dynamic_cast<SimBackend*>(b.get())) sims.push_back(s);
  }
  // GPUs of all simulated backends, numbered in backend order.
  telemetry::MetricsSource source = [&sims](double) -> std::optional<telemetry::MetricsSample> {
    if (sims.empty()) return std::nullopt;
    telemetry::MetricsSample merged;
    int next_gpu = 0;
    for (auto* s : sims) {
      auto part = s->sim().with_server([](sim::SimServer& srv) { return telemetry::snapshot(srv); });
      for (auto g : part.gpus) {
        g.id = next_gpu++;
        merged.gpus.push_back(g);
      }
      for (auto& m : part.loaded_models) merged.loaded_models.push_back(m);
      merged.outstanding_requests += part.outstanding_requests;
    }
    return merged;
  };
  auto clock = [&sims] { return sims.empty() ? 0.0 : sims.front()->sim().now(); };

  telemetry::SampleStore store(cfg.telemetry.store_path);
  const auto period = std::chrono::milliseconds(static_cast<long>(
      cfg.telemetry.sample_period_s * 1000.0 /
      (sims.empty() ? 1.0 : sims.front()->sim().speedup())));
  telemetry::Sampler sampler(source, clock, store, std::max(period, std::chrono::milliseconds(10)));

  GatewayServer server(*rt.gateway, [&store] { return store.latest(); });
  auto [host, port] = parse_listen(listen_override.empty() ? cfg.server.listen : listen_override);
  const int bound = server.start(host, port);
  std::cerr << "flexi gateway listening on " << host << ":" << bound << " ("
            << rt.backends.size() << " backend(s), timeout " << cfg.server.timeout_s << " s)\n";
  wait_for_signal();
  std::cerr << "shutting down\n";
  server.stop();
  return 0;
}

int cmd_sim_serve(const std::string& config_path, const std::string& backend_id,
                  const std::string& listen, double timeout) {
  auto cfg = load_config(config_path);
  const auto& b = pick_sim_backend(cfg, backend_id);
  auto registry = make_registry(cfg);
  auto backend = std::make_shared<SimBackend>(b.id, build_sim_server(*b.simulator, registry),
                                              b.simulator->speedup, b.simulator->seed,
                                              b.simulator->output_tokens_mean,
                                              b.simulator->output_jitter);
  SimHttpServer server(backend, timeout > 0 ? timeout : cfg.server.timeout_s);
  auto [host, port] = parse_listen(listen);
  const int bound = server.start(host, port);
  std::cerr << "simulated backend '" << b.id << "' listening on " << host << ":" << bound
            << " (speedup " << b.simulator->speedup << "x)\n";
  wait_for_signal();
  server.stop();
  return 0;
}

// ------------------------------------------------------------------ bench

struct BenchFlags {
  std::string config;
  std::string backend;
  std::string endpoint;
  std::string key;
  double time_scale = 1.0;
  std::vector<std::string> models;
  std::vector<int> cq{1, 10, 30};
  int reps = 3;
  double timeout = 300;
  std::optional<std::uint64_t> seed;
  std::string prompts;
  std::string format = "markdown";
  std::string out;
  long max_tokens = 1024;
};

int cmd_bench(const BenchFlags& f) {
  auto format = loadtest::parse_format(f.format);
  if (!format) throw std::runtime_error("unknown format '" + f.format + "'");

  loadtest::LoadTestPlan plan;
  plan.models = f.models;
  plan.prompts = f.prompts.empty() ? loadtest::default_prompts() : loadtest::load_prompts(f.prompts);
  plan.concurrency_levels = f.cq;
  plan.repetitions = f.reps;
  plan.timeout_s = f.timeout;
  plan.max_tokens = f.max_tokens;

  std::unique_ptr<loadtest::LoadTarget> target;
  if (!f.endpoint.empty()) {
    plan.endpoint = f.endpoint;
    plan.seed = f.seed.value_or(0);
    target = std::make_unique<loadtest::HttpTarget>(
        f.endpoint, f.key.empty() ? std::nullopt : std::optional<std::string>(f.key), f.time_scale);
  } else {
    auto cfg = load_config(f.config);
    const auto& b = pick_sim_backend(cfg, f.backend);
    plan.endpoint = "sim:" + b.id;
    plan.seed = f.seed.value_or(b.simulator->seed);
    target = std::make_unique<loadtest::SimTarget>(
        build_sim_server(*b.simulator, make_registry(cfg)), plan.seed,
        b.simulator->output_tokens_mean, b.simulator->output_jitter);
  }
  if (plan.models.empty()) throw std::runtime_error("--models is required");

  auto report = loadtest::run_plan(plan, *target);
  std::cout << loadtest::render_report(report, *format);
  if (!f.out.empty()) {
    std::ofstream out(f.out);
    if (!out) throw std::runtime_error("cannot write " + f.out);
    out << loadtest::render_report(report, loadtest::ReportFormat::Json);
  }
  return 0;
}

// ----------------------------------------------------------------- models

struct SelectFlags {
  std::optional<long> min_context;
  std::vector<std::string> licenses;
  std::optional<double> min_avg;
  std::optional<double> min_throughput;
  std::vector<std::string> require;
};


int cmd_models_list(const std::string& config) {
  auto registry = make_registry(load_config(config));
  std::cout << "name\tparams_b\tcontext\tlicense\ttok/s\tavg\n";
  for (const auto& c : registry.all()) {
    std::cout << c.name << "\t" << telemetry::format_number(c.param_count_b) << "\t"
              << c.context_length << "\t" << c.license << "\t"
              << telemetry::format_number(c.throughput_tps) << "\t"
              << (c.scores.empty() ? std::string("-") : fixed(round2(benchmark_average(c.scores)), 2))
              << "\n";
  }
  return 0;
}

int cmd_models_rank(const std::string& config, double wq, double wt) {
  auto registry = make_registry(load_config(config));
  for (const auto& r : rank_models(registry, wq, wt)) {
    std::cout << r.card.name << "\t" << fixed(r.score, 4) << "\tavg " << fixed(r.quality, 2) << "\t"
              << telemetry::format_number(r.card.throughput_tps) << " tok/s\n";
  }
  return 0;
}

int cmd_models_select(const std::string& config, const SelectFlags& f) {
  auto registry = make_registry(load_config(config));
  SelectionConstraints c;
  c.min_context = f.min_context;
  if (!f.licenses.empty()) c.license_allowlist = std::set<std::string>(f.licenses.begin(), f.licenses.end());
  c.min_avg_score = f.min_avg;
  c.min_throughput = f.min_throughput;
  for (const auto& req : f.require) {
    const auto eq = req.find('=');
    if (eq == std::string::npos) throw std::runtime_error("--require expects BENCH=MIN, got '" + req + "'");
    auto kind = parse_benchmark(req.substr(0, eq));
    if (!kind) throw std::runtime_error("unknown benchmark '" + req.substr(0, eq) + "'");
    c.required_benchmarks[*kind] = std::stod(req.substr(eq + 1));
  }
  auto chosen = select_model(registry, c);
  if (!chosen) {
    std::cout << "none\n";
    return 0;
  }
  std::cout << chosen->name << "\n";
  return 0;
}

// ------------------------------------------------------------------- cost

struct CostFlags {
  std::optional<double> daily_kwh;
  std::optional<double> kwh;
  std::string samples;
  std::optional<double> from;
  std::optional<double> to;
  double price = 0.30;
  double co2 = 380;
  bool annualize = false;
  std::string format = "text";
};

int cmd_cost(const CostFlags& f) {
  const int sources = (f.daily_kwh ? 1 : 0) + (f.kwh ? 1 : 0) + (f.samples.empty() ? 0 : 1);
  if (sources != 1) throw std::runtime_error("give exactly one of --daily-kwh, --kwh, --samples");
  telemetry::EnergyReport report;
  if (f.daily_kwh) {
    if (f.annualize) {
      report = telemetry::cost_report(*f.daily_kwh, f.price, f.co2, true);
    } else {
      report = telemetry::cost_report(*f.daily_kwh, f.price, f.co2, false,
                                      telemetry::Window{0, 86400});
    }
  } else if (f.kwh) {
    report = telemetry::cost_report(*f.kwh, f.price, f.co2, false);
  } else {
    auto samples = telemetry::SampleStore::load_ndjson(f.samples);
    if (samples.empty()) throw std::runtime_error("sample store is empty");
    telemetry::Window w{f.from.value_or(samples.front().timestamp),
                        f.to.value_or(samples.back().timestamp)};
    const double kwh = telemetry::integrate_energy(samples, w);
    if (f.annualize) {
      const double days = (w.t1 - w.t0) / 86400.0;
      report = telemetry::cost_report(kwh / days, f.price, f.co2, true);
    } else {
      report = telemetry::cost_report(kwh, f.price, f.co2, false, w);
    }
  }
  if (f.format == "json") {
    std::cout << nlohmann::json(report).dump(2) << "\n";
  } else {
    std::cout << telemetry::format_number(std::round(report.energy_kwh * 1000.0) / 1000.0)
              << " kWh, " << fixed(report.cost, 2) << " €, " << fixed(report.co2_kg, 1)
              << " kg CO2\n";
  }
  return 0;
}

int cmd_validate(const std::string& config) {
  auto cfg = load_config(config);
  std::cout << "ok: " << cfg.registry.size() << " models, " << cfg.backends.size()
            << " backend(s), " << cfg.roles.size() << " roles, " << cfg.keys.size() << " keys\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flexi: self-hosted LLM gateway, serving simulator and load-test harness"};
  app.require_subcommand(1);
  std::string config = kDefaultConfig;
  app.add_option("-c,--config", config, "config document (overridden by $FLEXI_CONFIG)");

  std::string listen;
  auto* serve = app.add_subcommand("serve", "run the gateway and its simulated backends");
  serve->add_option("--listen", listen, "host:port, overrides server.listen");

  std::string sim_backend, sim_listen = "127.0.0.1:11434";
  double sim_timeout = 0;
  auto* sim_serve = app.add_subcommand("sim-serve", "run one simulated backend as an HTTP server");
  sim_serve->add_option("--backend", sim_backend, "simulator backend id (default: first)");
  sim_serve->add_option("--listen", sim_listen, "host:port");
  sim_serve->add_option("--timeout", sim_timeout, "default request timeout in simulated seconds");

  BenchFlags bench_flags;
  std::uint64_t seed = 0;
  auto* bench = app.add_subcommand("bench", "run the concurrency load test");
  bench->add_option("--models", bench_flags.models, "models to test")->delimiter(',')->required();
  bench->add_option("--cq", bench_flags.cq, "concurrency levels")->delimiter(',');
  bench->add_option("--reps", bench_flags.reps, "repetitions per cell");
  bench->add_option("--timeout", bench_flags.timeout, "per-request timeout in seconds");
  auto* seed_opt = bench->add_option("--seed", seed, "generation-length seed");
  bench->add_option("--prompts", bench_flags.prompts, "prompt file (JSON list of {label,text})");
  bench->add_option("--format", bench_flags.format, "markdown|csv|json");
  bench->add_option("--out", bench_flags.out, "also write the JSON report here");
  bench->add_option("--max-tokens", bench_flags.max_tokens, "max_tokens sent with each request");
  bench->add_option("--backend", bench_flags.backend, "simulator backend id for in-process runs");
  bench->add_option("--endpoint", bench_flags.endpoint, "target URL instead of the in-process simulator");
  bench->add_option("--key", bench_flags.key, "bearer key for --endpoint");
  bench->add_option("--time-scale", bench_flags.time_scale, "server seconds per wall second at --endpoint");

  auto* models = app.add_subcommand("models", "inspect, rank and select models");
  models->require_subcommand(1);
  auto* models_list = models->add_subcommand("list", "list registered models");
  double wq = 1, wt = 0;
  auto* models_rank = models->add_subcommand("rank", "rank by weighted quality and throughput");
  models_rank->add_option("--wq", wq, "quality weight");
  models_rank->add_option("--wt", wt, "throughput weight");
  SelectFlags select_flags;
  auto* models_select = models->add_subcommand("select", "best model meeting constraints");
  models_select->add_option("--min-context", select_flags.min_context, "minimum context tokens");
  models_select->add_option("--license", select_flags.licenses, "allowed license (repeatable)");
  models_select->add_option("--min-avg", select_flags.min_avg, "minimum benchmark average");
  models_select->add_option("--min-throughput", select_flags.min_throughput, "minimum tokens/s");
  models_select->add_option("--require", select_flags.require, "BENCH=MIN (repeatable)");

  CostFlags cost_flags;
  auto* cost = app.add_subcommand("cost", "energy, cost and CO2 report");
  cost->add_option("--daily-kwh", cost_flags.daily_kwh, "daily energy in kWh");
  cost->add_option("--kwh", cost_flags.kwh, "total energy in kWh");
  cost->add_option("--samples", cost_flags.samples, "NDJSON sample store to integrate");
  cost->add_option("--from", cost_flags.from, "window start (sample timestamp)");
  cost->add_option("--to", cost_flags.to, "window end (sample timestamp)");
  cost->add_option("--price", cost_flags.price, "currency per kWh");
  cost->add_option("--co2", cost_flags.co2, "grid intensity in gCO2/kWh");
  cost->add_flag("--annualize", cost_flags.annualize, "scale a daily figure to a year");
  cost->add_option("--format", cost_flags.format, "text|json");

  auto* validate = app.add_subcommand("validate-config", "check a config document");

  CLI11_PARSE(app, argc, argv);

  try {
    if (serve->parsed()) {
      block_signals();
      return cmd_serve(config, listen);
    }
    if (sim_serve->parsed()) {
      block_signals();
      return cmd_sim_serve(config, sim_backend, sim_listen, sim_timeout);
    }
    if (bench->parsed()) {
      bench_flags.config = config;
      if (seed_opt->count()) bench_flags.seed = seed;
      return cmd_bench(bench_flags);
    }
    if (models_list->parsed()) return cmd_models_list(config);
    if (models_rank->parsed()) return cmd_models_rank(config, wq, wt);
    if (models_select->parsed()) return cmd_models_select(config, select_flags);
    if (cost->parsed()) return cmd_cost(cost_flags);
    if (validate->parsed()) return cmd_validate(config);
  } catch (const std::exception& e) {
    std::cerr << "flexi: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
