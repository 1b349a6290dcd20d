#include "flexi/loadtest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <latch>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <httplib.h>

#include "flexi/backends.hpp"
#include "flexi/gateway.hpp"

namespace flexi::loadtest {

std::vector<Prompt> default_prompts() {
  return {
      {"prompt1", "Write a step-by-step guide on how to bake a chocolate cake from scratch."},
      {"prompt2", "Develop a python function that solves the following problem,  sudoku game"},
      {"prompt3", "Create a dialogue between two characters that discusses economic crisis"},
      {"prompt4", "In a forest, there are brave lions living there.  Please continue the story."},
      {"prompt5", "I'd like to book a flight for 4 to Seattle in U.S."},
  };
}

std::vector<Prompt> load_prompts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open prompt file " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (!doc.is_array()) throw std::runtime_error(path + ": expected a JSON list");
  std::vector<Prompt> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& p = doc[i];
    if (!p.is_object() || !p.contains("label") || !p["label"].is_string() ||
        !p.contains("text") || !p["text"].is_string()) {
      throw std::runtime_error(path + ": /" + std::to_string(i) +
                               " needs string 'label' and 'text'");
    }
    out.push_back({p["label"].get<std::string>(), p["text"].get<std::string>()});
  }
  return out;
}

void LoadTestPlan::validate() const {
  if (models.empty()) throw std::invalid_argument("plan: no models");
  if (prompts.empty()) throw std::invalid_argument("plan: no prompts");
  if (concurrency_levels.empty()) throw std::invalid_argument("plan: no concurrency levels");
  for (std::size_t i = 0; i < concurrency_levels.size(); ++i) {
    if (concurrency_levels[i] < 1) throw std::invalid_argument("plan: concurrency must be >= 1");
    if (i && concurrency_levels[i] <= concurrency_levels[i - 1]) {
      throw std::invalid_argument("plan: concurrency levels must be strictly increasing");
    }
  }
  if (!(timeout_s > 0)) throw std::invalid_argument("plan: timeout must be > 0");
  if (repetitions < 1) throw std::invalid_argument("plan: repetitions must be >= 1");
  if (max_tokens < 1) throw std::invalid_argument("plan: max_tokens must be >= 1");
}

LatencyStats latency_stats(std::span<const double> samples, double timeout) {
  if (samples.empty()) throw std::invalid_argument("latency_stats: no samples");
  if (!(timeout > 0)) throw std::invalid_argument("latency_stats: timeout must be > 0");
  LatencyStats out;
  double mean = 0, m2 = 0;
  std::size_t k = 0;
  for (double raw : samples) {
    if (!(raw >= 0)) throw std::invalid_argument("latency_stats: negative or NaN sample");
    const double x = std::min(raw, timeout);
    if (raw >= timeout) ++out.timeout_count;
    ++k;
    const double delta = x - mean;
    mean += delta / static_cast<double>(k);
    m2 += delta * (x - mean);
  }
  out.mean = mean;
  out.std = k > 1 ? std::sqrt(std::max(0.0, m2) / static_cast<double>(k - 1)) : 0.0;
  return out;
}

const LatencyCell* LoadTestReport::find(const std::string& model, const std::string& prompt,
                                        int concurrency) const {
  for (const auto& c : cells) {
    if (c.model == model && c.prompt == prompt && c.concurrency == concurrency) return &c;
  }
  return nullptr;
}

void to_json(nlohmann::json& j, const LoadTestPlan& p) {
  nlohmann::json prompts = nlohmann::json::array();
  for (const auto& pr : p.prompts) prompts.push_back({{"label", pr.label}, {"text", pr.text}});
  j = {{"endpoint", p.endpoint},       {"models", p.models},
       {"prompts", prompts},           {"concurrency_levels", p.concurrency_levels},
       {"timeout_s", p.timeout_s},     {"repetitions", p.repetitions},
       {"seed", p.seed},               {"max_tokens", p.max_tokens}};
}

void to_json(nlohmann::json& j, const LatencyCell& c) {
  j = {{"model", c.model},
       {"prompt", c.prompt},
       {"concurrency", c.concurrency},
       {"mean", c.mean},
       {"std", c.std},
       {"timeout_count", c.timeout_count},
       {"n", c.n},
       {"transport_errors", c.transport_errors}};
}

void to_json(nlohmann::json& j, const LoadTestReport& r) {
  j = {{"plan", r.plan}, {"cells", r.cells}, {"wall_clock_s", r.wall_clock_s}};
}

// ---------------------------------------------------------------- targets

SimTarget::SimTarget(sim::SimServer server, std::uint64_t seed, double output_mean,
                     double output_jitter)
    : server_(std::move(server)), lengths_(seed, output_mean, output_jitter) {}

std::vector<RequestSample> SimTarget::fire(const std::string& model, const std::string& prompt,
                                           int concurrency, double timeout_s, long max_tokens) {
  const long prompt_tokens = gateway::estimate_tokens(prompt);
  const double t0 = server_.clock();
  std::vector<sim::JobId> ids;
  for (int i = 0; i < concurrency; ++i) {
    ids.push_back(server_.submit(model, prompt_tokens, lengths_.draw(max_tokens), timeout_s));
  }
  server_.run_until(t0 + timeout_s);
  std::vector<RequestSample> out;
  for (auto id : ids) {
    const auto& job = server_.job(id);
    RequestSample s;
    s.timed_out = job.status != sim::JobStatus::Completed;
    s.latency_s = s.timed_out ? timeout_s : *job.finish_time - job.submit_time;
    s.completion_tokens = s.timed_out ? 0 : job.output_tokens;
    out.push_back(s);
    server_.forget(id);
  }
  return out;
}

HttpTarget::HttpTarget(std::string base_url, std::optional<std::string> api_key, double time_scale)
    : base_url_(std::move(base_url)), api_key_(std::move(api_key)), time_scale_(time_scale) {
  if (!(time_scale_ > 0)) throw std::invalid_argument("HttpTarget: time_scale must be > 0");
}

namespace {

httplib::Headers auth_headers(const std::optional<std::string>& key) {
  httplib::Headers h;
  if (key) h.emplace("Authorization", "Bearer " + *key);
  return h;
}

}  // namespace

void HttpTarget::check_reachable() {
  httplib::Client client(base_url_);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(10, 0);
  auto res = client.Get("/api/tags", auth_headers(api_key_));
  if (!res) {
    throw std::runtime_error("endpoint " + base_url_ + " unreachable: " +
                             httplib::to_string(res.error()));
  }
}

std::vector<RequestSample> HttpTarget::fire(const std::string& model, const std::string& prompt,
                                            int concurrency, double timeout_s, long max_tokens) {
  gateway::ChatRequest request;
  request.model = model;
  request.messages = {{"user", prompt}};
  request.options.max_tokens = max_tokens;
  const std::string body = nlohmann::json(request).dump();
  auto headers = auth_headers(api_key_);
  headers.emplace(kTimeoutHeader, std::to_string(timeout_s));
  const double wall_timeout = timeout_s / time_scale_ + 5.0;

  std::vector<RequestSample> out(static_cast<std::size_t>(concurrency));
  std::latch ready(concurrency);
  {
    std::vector<std::jthread> workers;
    for (int i = 0; i < concurrency; ++i) {
      workers.emplace_back([&, i] {
        httplib::Client client(base_url_);
        client.set_connection_timeout(5, 0);
        const auto secs = static_cast<time_t>(wall_timeout);
        client.set_read_timeout(secs, static_cast<time_t>((wall_timeout - secs) * 1e6));
        auto& sample = out[static_cast<std::size_t>(i)];
        ready.arrive_and_wait();
        auto res = client.Post("/api/chat", headers, body, "application/json");
        if (!res || res->status != 200) {
          sample.transport_error = true;
          sample.timed_out = true;
          sample.latency_s = timeout_s;
          return;
        }
        try {
          auto reply = nlohmann::json::parse(res->body).get<gateway::ChatResponse>();
          sample.timed_out = reply.timed_out || reply.total_duration_s >= timeout_s;
          sample.latency_s = sample.timed_out ? timeout_s : reply.total_duration_s;
          sample.completion_tokens = sample.timed_out ? 0 : reply.completion_tokens;
        } catch (const std::exception&) {
          sample.transport_error = true;
          sample.timed_out = true;
          sample.latency_s = timeout_s;
        }
      });
    }
  }
  return out;
}

// ------------------------------------------------------------------- runs

LoadTestReport run_plan(const LoadTestPlan& plan, LoadTarget& target) {
  plan.validate();
  target.check_reachable();
  const auto started = std::chrono::steady_clock::now();
  LoadTestReport report;
  report.plan = plan;
  for (const auto& model : plan.models) {
    for (const auto& prompt : plan.prompts) {
      for (int cq : plan.concurrency_levels) {
        std::vector<double> latencies;
        int errors = 0;
        for (int rep = 0; rep < plan.repetitions; ++rep) {
          for (const auto& s : target.fire(model, prompt.text, cq, plan.timeout_s, plan.max_tokens)) {
            latencies.push_back(s.latency_s);
            errors += s.transport_error ? 1 : 0;
          }
        }
        const auto stats = latency_stats(latencies, plan.timeout_s);
        report.cells.push_back({model, prompt.label, cq, stats.mean, stats.std,
                                stats.timeout_count, static_cast<int>(latencies.size()), errors});
      }
    }
  }
  report.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

double measure_throughput(LoadTarget& target, const std::string& model, const std::string& prompt,
                          double duration_s, long max_tokens) {
  if (!(duration_s > 0)) throw std::invalid_argument("measure_throughput: duration must be > 0");
  target.check_reachable();
  double elapsed = 0, busy = 0;
  long tokens = 0;
  int completed = 0;
  while (elapsed < duration_s) {
    const auto samples = target.fire(model, prompt, 1, duration_s, max_tokens);
    const auto& s = samples.front();
    if (s.timed_out || s.transport_error || elapsed + s.latency_s > duration_s) break;
    elapsed += s.latency_s;
    busy += s.latency_s;
    tokens += s.completion_tokens;
    ++completed;
  }
  if (completed == 0 || !(busy > 0)) {
    throw std::runtime_error("measure_throughput: no request completed within " +
                             std::to_string(duration_s) + " s");
  }
  return static_cast<double>(tokens) / busy;
}

// ---------------------------------------------------------------- reports

std::optional<ReportFormat> parse_format(std::string_view name) {
  if (name == "markdown" || name == "md") return ReportFormat::Markdown;
  if (name == "csv") return ReportFormat::Csv;
  if (name == "json") return ReportFormat::Json;
  return std::nullopt;
}

std::string format_seconds(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  std::string s(buf);
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  if (s == "-0") s = "0";
  return s;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<int> levels_of(const LoadTestReport& r) {
  std::vector<int> levels = r.plan.concurrency_levels;
  for (const auto& c : r.cells) {
    if (std::find(levels.begin(), levels.end(), c.concurrency) == levels.end()) {
      levels.push_back(c.concurrency);
    }
  }
  std::sort(levels.begin(), levels.end());
  return levels;
}

std::string markdown_header(const std::vector<int>& levels) {
  std::string head = "| Model |", rule = "|---|";
  for (int cq : levels) {
    head += " CQ" + std::to_string(cq) + " |";
    rule += "---:|";
  }
  return head + "\n" + rule + "\n";
}

std::string render_markdown(const LoadTestReport& r) {
  const auto levels = levels_of(r);
  if (r.cells.empty()) return markdown_header(levels);

  std::vector<std::string> prompts, models;
  auto note = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& p : r.plan.prompts) note(prompts, p.label);
  for (const auto& m : r.plan.models) note(models, m);
  for (const auto& c : r.cells) {
    note(prompts, c.prompt);
    note(models, c.model);
  }

  std::ostringstream out;
  bool first = true;
  for (const auto& label : prompts) {
    const bool any = std::any_of(r.cells.begin(), r.cells.end(),
                                 [&](const LatencyCell& c) { return c.prompt == label; });
    if (!any) continue;
    std::string text = label;
    for (const auto& p : r.plan.prompts) {
      if (p.label == label) text = p.text;
    }
    if (!first) out << "\n";
    first = false;
    out << "**Prompt:** " << text << "\n\n" << markdown_header(levels);
    for (const auto& model : models) {
      std::string row = "| " + model + " |";
      bool has = false;
      for (int cq : levels) {
        if (const auto* c = r.find(model, label, cq)) {
          row += " " + format_seconds(c->mean) + " ± " + format_seconds(c->std) + " |";
          has = true;
        } else {
          row += " - |";
        }
      }
      if (has) out << row << "\n";
    }
  }
  return out.str();
}

std::string render_csv(const LoadTestReport& r) {
  std::ostringstream out;
  out << "model,prompt,concurrency,mean_s,std_s,timeout_count,n\n";
  for (const auto& c : r.cells) {
    out << csv_field(c.model) << ',' << csv_field(c.prompt) << ',' << c.concurrency << ','
        << format_seconds(c.mean) << ',' << format_seconds(c.std) << ',' << c.timeout_count << ','
        << c.n << '\n';
  }
  return out.str();
}

}  // namespace

std::string render_report(const LoadTestReport& report, ReportFormat format) {
  switch (format) {
    case ReportFormat::Markdown: return render_markdown(report);
    case ReportFormat::Csv: return render_csv(report);
    case ReportFormat::Json: return nlohmann::json(report).dump(2) + "\n";
  }
  return {};
}

}  // namespace flexi::loadtest
