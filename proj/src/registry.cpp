#include "flexi/registry.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>

namespace flexi {

std::string_view to_string(BenchmarkKind kind) {
  switch (kind) {
    case BenchmarkKind::ARC: return "ARC";
    case BenchmarkKind::HellaSwag: return "HellaSwag";
    case BenchmarkKind::MMLU: return "MMLU";
    case BenchmarkKind::TruthfulQA: return "TruthfulQA";
    case BenchmarkKind::WinoGrande: return "WinoGrande";
    case BenchmarkKind::GSM8K: return "GSM8K";
  }
  return "?";
}

std::optional<BenchmarkKind> parse_benchmark(std::string_view name) {
  const auto wanted = lowercase(name);
  for (auto kind : kAllBenchmarks) {
    if (lowercase(to_string(kind)) == wanted) return kind;
  }
  return std::nullopt;
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

void ModelCard::validate() const {
  if (name.empty()) throw ValidationError("name", "must be non-empty");
  if (!(param_count_b > 0)) throw ValidationError("param_count_b", "must be > 0");
  if (context_length <= 0) throw ValidationError("context_length", "must be > 0");
  if (!(mem_footprint_gb > 0)) throw ValidationError("mem_footprint_gb", "must be > 0");
  if (!(throughput_tps > 0)) throw ValidationError("throughput_tps", "must be > 0");
  for (const auto& [kind, score] : scores) {
    if (!(score >= 0.0 && score <= 1.0)) {
      throw ValidationError("scores." + std::string(to_string(kind)),
                            "score " + std::to_string(score) + " outside [0,1]");
    }
  }
}

void SelectionConstraints::validate() const {
  if (min_context && *min_context <= 0) throw ValidationError("min_context", "must be > 0");
  if (min_avg_score && !(*min_avg_score >= 0 && *min_avg_score <= 1)) {
    throw ValidationError("min_avg_score", "must be within [0,1]");
  }
  if (min_throughput && !(*min_throughput >= 0)) {
    throw ValidationError("min_throughput", "must be >= 0");
  }
  for (const auto& [kind, min] : required_benchmarks) {
    if (!(min >= 0 && min <= 1)) {
      throw ValidationError("required_benchmarks." + std::string(to_string(kind)),
                            "must be within [0,1]");
    }
  }
}

bool SelectionConstraints::admits(const ModelCard& card) const {
  if (min_context && card.context_length < *min_context) return false;
  if (license_allowlist) {
    const auto lic = lowercase(card.license);
    bool found = false;
    for (const auto& allowed : *license_allowlist) found = found || lowercase(allowed) == lic;
    if (!found) return false;
  }
  if (min_avg_score) {
    if (card.scores.empty() || benchmark_average(card.scores) < *min_avg_score) return false;
  }
  if (min_throughput && card.throughput_tps < *min_throughput) return false;
  for (const auto& [kind, min] : required_benchmarks) {
    auto it = card.scores.find(kind);
    if (it == card.scores.end() || it->second < min) return false;
  }
  return true;
}

double benchmark_average(const BenchmarkScores& scores) {
  if (scores.empty()) throw std::invalid_argument("benchmark_average: no scores");
  double sum = 0;
  for (const auto& [_, score] : scores) sum += score;
  return sum / static_cast<double>(scores.size());
}

double round2(double value) {
  // The epsilon keeps exact halves such as 4.47/6 = .745 from rounding down
  // after binary representation error.
  return std::floor(value * 100.0 + 0.5 + 1e-9) / 100.0;
}

Registry::Registry(const Registry& other) {
  std::shared_lock lock(other.mutex_);
  cards_ = other.cards_;
}

Registry& Registry::operator=(const Registry& other) {
  if (this == &other) return *this;
  std::map<std::string, ModelCard> copy;
  {
    std::shared_lock lock(other.mutex_);
    copy = other.cards_;
  }
  std::unique_lock lock(mutex_);
  cards_ = std::move(copy);
  return *this;
}

std::string Registry::register_model(ModelCard card) {
  card.validate();
  auto key = lowercase(card.name);
  std::unique_lock lock(mutex_);
  cards_.insert_or_assign(key, std::move(card));
  return key;
}

bool Registry::remove(std::string_view name) {
  std::unique_lock lock(mutex_);
  return cards_.erase(lowercase(name)) > 0;
}

std::optional<ModelCard> Registry::find(std::string_view name) const {
  std::shared_lock lock(mutex_);
  auto it = cards_.find(lowercase(name));
  if (it == cards_.end()) return std::nullopt;
  return it->second;
}

bool Registry::contains(std::string_view name) const {
  std::shared_lock lock(mutex_);
  return cards_.count(lowercase(name)) > 0;
}

std::vector<ModelCard> Registry::all() const {
  std::shared_lock lock(mutex_);
  std::vector<ModelCard> out;
  out.reserve(cards_.size());
  for (const auto& [_, card] : cards_) out.push_back(card);
  return out;
}

std::size_t Registry::size() const {
  std::shared_lock lock(mutex_);
  return cards_.size();
}

std::vector<RankedModel> rank_models(const std::vector<ModelCard>& cards, double w_quality,
                                     double w_throughput) {
  if (!(w_quality >= 0) || !(w_throughput >= 0) || !(w_quality + w_throughput > 0)) {
    throw std::invalid_argument("rank_models: weights must be >= 0 with a positive sum");
  }
  if (cards.empty()) throw std::invalid_argument("rank_models: registry is empty");

  double max_tps = 0;
  for (const auto& c : cards) max_tps = std::max(max_tps, c.throughput_tps);

  std::vector<RankedModel> ranked;
  ranked.reserve(cards.size());
  for (const auto& c : cards) {
    RankedModel r{c, 0, c.scores.empty() ? 0.0 : round2(benchmark_average(c.scores))};
    r.score = w_quality * r.quality + w_throughput * (c.throughput_tps / max_tps);
    ranked.push_back(std::move(r));
  }
  std::sort(ranked.begin(), ranked.end(), [](const RankedModel& a, const RankedModel& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.card.throughput_tps != b.card.throughput_tps) {
      return a.card.throughput_tps > b.card.throughput_tps;
    }
    return lowercase(a.card.name) < lowercase(b.card.name);
  });
  return ranked;
}

std::vector<RankedModel> rank_models(const Registry& registry, double w_quality,
                                     double w_throughput) {
  return rank_models(registry.all(), w_quality, w_throughput);
}

std::optional<ModelCard> select_model(const Registry& registry,
                                      const SelectionConstraints& constraints) {
  constraints.validate();
  std::vector<ModelCard> eligible;
  for (auto& card : registry.all()) {
    if (constraints.admits(card)) eligible.push_back(std::move(card));
  }
  if (eligible.empty()) return std::nullopt;
  return rank_models(eligible, 1.0, 0.0).front().card;
}

void to_json(nlohmann::json& j, const ModelCard& card) {
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& [kind, score] : card.scores) scores[std::string(to_string(kind))] = score;
  j = {{"name", card.name},
       {"param_count_b", card.param_count_b},
       {"context_length", card.context_length},
       {"license", card.license},
       {"mem_footprint_gb", card.mem_footprint_gb},
       {"throughput_tps", card.throughput_tps},
       {"scores", scores}};
  if (card.safety_notes) j["safety_notes"] = *card.safety_notes;
}

namespace {

double number_field(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw ValidationError(key, "missing");
  if (!it->is_number()) throw ValidationError(key, "expected a number");
  return it->get<double>();
}

}  // namespace

void from_json(const nlohmann::json& j, ModelCard& card) {
  if (!j.is_object()) throw ValidationError("", "model card must be an object");
  auto name = j.find("name");
  if (name == j.end() || !name->is_string()) throw ValidationError("name", "expected a string");
  card.name = name->get<std::string>();
  card.param_count_b = number_field(j, "param_count_b");
  card.context_length = static_cast<long>(number_field(j, "context_length"));
  card.mem_footprint_gb = number_field(j, "mem_footprint_gb");
  card.throughput_tps = number_field(j, "throughput_tps");
  card.license = j.value("license", std::string{});
  card.scores.clear();
  if (auto s = j.find("scores"); s != j.end()) {
    if (!s->is_object()) throw ValidationError("scores", "expected an object");
    for (const auto& [key, value] : s->items()) {
      auto kind = parse_benchmark(key);
      if (!kind) throw ValidationError("scores/" + key, "unknown benchmark");
      if (!value.is_number()) throw ValidationError("scores/" + key, "expected a number");
      card.scores[*kind] = value.get<double>();
    }
  }
  card.safety_notes.reset();
  if (auto n = j.find("safety_notes"); n != j.end() && n->is_string()) {
    card.safety_notes = n->get<std::string>();
  }
}

}  // namespace flexi
