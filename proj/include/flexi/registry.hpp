#pragma once

#include <map>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace flexi {

enum class BenchmarkKind { ARC, HellaSwag, MMLU, TruthfulQA, WinoGrande, GSM8K };

inline constexpr BenchmarkKind kAllBenchmarks[] = {
    BenchmarkKind::ARC,        BenchmarkKind::HellaSwag,  BenchmarkKind::MMLU,
    BenchmarkKind::TruthfulQA, BenchmarkKind::WinoGrande, BenchmarkKind::GSM8K,
};

std::string_view to_string(BenchmarkKind kind);
std::optional<BenchmarkKind> parse_benchmark(std::string_view name);

using BenchmarkScores = std::map<BenchmarkKind, double>;

/// Raised when a card or constraint set violates its invariants. `field()`
/// names the offending field.
class ValidationError : public std::invalid_argument {
 public:
  ValidationError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct ModelCard {
  std::string name;
  double param_count_b = 0;      // billions of parameters
  long context_length = 0;       // tokens
  std::string license;
  double mem_footprint_gb = 0;   // configured, not derived from param_count
  double throughput_tps = 0;     // single-query generation speed
  BenchmarkScores scores;
  std::optional<std::string> safety_notes;

  void validate() const;
};

struct SelectionConstraints {
  std::optional<long> min_context;
  std::optional<std::set<std::string>> license_allowlist;
  std::optional<double> min_avg_score;
  std::optional<double> min_throughput;
  std::map<BenchmarkKind, double> required_benchmarks;

  void validate() const;
  bool admits(const ModelCard& card) const;
};

/// Arithmetic mean over the benchmarks present in `scores`.
/// Throws std::invalid_argument on an empty map.
double benchmark_average(const BenchmarkScores& scores);

/// Two-decimal round-half-up, the precision benchmark averages are published at.
double round2(double value);

std::string lowercase(std::string_view s);

struct RankedModel {
  ModelCard card;
  double score = 0;
  double quality = 0;  // two-decimal benchmark average used in the score
};

/// Thread-safe model store. Names are unique case-insensitively.
class Registry {
 public:
  Registry() = default;
  Registry(const Registry& other);
  Registry& operator=(const Registry& other);

  /// Validates and inserts, replacing any card with the same name.
  /// Returns the canonical (lower-case) handle.
  std::string register_model(ModelCard card);
  bool remove(std::string_view name);

  std::optional<ModelCard> find(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::vector<ModelCard> all() const;
  std::size_t size() const;

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, ModelCard> cards_;
};

/// score = w_quality * avg + w_throughput * tps / max_tps, descending.
/// Ties: higher throughput first, then name.
std::vector<RankedModel> rank_models(const std::vector<ModelCard>& cards, double w_quality,
                                     double w_throughput);
std::vector<RankedModel> rank_models(const Registry& registry, double w_quality,
                                     double w_throughput);

std::optional<ModelCard> select_model(const Registry& registry,
                                      const SelectionConstraints& constraints);

void to_json(nlohmann::json& j, const ModelCard& card);
void from_json(const nlohmann::json& j, ModelCard& card);

}  // namespace flexi
