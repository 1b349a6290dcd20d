#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>
#include <thread>

#include "flexi/telemetry.hpp"
#include "support.hpp"

using namespace flexi;
using namespace flexi::telemetry;

namespace {

sim::SimServer server_a_like() {
  std::vector<sim::GpuSpec> gpus;
  for (int i = 0; i < 8; ++i) gpus.push_back({i, 24, 230, 0});
  sim::SimServer s(gpus);
  s.configure({flexi::testing::card("m", 50, 20), 8, 1, 0});
  s.preload();
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() /
          (name + "-" + std::to_string(::getpid()) + ".ndjson"))
      .string();
}

}  // namespace

TEST(SampleMetrics, OneBusyGpu) {
  auto s = server_a_like();
  s.submit("m", 0, 500);
  auto sample = sample_metrics([&s](double) { return std::optional(snapshot(s)); }, 0);
  ASSERT_EQ(sample.gpus.size(), 8u);
  EXPECT_FALSE(sample.stale);
  int busy = 0;
  for (const auto& g : sample.gpus) {
    if (g.util_pct == 100) {
      ++busy;
      EXPECT_DOUBLE_EQ(g.power_w, 230);
    } else {
      EXPECT_DOUBLE_EQ(g.power_w, 0);
    }
    EXPECT_EQ(g.mem_used_mb, 20 * 1024);
    EXPECT_EQ(g.mem_total_mb, 24 * 1024);
  }
  EXPECT_EQ(busy, 1);
  EXPECT_EQ(sample.outstanding_requests, 1);
  EXPECT_DOUBLE_EQ(sample.total_power_w(), 230);
}

TEST(SampleMetrics, IdleServerHasNothingOutstanding) {
  auto s = server_a_like();
  auto source = sim_source(s);
  auto sample = sample_metrics(source, 5);
  EXPECT_EQ(sample.outstanding_requests, 0);
  EXPECT_DOUBLE_EQ(sample.timestamp, 5);
  EXPECT_DOUBLE_EQ(s.clock(), 5);
}

TEST(SampleMetrics, StaleSourceYieldsEmptySample) {
  auto a = sample_metrics([](double) -> std::optional<MetricsSample> { return std::nullopt; }, 3);
  EXPECT_TRUE(a.stale);
  EXPECT_TRUE(a.gpus.empty());
  EXPECT_EQ(a.outstanding_requests, 0);
  auto b = sample_metrics([](double) -> std::optional<MetricsSample> { throw std::runtime_error("x"); }, 3);
  EXPECT_TRUE(b.stale);
}

TEST(Energy, ConstantMaximumForADay) {
  auto trace = flexi::testing::constant_trace(1840, 86400, 60);
  EXPECT_NEAR(integrate_energy(trace, {0, 86400}), 44.16, 1e-9);
}

TEST(Energy, FiveDayLowLoad) {
  auto trace = flexi::testing::constant_trace(222.5, 5 * 86400, 300);
  EXPECT_NEAR(integrate_energy(trace, {0, 5 * 86400}), 26.7, 1e-9);
}

TEST(Energy, DegenerateWindowThrows) {
  auto trace = flexi::testing::constant_trace(100, 600, 60);
  EXPECT_THROW(integrate_energy(trace, {120, 120}), std::invalid_argument);
  std::vector<MetricsSample> backwards{trace[2], trace[1]};
  EXPECT_THROW(integrate_energy(backwards, {0, 600}), std::invalid_argument);
}

TEST(Energy, StaleSamplesAreSkipped) {
  auto trace = flexi::testing::constant_trace(1000, 3600, 60);
  for (std::size_t i = 1; i + 1 < trace.size(); i += 2) {
    trace[i].stale = true;
    trace[i].gpus.clear();
  }
  EXPECT_NEAR(integrate_energy(trace, {0, 3600}), 1.0, 1e-9);
}

TEST(Energy, PiecewiseConstantMatchesClosedForm) {
  // Levels held over intervals, sampled at both edges of every step.
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<MetricsSample> trace;
    double t = 0, joules = 0;
    const int steps = 1 + static_cast<int>(rng() % 20);
    for (int i = 0; i < steps; ++i) {
      const double watts = std::uniform_real_distribution<double>(0, 2000)(rng);
      const double dt = std::uniform_real_distribution<double>(1, 3600)(rng);
      for (double edge : {t, t + dt}) {
        MetricsSample s;
        s.timestamp = edge;
        s.gpus.push_back({0, 0, 0, 0, watts});
        trace.push_back(s);
      }
      joules += watts * dt;
      t += dt;
      t = std::nextafter(t, 1e300);  // next step starts strictly later
    }
    const double expected = joules / 3.6e6;
    EXPECT_NEAR(integrate_energy(trace, {0, t}), expected, 1e-6 * std::max(1.0, expected));
  }
}

TEST(Energy, SimulatorTraceWithinPowerBounds) {
  std::vector<sim::GpuSpec> gpus{{0, 46, 300, 40}, {1, 46, 300, 40}};
  sim::SimServer s(gpus);
  s.configure({flexi::testing::card("m", 20, 10), 4, 1, 0});
  s.preload();
  auto source = sim_source(s);
  std::mt19937_64 rng(1);
  std::vector<MetricsSample> trace;
  for (int i = 0; i <= 200; ++i) {
    if (rng() % 4 == 0) s.submit("m", 0, 100 + static_cast<long>(rng() % 500));
    trace.push_back(sample_metrics(source, i * 5.0));
  }
  const double kwh = integrate_energy(trace, {0, 1000});
  EXPECT_GE(kwh, 80.0 * 1000 / 3.6e6 - 1e-12);
  EXPECT_LE(kwh, 600.0 * 1000 / 3.6e6 + 1e-12);
}

TEST(CostReport, AnnualizedDailyFigure) {
  auto r = cost_report(44.16, 0.30, 380, true);
  EXPECT_NEAR(r.energy_kwh, 16118.4, 1e-9);
  EXPECT_NEAR(r.cost, 4835.52, 1e-9);
  EXPECT_NEAR(r.co2_kg, 6124.992, 1e-9);
  EXPECT_NEAR(*r.avg_daily_kwh, 44.16, 1e-12);
}

TEST(CostReport, ZeroEnergy) {
  auto r = cost_report(0, 0.30, 380, false);
  EXPECT_EQ(r.cost, 0);
  EXPECT_EQ(r.co2_kg, 0);
}

TEST(CostReport, LinearInEnergy) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 200; ++i) {
    const double e = std::uniform_real_distribution<double>(0, 1e5)(rng);
    const double p = std::uniform_real_distribution<double>(0, 1)(rng);
    const double c = std::uniform_real_distribution<double>(0, 1000)(rng);
    auto one = cost_report(e, p, c, false), two = cost_report(2 * e, p, c, false);
    EXPECT_NEAR(two.cost, 2 * one.cost, 1e-9 * std::max(1.0, two.cost));
    EXPECT_NEAR(two.co2_kg, 2 * one.co2_kg, 1e-9 * std::max(1.0, two.co2_kg));
  }
}

TEST(CostReport, RejectsNegativeInputs) {
  EXPECT_THROW(cost_report(-1, 0.3, 380, false), std::invalid_argument);
  EXPECT_THROW(cost_report(1, -0.3, 380, false), std::invalid_argument);
}

TEST(ExportLines, GpuLineFormat) {
  MetricsSample s;
  s.gpus.push_back({0, 12000, 24576, 87, 230});
  auto lines = export_lines(s);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "0 flexi_gpu0 mem_used_mb=12000|util_pct=87|power_w=230 GPU 0 OK");
}

TEST(ExportLines, EightGpusGiveNineLines) {
  auto s = server_a_like();
  EXPECT_EQ(export_lines(snapshot(s)).size(), 9u);
}

TEST(ExportLines, StaleGivesOneStatusTwoLine) {
  MetricsSample s;
  s.stale = true;
  auto lines = export_lines(s);
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_EQ(lines[0].rfind("2 ", 0), 0u);
}

TEST(ExportLines, RoundTripsThroughParser) {
  std::mt19937_64 rng(314);
  for (int trial = 0; trial < 500; ++trial) {
    auto s = flexi::testing::random_sample(rng);
    auto parsed = flexi::testing::parse_lines(export_lines(s));
    ASSERT_TRUE(parsed.ok);
    ASSERT_EQ(parsed.gpus.size(), s.gpus.size());
    for (std::size_t i = 0; i < s.gpus.size(); ++i) {
      EXPECT_EQ(parsed.gpus[i].id, s.gpus[i].id);
      EXPECT_EQ(parsed.gpus[i].mem_used_mb, s.gpus[i].mem_used_mb);
      EXPECT_EQ(parsed.gpus[i].util_pct, s.gpus[i].util_pct);
      EXPECT_EQ(parsed.gpus[i].power_w, s.gpus[i].power_w);
    }
    EXPECT_EQ(*parsed.outstanding, s.outstanding_requests);
    EXPECT_EQ(*parsed.models, static_cast<long>(s.loaded_models.size()));
  }
}

TEST(SampleStore, NdjsonRoundTrip) {
  const auto path = temp_path("flexi-store");
  std::filesystem::remove(path);
  std::mt19937_64 rng(2);
  std::vector<MetricsSample> written;
  {
    SampleStore store(path);
    for (int i = 0; i < 20; ++i) {
      auto s = flexi::testing::random_sample(rng);
      s.timestamp = i;
      store.append(s);
      written.push_back(s);
    }
    EXPECT_EQ(store.latest()->timestamp, 19);
  }
  auto back = SampleStore::load_ndjson(path);
  ASSERT_EQ(back.size(), written.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(nlohmann::json(back[i]), nlohmann::json(written[i]));
  }
  std::filesystem::remove(path);
}

TEST(Sampler, AppendsPeriodically) {
  SampleStore store;
  int calls = 0;
  {
    Sampler sampler(
        [&calls](double t) {
          ++calls;
          MetricsSample s;
          s.timestamp = t;
          return std::optional(s);
        },
        [] { return 1.0; }, store, std::chrono::milliseconds(5));
    std::this_thread::sleep_for(std::chrono::milliseconds(60));
  }
  EXPECT_GE(store.all().size(), 3u);
  EXPECT_EQ(store.all().size(), static_cast<std::size_t>(calls));
}
