#include <gtest/gtest.h>

#include <random>

#include "flexi/sim.hpp"
#include "support.hpp"

using namespace flexi;
using namespace flexi::sim;
using flexi::testing::card;

namespace {

std::vector<GpuSpec> gpus(int n, double vram, double max_w = 300, double idle_w = 0) {
  std::vector<GpuSpec> out;
  for (int i = 0; i < n; ++i) out.push_back({i, vram, max_w, idle_w});
  return out;
}

SimServer server_with(const ModelCard& c, int instances, int n_gpus = 2, double vram = 46,
                      int parallel = 1) {
  SimServer s(gpus(n_gpus, vram));
  s.configure({c, instances, parallel, 0});
  s.preload();
  return s;
}

/// Drains every pending event.
std::vector<SimJob> drain(SimServer& s) {
  std::vector<SimJob> out;
  while (auto t = s.next_event_time()) {
    auto done = s.run_until(*t);
    out.insert(out.end(), done.begin(), done.end());
  }
  return out;
}

}  // namespace

TEST(Placement, SmallModelFitsOnFirstGpu) {
  GpuPool pool(gpus(2, 46));
  auto p = place_model(card("m", 10, 3), pool);
  EXPECT_EQ(p.gpu_ids, std::vector<int>{0});
  EXPECT_DOUBLE_EQ(p.vram_per_gpu.at(0), 3);
}

TEST(Placement, LargeModelSpansBothGpusEvenly) {
  GpuPool pool(gpus(2, 46));
  auto p = place_model(card("m", 10, 60), pool);
  EXPECT_EQ(p.gpu_ids, (std::vector<int>{0, 1}));
  EXPECT_DOUBLE_EQ(p.vram_per_gpu.at(0), 30);
  EXPECT_DOUBLE_EQ(p.vram_per_gpu.at(1), 30);
  EXPECT_DOUBLE_EQ(p.total_gb(), 60);
}

TEST(Placement, TooLargeThrows) {
  GpuPool pool(gpus(2, 46));
  EXPECT_THROW(place_model(card("m", 10, 100), pool), InsufficientMemory);
}

TEST(Placement, SkipsFullGpus) {
  GpuPool pool(gpus(3, 24));
  pool.reserve(place_model(card("a", 10, 20), pool));
  auto p = place_model(card("b", 10, 20), pool);
  EXPECT_EQ(p.gpu_ids, std::vector<int>{1});
}

TEST(Spawn, SmallModelUpToLimit) {
  SimServer s(gpus(2, 46));
  EXPECT_EQ(s.spawn_instances(card("m", 10, 3), 30), 30);
  EXPECT_EQ(s.instances().size(), 30u);
}

TEST(Spawn, SecondLargeInstanceDoesNotFit) {
  SimServer s(gpus(2, 46));
  EXPECT_EQ(s.spawn_instances(card("m", 10, 60), 4), 1);
}

TEST(Spawn, LimitOne) {
  SimServer s(gpus(2, 46));
  EXPECT_EQ(s.spawn_instances(card("m", 10, 3), 1), 1);
}

TEST(Spawn, NothingFitsThrows) {
  SimServer s(gpus(2, 46));
  EXPECT_THROW(s.spawn_instances(card("m", 10, 93), 1), InsufficientMemory);
}

TEST(Submit, ShortestQueueWins) {
  auto c = card("m", 100);
  SimServer s = server_with(c, 2);
  // Alternate short jobs onto instance 0 and long ones onto instance 1.
  for (int i = 0; i < 3; ++i) {
    s.submit("m", 0, 10);     // 0.1 s
    s.submit("m", 0, 10000);  // 100 s
  }
  s.run_until(5);
  auto inst = s.instances();
  ASSERT_EQ(inst.size(), 2u);
  EXPECT_EQ(inst[0].queued + inst[0].running, 0u);
  EXPECT_EQ(inst[1].queued + inst[1].running, 3u);
  auto id = s.submit("m", 0, 10);
  EXPECT_EQ(s.job(id).instance, inst[0].id);
}

TEST(Submit, FifoOrderOnOneInstance) {
  SimServer s = server_with(card("m", 50), 1);
  std::vector<JobId> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(s.submit("m", 0, 500));
  drain(s);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(*s.job(ids[i]).start_time, 10.0 * i);
}

TEST(Submit, UnknownModelThrows) {
  SimServer s = server_with(card("m", 50), 1);
  EXPECT_THROW(s.submit("nope", 0, 10), UnknownModel);
  EXPECT_THROW(s.submit("m", 0, 0), std::invalid_argument);
}

TEST(ServiceTime, Phi3Example) {
  auto phi3 = card("phi3", 127);
  EXPECT_NEAR(service_time(phi3, 50, 500), 50.0 / 1270 + 500.0 / 127, 1e-12);
  EXPECT_NEAR(service_time(phi3, 50, 500), 3.98, 0.005);
}

TEST(ServiceTime, MistralExample) {
  EXPECT_NEAR(service_time(card("mistral", 94), 0, 940), 10.0, 1e-12);
}

TEST(ServiceTime, OutputEqualToThroughputIsOneSecond) {
  for (double tps : {5.0, 11.0, 77.0, 127.0}) {
    EXPECT_DOUBLE_EQ(service_time(card("m", tps), 0, static_cast<long>(tps)), 1.0);
  }
}

TEST(ServiceTime, ColdLoadAdds) {
  EXPECT_DOUBLE_EQ(service_time(card("m", 10), 0, 10, 2.5), 3.5);
}

TEST(RunUntil, SerializesOnOneInstance) {
  SimServer s = server_with(card("m", 50), 1);
  auto a = s.submit("m", 0, 500);
  auto b = s.submit("m", 0, 500);
  auto done = s.run_until(25);
  EXPECT_EQ(done.size(), 2u);
  EXPECT_DOUBLE_EQ(*s.job(a).finish_time, 10);
  EXPECT_DOUBLE_EQ(*s.job(b).finish_time, 20);
  EXPECT_DOUBLE_EQ(s.clock(), 25);
}

TEST(RunUntil, ThirtyInstancesRunInParallel) {
  SimServer s = server_with(card("m", 50, 3), 30);
  ASSERT_EQ(s.instances().size(), 30u);
  std::vector<JobId> ids;
  for (int i = 0; i < 30; ++i) ids.push_back(s.submit("m", 0, 500));
  s.run_until(10);
  for (auto id : ids) EXPECT_DOUBLE_EQ(*s.job(id).finish_time, 10);
}

TEST(RunUntil, CommandRPlusQueue) {
  SimServer s = server_with(card("command-r+", 5, 59), 1);
  std::vector<JobId> ids;
  for (int i = 0; i < 10; ++i) ids.push_back(s.submit("command-r+", 0, 500));
  drain(s);
  int over = 0;
  for (int k = 0; k < 10; ++k) {
    EXPECT_DOUBLE_EQ(*s.job(ids[k]).finish_time, 100.0 * (k + 1));
    if (*s.job(ids[k]).finish_time > 300) ++over;
  }
  EXPECT_EQ(over, 7);
}

TEST(RunUntil, BackwardsThrows) {
  SimServer s = server_with(card("m", 50), 1);
  s.run_until(5);
  EXPECT_THROW(s.run_until(4), std::invalid_argument);
}

TEST(Timeout, DeadlineEndsJobExactly) {
  SimServer s = server_with(card("m", 5), 1);
  s.run_until(1.3);
  std::vector<JobId> ids;
  for (int i = 0; i < 5; ++i) ids.push_back(s.submit("m", 0, 500, 300.0));
  drain(s);
  for (int k = 0; k < 5; ++k) {
    const auto& j = s.job(ids[k]);
    if (k < 3) {
      EXPECT_EQ(j.status, JobStatus::Completed);
    } else {
      EXPECT_EQ(j.status, JobStatus::TimedOut);
      EXPECT_DOUBLE_EQ(*j.finish_time, 1.3 + 300.0);
    }
  }
  EXPECT_EQ(s.jobs_in_system(), 0u);
}

TEST(Timeout, CompletionAtDeadlineCountsAsCompleted) {
  SimServer s = server_with(card("m", 5), 1);
  auto id = s.submit("m", 0, 500, 100.0);
  drain(s);
  EXPECT_EQ(s.job(id).status, JobStatus::Completed);
}

TEST(Cancel, FreesInstanceForNextJob) {
  SimServer s = server_with(card("m", 50), 1);
  auto a = s.submit("m", 0, 500);
  auto b = s.submit("m", 0, 500);
  s.run_until(4);
  EXPECT_TRUE(s.cancel(a));
  EXPECT_FALSE(s.cancel(a));
  drain(s);
  EXPECT_EQ(s.job(a).status, JobStatus::Cancelled);
  EXPECT_DOUBLE_EQ(*s.job(b).start_time, 4);
  EXPECT_DOUBLE_EQ(*s.job(b).finish_time, 14);
}

TEST(ProcessorSharing, EqualJobsFinishTogether) {
  SimServer s = server_with(card("m", 50), 1, 2, 46, 2);
  auto a = s.submit("m", 0, 500);
  auto b = s.submit("m", 0, 500);
  drain(s);
  EXPECT_DOUBLE_EQ(*s.job(a).finish_time, 20);
  EXPECT_DOUBLE_EQ(*s.job(b).finish_time, 20);
}

TEST(ProcessorSharing, ShorterJobLeavesFirst) {
  SimServer s = server_with(card("m", 50), 1, 2, 46, 2);
  auto a = s.submit("m", 0, 500);
  auto b = s.submit("m", 0, 1000);
  drain(s);
  EXPECT_DOUBLE_EQ(*s.job(a).finish_time, 20);
  EXPECT_DOUBLE_EQ(*s.job(b).finish_time, 30);
}

TEST(ProcessorSharing, ExtraJobsWaitForSlot) {
  SimServer s = server_with(card("m", 50), 1, 2, 46, 2);
  std::vector<JobId> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(s.submit("m", 0, 500));
  drain(s);
  EXPECT_DOUBLE_EQ(*s.job(ids[2]).start_time, 20);
  EXPECT_DOUBLE_EQ(*s.job(ids[2]).finish_time, 30);
}

TEST(Power, AllBusyIsMaximum) {
  SimServer s(gpus(8, 24, 230, 0));
  s.configure({card("m", 50, 20), 8, 1, 0});
  s.preload();
  ASSERT_EQ(s.instances().size(), 8u);
  EXPECT_DOUBLE_EQ(s.power_draw(), 0);
  for (int i = 0; i < 8; ++i) s.submit("m", 0, 500);
  EXPECT_DOUBLE_EQ(s.power_draw(), 1840);
}

TEST(Power, OneBusyGpu) {
  SimServer s(gpus(8, 24, 230, 0));
  s.configure({card("m", 50, 20), 8, 1, 0});
  s.preload();
  s.submit("m", 0, 500);
  EXPECT_DOUBLE_EQ(s.power_draw(), 230);
  int busy = 0;
  for (int g = 0; g < 8; ++g) busy += s.gpu_busy(g);
  EXPECT_EQ(busy, 1);
  s.run_until(10);
  EXPECT_DOUBLE_EQ(s.power_draw(), 0);
}

TEST(Power, IdleDrawCounts) {
  SimServer s(gpus(2, 46, 300, 20));
  s.configure({card("m", 50, 60), 1, 1, 0});
  s.preload();
  EXPECT_DOUBLE_EQ(s.power_draw(), 40);
  s.submit("m", 0, 500);
  EXPECT_DOUBLE_EQ(s.power_draw(), 600);
}

TEST(Residency, LoadsOnDemandAndEvictsIdle) {
  SimServer s(gpus(2, 46));
  s.configure({card("mixtral", 11, 80), 1, 1, 0});
  s.configure({card("dbrx", 11, 74), 1, 1, 0});
  s.preload();
  EXPECT_EQ(s.loaded_models(), std::vector<std::string>{"mixtral"});
  auto id = s.submit("dbrx", 0, 11);
  EXPECT_EQ(s.loaded_models(), std::vector<std::string>{"dbrx"});
  drain(s);
  EXPECT_EQ(s.job(id).status, JobStatus::Completed);
}

TEST(Residency, BusyModelIsNotEvicted) {
  SimServer s(gpus(2, 46));
  s.configure({card("mixtral", 11, 80), 1, 1, 0});
  s.configure({card("dbrx", 11, 74), 1, 1, 0});
  s.preload();
  s.submit("mixtral", 0, 110);
  EXPECT_THROW(s.submit("dbrx", 0, 11), InsufficientMemory);
  EXPECT_FALSE(s.release_model("mixtral"));
}

TEST(Residency, ColdLoadDelaysFirstJobOnly) {
  SimServer s(gpus(2, 46));
  s.configure({card("a", 10, 80), 1, 1, 0});
  s.configure({card("b", 10, 80), 1, 1, 5.0});
  s.preload();
  auto first = s.submit("b", 0, 10);
  auto second = s.submit("b", 0, 10);
  drain(s);
  EXPECT_DOUBLE_EQ(*s.job(first).finish_time, 6);
  EXPECT_DOUBLE_EQ(*s.job(second).finish_time, 7);
}

// ----------------------------------------------------------- invariants

TEST(SimInvariants, MemoryConservation) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    SimServer s(gpus(2, 46));
    std::vector<std::string> names;
    for (int m = 0; m < 5; ++m) {
      const double mem = std::uniform_real_distribution<double>(0.5, 70)(rng);
      auto c = card("m" + std::to_string(m), 10, mem);
      try {
        s.spawn_instances(c, 1 + static_cast<int>(rng() % 6));
        names.push_back(c.name);
      } catch (const InsufficientMemory&) {
      }
      for (int g = 0; g < 2; ++g) {
        EXPECT_LE(s.pool().reserved_gb(g), 46 + 1e-9);
        EXPECT_GE(s.pool().free_gb(g), -1e-9);
      }
    }
    for (const auto& n : names) EXPECT_TRUE(s.release_model(n));
    for (int g = 0; g < 2; ++g) EXPECT_EQ(s.pool().reserved_gb(g), 0.0);
  }
}

TEST(SimInvariants, WorkConservationAndCausality) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    SimServer s = server_with(card("m", 20), 1 + static_cast<int>(rng() % 3), 2, 46,
                              1 + static_cast<int>(rng() % 2));
    double t = 0;
    std::vector<JobId> ids;
    for (int j = 0; j < 15; ++j) {
      t += std::uniform_real_distribution<double>(0, 10)(rng);
      double last = s.clock();
      s.run_until(t);
      EXPECT_GE(s.clock(), last);
      ids.push_back(s.submit("m", 0, 50 + static_cast<long>(rng() % 400)));
      for (const auto& inst : s.instances()) EXPECT_FALSE(inst.queued > 0 && inst.running == 0);
    }
    while (auto next = s.next_event_time()) {
      double last = s.clock();
      EXPECT_GE(*next, last);
      s.run_until(*next);
      for (const auto& inst : s.instances()) EXPECT_FALSE(inst.queued > 0 && inst.running == 0);
    }
    for (auto id : ids) {
      const auto& j = s.job(id);
      ASSERT_TRUE(j.start_time && j.finish_time);
      EXPECT_GE(*j.start_time, j.submit_time);
      EXPECT_GT(*j.finish_time, *j.start_time);
    }
  }
}

TEST(SimInvariants, Determinism) {
  auto trace = [] {
    std::mt19937_64 rng(1234);
    SimServer s = server_with(card("m", 20), 3);
    std::vector<std::tuple<JobId, double, double, int>> out;
    for (int j = 0; j < 40; ++j) {
      s.run_until(s.clock() + std::uniform_real_distribution<double>(0, 5)(rng));
      s.submit("m", 0, 20 + static_cast<long>(rng() % 300),
               std::optional<double>(rng() % 2 ? 30.0 : 300.0));
    }
    for (auto& job : drain(s)) {
      out.emplace_back(job.id, job.start_time.value_or(-1.0), *job.finish_time, job.instance);
    }
    return out;
  };
  EXPECT_EQ(trace(), trace());
}

TEST(SimInvariants, SingleInstanceLatencyGrowsWithLoad) {
  double prev = 0;
  for (int n : {1, 2, 5, 10, 30}) {
    SimServer s = server_with(card("m", 50), 1);
    std::vector<JobId> ids;
    for (int i = 0; i < n; ++i) ids.push_back(s.submit("m", 5, 500));
    drain(s);
    double sum = 0;
    for (auto id : ids) sum += *s.job(id).finish_time - s.job(id).submit_time;
    const double mean = sum / n;
    EXPECT_GE(mean, prev);
    prev = mean;
  }
}

TEST(SimInvariants, MatchesBruteForceFifo) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    const int instances = 1 + static_cast<int>(rng() % 3);
    const int n = 1 + static_cast<int>(rng() % 10);
    const double tps = std::uniform_real_distribution<double>(3, 130)(rng);
    auto c = card("m", tps);
    SimServer s = server_with(c, instances);
    std::vector<flexi::testing::OracleJob> jobs;
    std::vector<JobId> ids;
    double t = 0;
    for (int j = 0; j < n; ++j) {
      // Integral gaps make coincident arrivals and completions common.
      if (rng() % 3) t += static_cast<double>(rng() % 20);
      const long prompt = static_cast<long>(rng() % 200);
      const long out = 1 + static_cast<long>(rng() % 600);
      s.run_until(t);
      ids.push_back(s.submit("m", prompt, out));
      jobs.push_back({t, prompt / (10.0 * tps) + out / tps});
    }
    drain(s);
    auto expected = flexi::testing::fifo_oracle(jobs, instances);
    for (int j = 0; j < n; ++j) {
      ASSERT_EQ(*s.job(ids[j]).finish_time, expected[j]) << "trial " << trial << " job " << j;
    }
  }
}
