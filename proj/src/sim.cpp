#include "flexi/sim.hpp"

#include <algorithm>
#include <limits>

namespace flexi::sim {

void GpuSpec::validate() const {
  if (!(vram_gb > 0)) throw ValidationError("vram_gb", "must be > 0");
  if (!(idle_power_w >= 0)) throw ValidationError("idle_power_w", "must be >= 0");
  if (!(max_power_w >= idle_power_w)) {
    throw ValidationError("max_power_w", "must be >= idle_power_w");
  }
}

double Placement::total_gb() const {
  double sum = 0;
  for (const auto& [_, gb] : vram_per_gpu) sum += gb;
  return sum;
}

GpuPool::GpuPool(std::vector<GpuSpec> gpus) : gpus_(std::move(gpus)), reserved_(gpus_.size(), 0.0) {
  for (std::size_t i = 0; i < gpus_.size(); ++i) {
    gpus_[i].validate();
    gpus_[i].id = static_cast<int>(i);
  }
}

double GpuPool::free_gb(int gpu) const { return gpus_.at(gpu).vram_gb - reserved_.at(gpu); }
double GpuPool::reserved_gb(int gpu) const { return reserved_.at(gpu); }

double GpuPool::total_free_gb() const {
  double sum = 0;
  for (std::size_t i = 0; i < gpus_.size(); ++i) sum += free_gb(static_cast<int>(i));
  return sum;
}

void GpuPool::reserve(const Placement& p) {
  for (const auto& [gpu, gb] : p.vram_per_gpu) {
    if (gb > free_gb(gpu)) throw InsufficientMemory("reservation exceeds free VRAM on GPU " +
                                                    std::to_string(gpu));
  }
  for (const auto& [gpu, gb] : p.vram_per_gpu) reserved_.at(gpu) += gb;
}

void GpuPool::release(const Placement& p) {
  for (const auto& [gpu, gb] : p.vram_per_gpu) {
    auto& r = reserved_.at(gpu);
    r -= gb;
    if (r < 1e-9) r = 0;
  }
}

Placement place_model(const ModelCard& card, const GpuPool& pool) {
  const double footprint = card.mem_footprint_gb;
  const int n = static_cast<int>(pool.gpus().size());
  if (footprint <= pool.total_free_gb()) {
    for (int count = 1; count <= n; ++count) {
      const double share = footprint / count;
      std::vector<int> chosen;
      for (int g = 0; g < n && static_cast<int>(chosen.size()) < count; ++g) {
        if (pool.free_gb(g) >= share) chosen.push_back(g);
      }
      if (static_cast<int>(chosen.size()) == count) {
        Placement p{card.name, chosen, {}};
        for (int g : chosen) p.vram_per_gpu[g] = share;
        return p;
      }
    }
  }
  throw InsufficientMemory("cannot place " + card.name + " (" + std::to_string(footprint) +
                           " GB) in " + std::to_string(pool.total_free_gb()) + " GB free");
}

double service_time(const ModelCard& card, long prompt_tokens, long output_tokens,
                    double cold_load_s) {
  if (output_tokens <= 0) throw std::invalid_argument("service_time: output_tokens must be > 0");
  if (prompt_tokens < 0) throw std::invalid_argument("service_time: prompt_tokens must be >= 0");
  const double prompt_rate = kPromptRateFactor * card.throughput_tps;
  return cold_load_s + static_cast<double>(prompt_tokens) / prompt_rate +
         static_cast<double>(output_tokens) / card.throughput_tps;
}

SimServer::SimServer(std::vector<GpuSpec> gpus) : pool_(std::move(gpus)) {}

void SimServer::configure(ModelServing serving) {
  serving.card.validate();
  if (serving.instances < 1) throw ValidationError("instances", "must be >= 1");
  if (serving.parallel < 1) throw ValidationError("parallel", "must be >= 1");
  if (!(serving.cold_load_s >= 0)) throw ValidationError("cold_load_s", "must be >= 0");
  auto key = lowercase(serving.card.name);
  if (!serving_.count(key)) serving_order_.push_back(key);
  serving_.insert_or_assign(key, std::move(serving));
}

const ModelServing* SimServer::serving(const std::string& key) const {
  auto it = serving_.find(key);
  return it == serving_.end() ? nullptr : &it->second;
}

namespace {

int count_fitting(const ModelCard& card, GpuPool pool, int limit) {
  int count = 0;
  while (count < limit) {
    try {
      pool.reserve(place_model(card, pool));
    } catch (const InsufficientMemory&) {
      break;
    }
    ++count;
  }
  return count;
}

}  // namespace

void SimServer::preload() {
  for (const auto& key : serving_order_) {
    const auto& s = serving_.at(key);
    bool resident = std::any_of(instances_.begin(), instances_.end(),
                                [&](const Instance& i) { return i.model == key; });
    if (resident) continue;
    if (count_fitting(s.card, pool_, s.instances) == s.instances) {
      spawn_instances(s.card, s.instances, false);
      last_used_[key] = ++use_counter_;
    }
  }
}

int SimServer::spawn_instances(const ModelCard& card, int limit, bool cold) {
  if (limit < 1) throw std::invalid_argument("spawn_instances: limit must be >= 1");
  const auto key = lowercase(card.name);
  const auto* s = serving(key);
  int spawned = 0;
  while (spawned < limit) {
    Placement p;
    try {
      p = place_model(card, pool_);
    } catch (const InsufficientMemory&) {
      break;
    }
    pool_.reserve(p);
    Instance inst;
    inst.id = next_instance_++;
    inst.model = key;
    inst.placement = std::move(p);
    inst.parallel = s ? s->parallel : 1;
    inst.cold_load_s = s ? s->cold_load_s : 0.0;
    inst.cold = cold && inst.cold_load_s > 0;
    inst.last_update = clock_;
    instances_.push_back(std::move(inst));
    ++spawned;
  }
  if (spawned == 0) {
    throw InsufficientMemory("no instance of " + card.name + " fits in free VRAM");
  }
  if (!s) {
    // Ad-hoc spawns still need a card for service times.
    serving_.emplace(key, ModelServing{card, limit, 1, 0.0});
    serving_order_.push_back(key);
  }
  return spawned;
}

bool SimServer::release_model(const std::string& model) {
  const auto key = lowercase(model);
  for (const auto& inst : instances_) {
    if (inst.model == key && (!inst.queue.empty() || !inst.running.empty())) return false;
  }
  bool any = false;
  for (auto it = instances_.begin(); it != instances_.end();) {
    if (it->model == key) {
      pool_.release(it->placement);
      it = instances_.erase(it);
      any = true;
    } else {
      ++it;
    }
  }
  return any;
}

void SimServer::ensure_resident(const std::string& key) {
  for (const auto& inst : instances_) {
    if (inst.model == key) return;
  }
  const auto& s = serving_.at(key);
  while (count_fitting(s.card, pool_, s.instances) < s.instances) {
    // Evict the least recently used model that has no work.
    std::optional<std::string> victim;
    std::uint64_t oldest = std::numeric_limits<std::uint64_t>::max();
    for (const auto& inst : instances_) {
      const auto used = last_used_[inst.model];
      if (used >= oldest) continue;
      bool idle = std::none_of(instances_.begin(), instances_.end(), [&](const Instance& i) {
        return i.model == inst.model && (!i.queue.empty() || !i.running.empty());
      });
      if (idle) {
        victim = inst.model;
        oldest = used;
      }
    }
    if (!victim) break;
    release_model(*victim);
  }
  spawn_instances(s.card, s.instances, true);
}

SimServer::Instance* SimServer::instance_by_id(int id) {
  for (auto& inst : instances_) {
    if (inst.id == id) return &inst;
  }
  return nullptr;
}

JobId SimServer::submit(const std::string& model, long prompt_tokens, long output_tokens,
                        std::optional<double> timeout) {
  if (output_tokens <= 0) throw std::invalid_argument("submit: output_tokens must be > 0");
  if (prompt_tokens < 0) throw std::invalid_argument("submit: prompt_tokens must be >= 0");
  if (timeout && !(*timeout >= 0)) throw std::invalid_argument("submit: negative timeout");
  const auto key = lowercase(model);
  if (!serving(key)) throw UnknownModel("model not loaded: " + model);
  ensure_resident(key);
  last_used_[key] = ++use_counter_;

  Instance* target = nullptr;
  for (auto& inst : instances_) {
    if (inst.model != key) continue;
    if (!target || inst.queue.size() + inst.running.size() <
                       target->queue.size() + target->running.size()) {
      target = &inst;
    }
  }

  SimJob job;
  job.id = next_job_++;
  job.model = key;
  job.prompt_tokens = prompt_tokens;
  job.output_tokens = output_tokens;
  job.submit_time = clock_;
  if (timeout) job.deadline = clock_ + *timeout;
  job.instance = target->id;
  const auto id = job.id;
  jobs_.emplace(id, std::move(job));
  target->queue.push_back(id);
  start_ready(*target, clock_);
  return id;
}

bool SimServer::cancel(JobId id) {
  auto it = jobs_.find(id);
  if (it == jobs_.end() || it->second.finished()) return false;
  finish(id, JobStatus::Cancelled, clock_);
  return true;
}

void SimServer::settle(Instance& inst, double now) {
  const auto k = static_cast<double>(inst.running.size());
  if (k > 0 && now > inst.last_update) {
    const double elapsed = now - inst.last_update;
    for (auto id : inst.running) progress_.at(id).remaining -= elapsed / k;
  }
  inst.last_update = now;
}

void SimServer::reproject(Instance& inst, double now) {
  const auto k = static_cast<double>(inst.running.size());
  for (auto id : inst.running) {
    auto& p = progress_.at(id);
    p.projected_finish = now + p.remaining * k;
  }
}

void SimServer::start_ready(Instance& inst, double now) {
  if (inst.queue.empty() || static_cast<int>(inst.running.size()) >= inst.parallel) return;
  settle(inst, now);
  const auto& card = serving_.at(inst.model).card;
  while (!inst.queue.empty() && static_cast<int>(inst.running.size()) < inst.parallel) {
    const auto id = inst.queue.front();
    inst.queue.pop_front();
    auto& job = jobs_.at(id);
    job.status = JobStatus::Running;
    job.start_time = now;
    const double cold = inst.cold ? inst.cold_load_s : 0.0;
    inst.cold = false;
    progress_[id] = Progress{service_time(card, job.prompt_tokens, job.output_tokens, cold), 0};
    inst.running.push_back(id);
  }
  reproject(inst, now);
}

void SimServer::finish(JobId id, JobStatus status, double now) {
  auto& job = jobs_.at(id);
  auto* inst = instance_by_id(job.instance);
  if (job.status == JobStatus::Running) {
    settle(*inst, now);
    inst->running.erase(std::find(inst->running.begin(), inst->running.end(), id));
    progress_.erase(id);
    reproject(*inst, now);
  } else {
    inst->queue.erase(std::find(inst->queue.begin(), inst->queue.end(), id));
  }
  job.status = status;
  job.finish_time = now;
  start_ready(*inst, now);
}

std::optional<SimServer::Event> SimServer::next_event() const {
  std::optional<Event> best;
  auto consider = [&](Event e) {
    if (!best || e.time < best->time ||
        (e.time == best->time && (e.job < best->job ||
                                  (e.job == best->job && e.kind < best->kind)))) {
      best = e;
    }
  };
  for (const auto& inst : instances_) {
    for (auto id : inst.running) {
      consider({progress_.at(id).projected_finish, id, EventKind::Completion});
      if (const auto& d = jobs_.at(id).deadline) consider({*d, id, EventKind::Deadline});
    }
    for (auto id : inst.queue) {
      if (const auto& d = jobs_.at(id).deadline) consider({*d, id, EventKind::Deadline});
    }
  }
  return best;
}

std::optional<double> SimServer::next_event_time() const {
  auto e = next_event();
  if (!e) return std::nullopt;
  return e->time;
}

std::vector<SimJob> SimServer::run_until(double t) {
  if (t < clock_) throw std::invalid_argument("run_until: time moves backwards");
  std::vector<SimJob> done;
  while (auto e = next_event()) {
    if (e->time > t) break;
    clock_ = std::max(clock_, e->time);
    finish(e->job, e->kind == EventKind::Completion ? JobStatus::Completed : JobStatus::TimedOut,
           clock_);
    done.push_back(jobs_.at(e->job));
  }
  clock_ = t;
  return done;
}

bool SimServer::gpu_busy(int gpu) const {
  for (const auto& inst : instances_) {
    if (inst.running.empty()) continue;
    if (inst.placement.vram_per_gpu.count(gpu)) return true;
  }
  return false;
}

double SimServer::power_draw() const {
  double watts = 0;
  for (const auto& g : pool_.gpus()) {
    watts += g.idle_power_w + (gpu_busy(g.id) ? g.max_power_w - g.idle_power_w : 0.0);
  }
  return watts;
}

const SimJob& SimServer::job(JobId id) const {
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw std::out_of_range("unknown job " + std::to_string(id));
  return it->second;
}

void SimServer::forget(JobId id) {
  auto it = jobs_.find(id);
  if (it != jobs_.end() && it->second.finished()) jobs_.erase(it);
}

std::vector<InstanceInfo> SimServer::instances() const {
  std::vector<InstanceInfo> out;
  for (const auto& inst : instances_) {
    out.push_back({inst.id, inst.model, inst.placement, inst.queue.size(), inst.running.size()});
  }
  return out;
}

std::vector<std::string> SimServer::loaded_models() const {
  std::vector<std::string> out;
  for (const auto& inst : instances_) {
    if (std::find(out.begin(), out.end(), inst.model) == out.end()) out.push_back(inst.model);
  }
  return out;
}

std::vector<std::string> SimServer::served_models() const { return serving_order_; }

std::optional<ModelCard> SimServer::card(const std::string& model) const {
  const auto* s = serving(lowercase(model));
  if (!s) return std::nullopt;
  return s->card;
}

std::size_t SimServer::jobs_in_system() const {
  std::size_t n = 0;
  for (const auto& inst : instances_) n += inst.queue.size() + inst.running.size();
  return n;
}

}  // namespace flexi::sim
