// SPDX-License-Identifier: Apache-2.0

#include "aligner/engine.hpp"

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <numeric>
#include <thread>

namespace aligner {

std::vector<std::vector<std::size_t>> balance(const std::vector<GenTask>& tasks,
                                              std::size_t n_workers) {
  if (n_workers == 0) throw ContractError("balance: need at least one worker");
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return tasks[a].cost() > tasks[b].cost();
  });
  std::vector<std::vector<std::size_t>> assignment(n_workers);
  std::vector<double> load(n_workers, 0.0);
  for (const auto idx : order) {
    const std::size_t w = static_cast<std::size_t>(
        std::min_element(load.begin(), load.end()) - load.begin());
    assignment[w].push_back(idx);
    load[w] += tasks[idx].cost();
  }
  return assignment;
}

Engine::Engine(const ModelParams& params, const ModelConfig& config, EngineOptions opts)
    : opts_(opts) {
  Stopwatch sw;
  if (!(params.config == config)) {
    throw ContractError("engine build: params config does not match engine config");
  }
  snapshot_ = params.clone();
  for (auto& [name, t] : snapshot_.tensors) t.set_requires_grad(false);
  if (opts_.reshard_for_inference) {
    if (opts_.infer_layout.pp != 1) {
      throw ContractError("engine build: inference layout must be tp-only");
    }
    rebuild_inference_shards();
  }
  build_seconds_ = sw.seconds();
}

void Engine::rebuild_inference_shards() {
  infer_plan_ = plan(snapshot_.config, opts_.infer_layout);
  infer_shards_ = shard(snapshot_, infer_plan_);
}

std::unique_ptr<Engine> build_engine(const ModelParams& params, const ModelConfig& config,
                                     EngineOptions opts) {
  return std::make_unique<Engine>(params, config, opts);
}

void Engine::refit(const ModelParams& new_params) {
  Stopwatch sw;
  // Validate the full name/shape set before touching the snapshot.
  if (new_params.tensors.size() != snapshot_.tensors.size()) {
    throw RefitError("refit: parameter count mismatch: engine has " +
                     std::to_string(snapshot_.tensors.size()) + ", update has " +
                     std::to_string(new_params.tensors.size()) + " (rebuild required)");
  }
  for (const auto& [name, t] : snapshot_.tensors) {
    if (!new_params.has(name)) {
      throw RefitError("refit: missing parameter " + name + " (rebuild required)");
    }
    if (new_params.at(name).shape() != t.shape()) {
      throw RefitError("refit: shape mismatch for " + name + ": engine " + shape_str(t.shape()) +
                       " vs update " + shape_str(new_params.at(name).shape()) +
                       " (rebuild required)");
    }
  }
  std::unique_lock lock(mu_);
  for (auto& [name, t] : snapshot_.tensors) {
    const auto src = new_params.at(name).values();
    auto dst = t.values_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  if (opts_.reshard_for_inference) rebuild_inference_shards();
  ++generation_;
  {
    std::lock_guard cost_lock(costs_mu_);
    costs_.add(timing::kRefit, sw.seconds());
  }
}

CostBook Engine::costs() const {
  std::lock_guard lock(costs_mu_);
  return costs_;
}

namespace {

// Shared work pool: per-worker queues seeded with the LPT plan; an idle
// worker steals the smallest queued task from the most-loaded peer.
class WorkPool {
 public:
  WorkPool(const std::vector<GenTask>& tasks, std::size_t n_workers)
      : tasks_(tasks), queues_(n_workers), remaining_cost_(n_workers, 0.0) {
    const auto assignment = balance(tasks, n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) {
      for (auto idx : assignment[w]) {
        queues_[w].push_back(idx);
        remaining_cost_[w] += tasks[idx].cost();
      }
    }
  }

  bool next(std::size_t worker, std::size_t& out_idx) {
    std::lock_guard lock(mu_);
    if (!queues_[worker].empty()) {
      out_idx = queues_[worker].front();
      queues_[worker].pop_front();
      remaining_cost_[worker] -= tasks_[out_idx].cost();
      return true;
    }
    // Steal from the peer with the most remaining queued work.
    std::size_t victim = worker;
    double most = 0.0;
    for (std::size_t w = 0; w < queues_.size(); ++w) {
      if (w == worker || queues_[w].empty()) continue;
      if (remaining_cost_[w] > most) {
        most = remaining_cost_[w];
        victim = w;
      }
    }
    if (victim == worker) return false;
    out_idx = queues_[victim].back();
    queues_[victim].pop_back();
    remaining_cost_[victim] -= tasks_[out_idx].cost();
    return true;
  }

 private:
  const std::vector<GenTask>& tasks_;
  std::vector<std::deque<std::size_t>> queues_;
  std::vector<double> remaining_cost_;
  std::mutex mu_;
};

}  // namespace

std::vector<GenerateResult> Engine::generate_batch(const std::vector<GenTask>& tasks) {
  std::shared_lock lock(mu_);
  Stopwatch sw;
  std::vector<GenerateResult> results(tasks.size());
  if (tasks.empty()) return results;

  const std::size_t n_workers = std::max<std::size_t>(1, opts_.n_workers);
  WorkPool pool(tasks, n_workers);
  const double token_latency = opts_.simulated_token_latency;
  auto run_worker = [&](std::size_t worker) {
    std::size_t idx = 0;
    while (pool.next(worker, idx)) {
      const auto& task = tasks[idx];
      results[idx] = generate(snapshot_, task.prompt, task.max_new, task.sampling);
      if (token_latency > 0.0) {
        std::this_thread::sleep_for(std::chrono::duration<double>(
            token_latency * static_cast<double>(results[idx].tokens.size())));
      }
    }
  };

  if (n_workers == 1) {
    run_worker(0);
  } else {
    std::vector<std::thread> workers;
    workers.reserve(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) workers.emplace_back(run_worker, w);
    for (auto& t : workers) t.join();
  }
  {
    std::lock_guard cost_lock(costs_mu_);
    costs_.add(timing::kResponseGeneration, sw.seconds());
  }
  return results;
}

}  // namespace aligner
