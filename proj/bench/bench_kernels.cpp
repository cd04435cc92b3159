// Serial reference implementations against their OpenMP counterparts.

#include <benchmark/benchmark.h>
#include <omp.h>

#include "asmr/baselines.hpp"
#include "asmr/eval.hpp"
#include "asmr/fem.hpp"
#include "asmr/reference.hpp"
#include "asmr/tasks.hpp"

using namespace asmr;

namespace {

const tasks::TaskPtr& task() {
  static const tasks::TaskPtr t = std::make_shared<const tasks::TaskInstance>(
      tasks::instantiate(tasks::sample_task(tasks::TaskKind::Poisson, 4), 3, {0.1, ""}));
  return t;
}

// The initial mesh refined once near the load, as a mid-episode mesh.
const fem::FemSolution& mid_solution() {
  static const fem::FemSolution sol = [] {
    const auto& t = *task();
    const auto est = baselines::oracle_error_estimate(t.initial_solution, t, baselines::OracleVariant::Integrated);
    const auto m = mesh::refine_rgb(t.initial_mesh, baselines::threshold_marks(est, 0.2)).child_mesh;
    return fem::assemble_and_solve(t.problem, m);
  }();
  return sol;
}

Exec exec_of(const benchmark::State& s) { return s.range(0) ? Exec::Parallel : Exec::Serial; }

void label(benchmark::State& s) { s.SetLabel(s.range(0) ? "parallel" : "serial"); }

void BM_Assembly(benchmark::State& s) {
  const auto& m = *task()->reference_mesh();
  for (auto _ : s) benchmark::DoNotOptimize(fem::assemble_stiffness(m, exec_of(s)));
  s.counters["elements"] = static_cast<double>(m.num_elements());
  label(s);
}

void BM_Assignment(benchmark::State& s) {
  const auto& sol = mid_solution();
  for (auto _ : s) benchmark::DoNotOptimize(reference::assign_points(*sol.mesh, *task()->reference, exec_of(s)));
  s.counters["points"] = static_cast<double>(task()->reference->num_points());
  label(s);
}

void BM_Comparison(benchmark::State& s) {
  const auto& sol = mid_solution();
  for (auto _ : s) benchmark::DoNotOptimize(reference::compare_to_reference(sol, *task()->reference, exec_of(s)));
  label(s);
}

void BM_Zz(benchmark::State& s) {
  const auto& sol = task()->reference->solution();
  for (auto _ : s) benchmark::DoNotOptimize(baselines::zz_error_estimate(sol, exec_of(s)));
  s.counters["elements"] = static_cast<double>(sol.mesh->num_elements());
  label(s);
}

// Heuristic rollouts across tasks: one worker versus all threads.
void BM_BaselineSweep(benchmark::State& s) {
  static const std::vector<tasks::TaskPtr> ts = [] {
    std::vector<tasks::TaskPtr> v;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      v.push_back(std::make_shared<const tasks::TaskInstance>(
          tasks::instantiate(tasks::sample_task(tasks::TaskKind::Laplace, seed), 3, {0.25, ""})));
    }
    return v;
  }();
  const int workers = s.range(0) ? std::max(1, omp_get_max_threads()) : 1;
  for (auto _ : s) {
    benchmark::DoNotOptimize(
        eval::baseline_sweep(ts, {.kind = baselines::HeuristicKind::Oracle, .steps = 3}, {0.3, 0.6}, {.workers = workers}));
  }
  s.counters["workers"] = workers;
  label(s);
}

}  // namespace

BENCHMARK(BM_Assembly)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Assignment)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Comparison)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Zz)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BaselineSweep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
