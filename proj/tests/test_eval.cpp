#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>
#include <string>

#include "asmr/eval.hpp"
#include "asmr/rng.hpp"
#include "doctest.h"

using namespace asmr;
using namespace asmr::eval;
namespace fs = std::filesystem;

namespace {

tasks::TaskPtr small_task(std::uint64_t seed = 5, int depth = 2) {
  return std::make_shared<const tasks::TaskInstance>(
      tasks::instantiate(tasks::sample_task(tasks::TaskKind::Laplace, seed), depth, {0.25, ""}));
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "asmr_test_eval";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Brute-force point location: first element whose barycentric coordinates
// are all >= -1e-12.
double eval_brute(const fem::FemSolution& sol, Point2 p) {
  const auto& m = *sol.mesh;
  for (int t = 0; t < static_cast<int>(m.num_elements()); ++t) {
    const auto c = m.corners(t);
    const double det = (c[1].x - c[0].x) * (c[2].y - c[0].y) - (c[2].x - c[0].x) * (c[1].y - c[0].y);
    const double l1 = ((p.x - c[0].x) * (c[2].y - c[0].y) - (c[2].x - c[0].x) * (p.y - c[0].y)) / det;
    const double l2 = ((c[1].x - c[0].x) * (p.y - c[0].y) - (p.x - c[0].x) * (c[1].y - c[0].y)) / det;
    const double l0 = 1.0 - l1 - l2;
    if (l0 >= -1e-12 && l1 >= -1e-12 && l2 >= -1e-12) {
      const auto& tri = m.triangle(t);
      return l0 * sol.nodal_values[tri[0]] + l1 * sol.nodal_values[tri[1]] + l2 * sol.nodal_values[tri[2]];
    }
  }
  throw std::runtime_error("point outside mesh");
}

std::array<double, 3> brute_raw(const fem::FemSolution& sol, const tasks::TaskInstance& task) {
  const auto& ref = *task.reference;
  std::vector<double> diff;
  double sq = 0.0, mean = 0.0;
  for (std::size_t p = 0; p < ref.num_points(); ++p) {
    const double d = std::abs(ref.values()[p] - eval_brute(sol, ref.points()[p]));
    diff.push_back(d);
    sq += ref.volumes()[p] * d * d;
    mean += ref.volumes()[p] * d;
  }
  std::sort(diff.rbegin(), diff.rend());
  const std::size_t k = std::max<std::size_t>(1, diff.size() / 1000);
  double top = 0.0;
  for (std::size_t i = 0; i < k; ++i) top += diff[i];
  return {sq, mean, top / static_cast<double>(k)};
}

bool rel_close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(std::abs(b), 1e-300); }

policy::Checkpoint small_checkpoint(std::uint64_t seed = 3) {
  policy::Checkpoint ck;
  ck.config.latent_dim = 8;
  const policy::Mpn net(ck.config);
  Rng rng = Rng::stream(seed, {1});
  ck.params = net.init_params(rng);
  env::EnvConfig env;
  env.horizon = 2;
  train::TrainConfig tc;
  tc.env = env;
  ck.training = train::to_json(tc);
  return ck;
}

}  // namespace

TEST_CASE("raw errors on hand-made differences") {
  const std::vector<double> diff{0.5, 1.0, 2.0};
  const std::vector<double> vol{0.25, 0.25, 0.5};
  const auto r = raw_errors(diff, vol);
  CHECK(r.squared == doctest::Approx(0.25 * 0.25 + 0.25 * 1.0 + 0.5 * 4.0).epsilon(1e-15));
  CHECK(r.mean == doctest::Approx(0.125 + 0.25 + 1.0).epsilon(1e-15));
  CHECK(r.top == 2.0);  // 0.1% of 3 points rounds up to one point

  std::vector<double> many(5000), vols(5000, 1.0);
  std::iota(many.begin(), many.end(), 0.0);
  CHECK(raw_errors(many, vols).top == doctest::Approx((4999.0 + 4998.0 + 4997.0 + 4996.0 + 4995.0) / 5.0));
  CHECK_THROWS_AS(raw_errors(diff, std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("initial mesh scores exactly one and the reference mesh scores zero") {
  const auto task = small_task();
  const auto m0 = mesh_metrics(task->initial_solution, *task);
  CHECK(m0.element_count == static_cast<int>(task->initial_mesh->num_elements()));
  CHECK(m0.squared_error == 1.0);
  CHECK(m0.mean_error == 1.0);
  CHECK(m0.top_error == 1.0);

  const auto ref = mesh_metrics(task->reference->solution(), *task);
  CHECK(ref.squared_error <= 1e-8);
  CHECK(ref.mean_error >= 0.0);
  CHECK(ref.top_error >= 0.0);
}

TEST_CASE("metrics match a brute-force recomputation") {
  for (std::uint64_t seed : {5u, 9u, 13u}) {
    const auto task = small_task(seed);
    const auto base = brute_raw(task->initial_solution, *task);
    Rng rng = Rng::stream(seed, {7});
    mesh::MeshPtr m = task->initial_mesh;
    for (int step = 0; step < 2; ++step) {
      std::vector<bool> marks(m->num_elements());
      for (std::size_t i = 0; i < marks.size(); ++i) marks[i] = rng.bernoulli(0.3);
      m = mesh::refine_rgb(m, marks).child_mesh;
    }
    REQUIRE(m->num_elements() <= 500);
    const auto sol = fem::assemble_and_solve(task->problem, m);
    const auto cur = brute_raw(sol, *task);
    for (Exec exec : {Exec::Serial, Exec::Parallel}) {
      const auto met = mesh_metrics(sol, *task, exec);
      CHECK(met.element_count == static_cast<int>(m->num_elements()));
      CHECK(rel_close(met.squared_error, cur[0] / base[0], 1e-12));
      CHECK(rel_close(met.mean_error, cur[1] / base[1], 1e-12));
      CHECK(rel_close(met.top_error, cur[2] / base[2], 1e-12));
    }
  }
}

TEST_CASE("interquartile mean") {
  CHECK(iqm({0, 1, 2, 100}) == doctest::Approx(1.5));
  CHECK(iqm({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}) == doctest::Approx(6.5));
  CHECK(iqm({7}) == 7.0);
  CHECK(iqm({1, 2, 3, 4, 5}) == doctest::Approx(3.0));  // weights 0.25, 1, 1, 1, 0.25 over [1.25, 3.75]
  CHECK_THROWS_AS(iqm({}), std::invalid_argument);

  Rng rng = Rng::stream(11, {});
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(40));
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.normal() * 10.0;
    const double q = iqm(v);
    std::vector<double> s = v;
    std::sort(s.begin(), s.end());
    CHECK(q >= s.front() - 1e-12);
    CHECK(q <= s.back() + 1e-12);
    std::reverse(v.begin(), v.end());
    std::rotate(v.begin(), v.begin() + n / 3, v.end());
    CHECK(iqm(v) == doctest::Approx(q).epsilon(1e-14));
  }
}

TEST_CASE("spearman and log spacing") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> b{10, 20, 25, 100, 1000};
  const std::vector<double> c{5, 4, 3, 2, 1};
  CHECK(spearman(a, b) == doctest::Approx(1.0));
  CHECK(spearman(a, c) == doctest::Approx(-1.0));
  const std::vector<double> tied{1, 1, 2, 2, 3};
  CHECK(spearman(tied, a) > 0.9);
  CHECK_THROWS_AS(spearman(a, std::vector<double>{1.0}), std::invalid_argument);

  const auto g = log_space(1e-3, 1e-1, 5);
  REQUIRE(g.size() == 5);
  CHECK(g.front() == 1e-3);
  CHECK(g.back() == 1e-1);
  CHECK(g[2] == doctest::Approx(1e-2).epsilon(1e-14));
  for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] / g[i - 1] == doctest::Approx(std::sqrt(10.0)));
  CHECK_THROWS_AS(log_space(0.0, 1.0, 3), std::invalid_argument);
}

TEST_CASE("aggregation and outlier filter") {
  std::vector<RunRecord> runs(4);
  for (int i = 0; i < 4; ++i) {
    runs[static_cast<std::size_t>(i)].metrics = {10 * (i + 1), 0.1 * (i + 1), 0.2, 0.3};
    runs[static_cast<std::size_t>(i)].termination = "horizon";
  }
  runs[3].metrics.element_count = 100000;
  runs[3].termination = "cap";
  const auto all = aggregate("asmr", 1, 0.01, runs, false);
  CHECK(all.runs == 4);
  CHECK(all.iqm_elements == doctest::Approx(25.0));
  const auto kept = aggregate("asmr", 1, 0.01, runs, true);
  CHECK(kept.runs == 3);
  CHECK(kept.iqm_elements == doctest::Approx(20.0));
  CHECK(kept.iqm_squared == doctest::Approx(0.2));
}

TEST_CASE("pareto CSV round trip") {
  std::vector<ParetoPoint> pts;
  pts.push_back({"asmr", 3, 1e-3, 10, 123.25, 0.0123456789012345, 0.1 / 3.0, 2.0 / 7.0});
  pts.push_back({"asmr", 3, 0.0031622776601683794, 10, 48.0, 1.0, 1.0, 1.0});
  pts.push_back({"oracle", 0, 0.5, 9, 400.5, 1e-300, 5e-17, 0.75});
  const auto path = scratch("pareto.csv").string();
  write_pareto_csv(path, pts);
  const auto back = read_pareto_csv(path);
  CHECK(back == pts);

  std::ifstream in(path);
  std::string line;
  int rows = 0;
  std::getline(in, line);
  CHECK(line == "method,seed,parameter,metric,runs,iqm_elements,iqm_error");
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 9);  // one row per (parameter, metric)
}

TEST_CASE("front interpolation in log-log space") {
  std::vector<ParetoPoint> front(3);
  front[0].iqm_elements = 10;
  front[0].iqm_squared = 1.0;
  front[1].iqm_elements = 40;
  front[1].iqm_squared = 0.25;
  front[2].iqm_elements = 160;
  front[2].iqm_squared = 0.0;
  CHECK(interpolate_front(front, 10) == doctest::Approx(1.0));
  CHECK(interpolate_front(front, 20) == doctest::Approx(0.5));  // slope -1 in log-log
  CHECK(interpolate_front(front, 40) == doctest::Approx(0.25));
  CHECK(std::isnan(interpolate_front(front, 5)));
  CHECK(std::isnan(interpolate_front(front, 100)));  // zero error endpoint
  CHECK(std::isnan(interpolate_front(front, 1000)));
}

TEST_CASE("uniform sweep levels") {
  const std::vector<tasks::TaskPtr> ts{small_task(5), small_task(6)};
  const auto res = uniform_sweep(ts, 2);
  REQUIRE(res.points.size() == 3);
  REQUIRE(res.runs.size() == 6);
  CHECK(res.points[0].iqm_squared == 1.0);
  CHECK(res.points[1].iqm_elements == doctest::Approx(4.0 * res.points[0].iqm_elements));
  CHECK(res.points[1].iqm_squared < 1.0);
  CHECK(res.points[2].iqm_squared <= 1e-8);  // level R is the reference itself
  CHECK(res.runs[1].task_index == 1);
  CHECK(res.runs[2].parameter == 1.0);
}

TEST_CASE("policy sweeps") {
  const auto ck = small_checkpoint();
  const std::vector<tasks::TaskPtr> ts{small_task(5), small_task(6), small_task(7)};
  const auto envcfg = env_config_for(ck);
  CHECK(envcfg.horizon == 2);
  CHECK(env_config_for(ck, 3).horizon == 3);

  SUBCASE("single alpha and task equals the rollout") {
    const auto res = pareto_sweep(ck, {ts[0]}, envcfg, {0.01});
    const auto roll = rollout_policy(ck, ts[0], envcfg, 0.01);
    REQUIRE(res.points.size() == 1);
    CHECK(res.points[0].runs == 1);
    CHECK(res.points[0].iqm_elements == roll.metrics.element_count);
    CHECK(res.points[0].iqm_squared == roll.metrics.squared_error);
    CHECK(res.points[0].iqm_mean == roll.metrics.mean_error);
    CHECK(res.points[0].iqm_top == roll.metrics.top_error);
    CHECK(static_cast<int>(roll.trace.size()) == envcfg.horizon);
    CHECK(roll.trace.back().new_elements == roll.metrics.element_count);
  }

  SUBCASE("repeat sweeps write identical CSV") {
    const auto alphas = log_space(1e-3, 1e-1, 3);
    const auto a = pareto_sweep(ck, ts, envcfg, alphas, {.workers = 1});
    const auto b = pareto_sweep(ck, ts, envcfg, alphas, {.workers = 3});
    const auto pa = scratch("sweep_a.csv"), pb = scratch("sweep_b.csv");
    write_pareto_csv(pa.string(), a.points);
    write_pareto_csv(pb.string(), b.points);
    CHECK(slurp(pa) == slurp(pb));
    CHECK(a.runs.size() == 9);
  }
}

TEST_CASE("baseline sweep carries the heuristic name") {
  const std::vector<tasks::TaskPtr> ts{small_task(5)};
  const auto res = baseline_sweep(ts, {.kind = baselines::HeuristicKind::Oracle, .steps = 2}, {0.3, 0.9});
  REQUIRE(res.points.size() == 2);
  CHECK(res.points[0].method == "oracle");
  CHECK(res.points[0].iqm_elements >= res.points[1].iqm_elements);
  CHECK(res.points[0].iqm_squared <= 1.0);
}

TEST_CASE("svg rendering") {
  const auto m = std::make_shared<const mesh::TriMesh>(
      std::vector<Point2>{{0, 0}, {1, 0}, {1, 1}, {0, 1}}, std::vector<mesh::Triangle>{{0, 1, 2}, {0, 2, 3}},
      std::vector<mesh::BoundaryEdge>{{0, 1, 0}, {1, 2, 0}, {2, 3, 0}, {0, 3, 0}});
  const std::vector<double> v{0.0, 1.0};
  const auto p1 = scratch("a.svg"), p2 = scratch("b.svg");
  render_mesh_svg(*m, v, p1.string());
  render_mesh_svg(*m, v, p2.string());
  const std::string s = slurp(p1);
  CHECK(s == slurp(p2));
  std::size_t count = 0;
  for (std::size_t pos = s.find("<polygon"); pos != std::string::npos; pos = s.find("<polygon", pos + 1)) ++count;
  CHECK(count == 2);
  CHECK(s.find("<svg") != std::string::npos);
  CHECK(s.rfind("</svg>") != std::string::npos);

  CHECK_THROWS_AS(render_mesh_svg(*m, v, "/nonexistent_dir/x.svg"), std::runtime_error);
  CHECK_THROWS_AS(render_mesh_svg(*m, std::vector<double>{1.0}, p1.string()), std::invalid_argument);

  const auto task = small_task();
  const auto p3 = scratch("sol.svg");
  render_solution_svg(task->initial_solution, p3.string());
  const std::string t = slurp(p3);
  count = 0;
  for (std::size_t pos = t.find("<polygon"); pos != std::string::npos; pos = t.find("<polygon", pos + 1)) ++count;
  CHECK(count == task->initial_mesh->num_elements());
}
