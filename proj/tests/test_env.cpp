#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "asmr/env.hpp"

using namespace asmr;
using namespace asmr::env;

namespace {

tasks::TaskPtr small_task(tasks::TaskKind kind = tasks::TaskKind::Laplace, int depth = 3, std::uint64_t seed = 5) {
  return std::make_shared<const tasks::TaskInstance>(
      tasks::instantiate(tasks::sample_task(kind, seed), depth, {0.25, ""}));
}

EnvConfig config(int horizon) {
  EnvConfig c;
  c.horizon = horizon;
  return c;
}

}  // namespace

TEST_CASE("alpha sampling") {
  const auto task = small_task();
  SUBCASE("degenerate range") {
    EnvConfig c = config(2);
    c.alpha_min = c.alpha_max = 0.02;
    Rng rng(1);
    for (int i = 0; i < 5; ++i) CHECK(reset(task, c, rng).alpha == 0.02);
  }
  SUBCASE("log-uniform draws pass a Kolmogorov-Smirnov test") {
    Rng rng(2);
    const double lo = std::log(1e-4), hi = std::log(1e-1);
    std::vector<double> u;
    for (int i = 0; i < 10000; ++i) u.push_back((std::log(rng.log_uniform(1e-4, 1e-1)) - lo) / (hi - lo));
    std::sort(u.begin(), u.end());
    double d = 0.0;
    const double n = static_cast<double>(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      d = std::max({d, (static_cast<double>(i) + 1) / n - u[i], u[i] - static_cast<double>(i) / n});
    }
    // Asymptotic critical value for p = 0.01.
    CHECK(d < 1.628 / std::sqrt(n));
  }
  SUBCASE("reset is deterministic") {
    Rng a(9), b(9);
    const auto s1 = reset(task, config(2), a);
    const auto s2 = reset(task, config(2), b);
    CHECK(s1.alpha == s2.alpha);
    CHECK(build_observation(s1).node_features == build_observation(s2).node_features);
  }
}

TEST_CASE("initial errors are normalized to sum to one") {
  for (auto kind : {tasks::TaskKind::Laplace, tasks::TaskKind::Poisson}) {
    const auto task = small_task(kind);
    const auto s = reset_with_alpha(task, config(3), 0.01);
    double total = 0.0;
    for (double e : s.errors.max) {
      CHECK(e >= 0.0);
      CHECK(std::isfinite(e));
      total += e;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    double integrated = 0.0;
    for (double e : s.errors.integrated) integrated += e;
    CHECK(integrated == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("errors on the reference mesh vanish") {
  const auto task = small_task();
  const auto e = compute_element_errors(task->reference->solution(), *task);
  for (double v : e.max) CHECK(v <= 1e-9);
}

TEST_CASE("max reward examples") {
  const std::vector<int> parents{0, 0, 0, 0, 1};
  SUBCASE("error reduction minus penalty") {
    const auto r = max_rewards(std::vector<double>{0.1, 0.2}, std::vector<double>{0.04, 0.01, 0.02, 0.03, 0.5},
                               parents, 0.01);
    CHECK(std::abs(r(0) - 0.03) <= 1e-12);
    CHECK(r(1) == 0.0);
  }
  SUBCASE("pure penalty") {
    const auto r = max_rewards(std::vector<double>{0.1, 0.2}, std::vector<double>{0.1, 0.01, 0.1, 0.03, 0.2},
                               parents, 0.01);
    CHECK(std::abs(r(0) + 0.03) <= 1e-12);
  }
  SUBCASE("unrefined elements get exactly zero even if their error changed") {
    const auto r = max_rewards(std::vector<double>{0.1, 0.2}, std::vector<double>{0.0, 0.0, 0.0, 0.0, 0.05},
                               parents, 0.5);
    CHECK(r(1) == 0.0);
  }
  SUBCASE("volume variant") {
    const auto r = volume_rewards(std::vector<double>{0.1, 0.2}, std::vector<double>{0.01, 0.02, 0.0, 0.01, 0.3},
                                  parents, std::vector<double>{0.5, 0.25}, 0.01);
    CHECK(std::abs(r(0) - ((0.1 - 0.04) / 0.5 - 0.03)) <= 1e-12);
    CHECK(r(1) == 0.0);
  }
  CHECK_THROWS_AS(max_rewards(std::vector<double>{0.1}, std::vector<double>{0.1, 0.1}, std::vector<int>{0}, 0.1),
                  std::invalid_argument);
}

TEST_CASE("step rewards agree with an independent recomputation") {
  const auto task = small_task(tasks::TaskKind::Poisson);
  auto s = reset_with_alpha(task, config(3), 0.003);
  Rng rng(4);
  for (int t = 0; t < 3; ++t) {
    std::vector<bool> actions(s.mesh->num_elements());
    for (std::size_t i = 0; i < actions.size(); ++i) actions[i] = rng.bernoulli(0.3);
    const auto old_errors = s.errors.max;
    const auto old_mesh = s.mesh;
    const auto out = step(s, actions);
    REQUIRE(out.rewards.size() == static_cast<Eigen::Index>(old_mesh->num_elements()));
    REQUIRE(out.mapping.rows() == static_cast<int>(old_mesh->num_elements()));
    REQUIRE(out.mapping.cols() == static_cast<int>(s.mesh->num_elements()));
    // Children from the mapping's sparsity pattern.
    double expected = 0.0;
    for (int i = 0; i < out.mapping.rows(); ++i) {
      double mx = 0.0;
      int count = 0;
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(out.mapping.matrix, i); it; ++it) {
        mx = std::max(mx, s.errors.max[static_cast<std::size_t>(it.col())]);
        ++count;
      }
      const double r = count == 1 ? 0.0 : old_errors[static_cast<std::size_t>(i)] - mx - 0.003 * (count - 1);
      CHECK(out.rewards(i) == doctest::Approx(r).epsilon(1e-12));
      expected += r;
    }
    CHECK(out.rewards.sum() == doctest::Approx(expected).epsilon(1e-10));
  }
  CHECK(s.done);
  CHECK_THROWS_AS(step(s, std::vector<bool>(s.mesh->num_elements(), false)), std::logic_error);
}

TEST_CASE("no-op episode") {
  const auto task = small_task();
  auto s = reset_with_alpha(task, config(3), 0.01);
  for (int t = 0; t < 3; ++t) {
    const auto out = step(s, std::vector<bool>(s.mesh->num_elements(), false));
    CHECK(out.rewards.cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(s.mesh->triangles() == task->initial_mesh->triangles());
  CHECK(s.mesh->vertices() == task->initial_mesh->vertices());
}

TEST_CASE("refining everything for R steps reconstructs the reference") {
  const auto task = small_task(tasks::TaskKind::Poisson, 3);
  auto s = reset_with_alpha(task, config(3), 0.01);
  env::StepOutcome out;
  while (!s.done) out = step(s, std::vector<bool>(s.mesh->num_elements(), true));
  CHECK(out.info.termination == Termination::Horizon);
  CHECK(s.mesh->triangles() == task->reference_mesh()->triangles());
  CHECK(s.mesh->vertices() == task->reference_mesh()->vertices());
  for (double e : s.errors.max) CHECK(e <= 1e-9);
}

TEST_CASE("element cap breach terminates with the penalty") {
  const auto task = small_task();
  EnvConfig c = config(4);
  c.element_cap = static_cast<int>(task->initial_mesh->num_elements()) * 3;
  auto s = reset_with_alpha(task, c, 0.01);
  const auto out = step(s, std::vector<bool>(s.mesh->num_elements(), true));
  CHECK(out.done);
  CHECK(s.done);
  CHECK(out.info.termination == Termination::Cap);
  CHECK(out.rewards.size() == static_cast<Eigen::Index>(task->initial_mesh->num_elements()));
  CHECK((out.rewards.array() == -1000.0).all());
}

TEST_CASE("observation graph structure") {
  const auto task = small_task();
  const auto s = reset_with_alpha(task, config(4), 0.01);
  const auto g = build_observation(s);
  CHECK(g.num_nodes() == static_cast<int>(s.mesh->num_elements()));
  int interior = 0;
  for (int c : s.mesh->edge_use_count()) interior += (c == 2);
  CHECK(g.num_edges() == 2 * interior);
  std::set<std::pair<int, int>> directed;
  for (int k = 0; k < g.num_edges(); ++k) directed.insert({g.edges[static_cast<std::size_t>(k)][0], g.edges[static_cast<std::size_t>(k)][1]});
  for (int k = 0; k < g.num_edges(); ++k) {
    const auto [a, b] = g.edges[static_cast<std::size_t>(k)];
    CHECK(directed.contains({b, a}));
  }
  CHECK(g.edge_features.rows() == g.num_edges());
  for (int i = 0; i < g.num_nodes(); ++i) {
    CHECK(g.node_features(i, 3) == 0.0);
    CHECK(g.node_features(i, 4) == doctest::Approx(-2.0));
  }
}

TEST_CASE("constant solutions give zero std and the constant mean") {
  const auto task = small_task();
  fem::FemSolution sol{task->initial_mesh, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(task->initial_mesh->num_vertices()), 0.7)};
  const std::vector<double> feats(task->initial_mesh->num_elements(), 0.0);
  const auto g = build_graph(sol, feats, 0.5, 0.1);
  CHECK((g.node_features.col(1).array() == 0.0).all());
  CHECK((g.node_features.col(0).array() - 0.7).abs().maxCoeff() <= 1e-15);
}

TEST_CASE("observations are invariant under rigid motions and equivariant under relabeling") {
  const auto task = small_task(tasks::TaskKind::Poisson);
  const auto& m = *task->initial_mesh;
  const auto& sol = task->initial_solution;
  std::vector<double> feats(m.num_elements());
  for (std::size_t t = 0; t < feats.size(); ++t) feats[t] = tasks::task_feature(task->spec, m.element_midpoints()[t]);
  const auto base = build_graph(sol, feats, 0.25, 0.01);

  for (const auto& [angle, shift] : std::vector<std::pair<double, Point2>>{{0.0, {10, 10}}, {0.7, {-3, 2}}, {std::numbers::pi, {0, 0}}}) {
    const auto moved = std::make_shared<const mesh::TriMesh>(mesh::transformed(m, angle, shift));
    const auto g = build_graph({moved, sol.nodal_values}, feats, 0.25, 0.01);
    CHECK((g.node_features - base.node_features).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((g.edge_features - base.edge_features).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK(g.edges == base.edges);
  }

  // Reverse the element order.
  std::vector<mesh::Triangle> tris(m.triangles().rbegin(), m.triangles().rend());
  const auto relabeled = std::make_shared<const mesh::TriMesh>(m.vertices(), tris, m.boundary_edges());
  std::vector<double> rfeats(feats.rbegin(), feats.rend());
  const auto g = build_graph({relabeled, sol.nodal_values}, rfeats, 0.25, 0.01);
  const int n = g.num_nodes();
  for (int i = 0; i < n; ++i) CHECK(g.node_features.row(i) == base.node_features.row(n - 1 - i));
  std::multiset<std::tuple<int, int, double>> a, b;
  for (int k = 0; k < g.num_edges(); ++k) {
    const auto e = g.edges[static_cast<std::size_t>(k)];
    a.insert({n - 1 - e[0], n - 1 - e[1], g.edge_features(k, 0)});
    const auto f = base.edges[static_cast<std::size_t>(k)];
    b.insert({f[0], f[1], base.edge_features(k, 0)});
  }
  CHECK(a == b);
}

TEST_CASE("episodes are deterministic and traces are written") {
  const auto task = small_task(tasks::TaskKind::Poisson);
  auto run = [&](std::vector<TraceRow>& rows) {
    Rng rng(17);
    auto s = reset(task, config(3), rng);
    Rng act(3);
    std::vector<Eigen::VectorXd> rewards;
    while (!s.done) {
      std::vector<bool> a(s.mesh->num_elements());
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = act.bernoulli(0.2);
      const auto out = step(s, a);
      rows.push_back(trace_row(s.t - 1, s.alpha, out));
      rewards.push_back(out.rewards);
    }
    return rewards;
  };
  std::vector<TraceRow> r1, r2;
  const auto a = run(r1);
  const auto b = run(r2);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  const auto path = std::filesystem::temp_directory_path() / "asmr_trace.csv";
  write_trace_csv(path.string(), r1);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,old_elements,new_elements,old_error_sum,new_error_sum,reward_sum,alpha,termination");
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == 3);
  std::filesystem::remove(path);
}
