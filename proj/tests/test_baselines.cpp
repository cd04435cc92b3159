#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "asmr/baselines.hpp"
#include "asmr/reference.hpp"
#include "asmr/rng.hpp"

using namespace asmr;
using namespace asmr::baselines;

namespace {

mesh::MeshPtr unit_square() {
  return std::make_shared<const mesh::TriMesh>(
      std::vector<Point2>{{0, 0}, {1, 0}, {1, 1}, {0, 1}},
      std::vector<mesh::Triangle>{{0, 1, 2}, {0, 2, 3}},
      std::vector<mesh::BoundaryEdge>{{0, 1, 1}, {1, 2, 1}, {2, 3, 1}, {0, 3, 1}});
}

tasks::TaskPtr small_task(tasks::TaskKind kind = tasks::TaskKind::Laplace, std::uint64_t seed = 5) {
  return std::make_shared<const tasks::TaskInstance>(tasks::instantiate(tasks::sample_task(kind, seed), 3, {0.25, ""}));
}

fem::FemSolution nodal(const mesh::MeshPtr& m, const std::function<double(Point2)>& f) {
  fem::FemSolution s{m, Eigen::VectorXd(static_cast<Eigen::Index>(m->num_vertices()))};
  for (std::size_t v = 0; v < m->num_vertices(); ++v) s.nodal_values(static_cast<Eigen::Index>(v)) = f(m->vertices()[v]);
  return s;
}

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Per-element L2 norm of the gradient error, 7-point degree-5 rule.
std::vector<double> element_gradient_errors(const fem::FemSolution& sol, const std::function<Point2(Point2)>& exact) {
  const double a = 0.059715871789770, b = 0.470142064105115, c = 0.797426985353087, d = 0.101286507323456;
  const double wa = 0.132394152788506, wc = 0.125939180544827, w0 = 0.225;
  const std::vector<std::array<double, 4>> rule{{1. / 3, 1. / 3, 1. / 3, w0}, {a, b, b, wa}, {b, a, b, wa},
                                                 {b, b, a, wa}, {c, d, d, wc}, {d, c, d, wc}, {d, d, c, wc}};
  const auto& m = *sol.mesh;
  std::vector<double> err(m.num_elements());
  for (std::size_t t = 0; t < m.num_elements(); ++t) {
    const auto& tri = m.triangles()[t];
    const Point2 p0 = m.vertex(tri[0]), p1 = m.vertex(tri[1]), p2 = m.vertex(tri[2]);
    // Gradient of the linear interpolant from the vertex values.
    const double det = (p1.x - p0.x) * (p2.y - p0.y) - (p2.x - p0.x) * (p1.y - p0.y);
    const double du1 = sol.nodal_values(tri[1]) - sol.nodal_values(tri[0]);
    const double du2 = sol.nodal_values(tri[2]) - sol.nodal_values(tri[0]);
    const Point2 gh{(du1 * (p2.y - p0.y) - du2 * (p1.y - p0.y)) / det, (du2 * (p1.x - p0.x) - du1 * (p2.x - p0.x)) / det};
    double s = 0;
    for (const auto& q : rule) {
      const Point2 x{q[0] * p0.x + q[1] * p1.x + q[2] * p2.x, q[0] * p0.y + q[1] * p1.y + q[2] * p2.y};
      const Point2 g = exact(x);
      s += q[3] * ((gh.x - g.x) * (gh.x - g.x) + (gh.y - g.y) * (gh.y - g.y));
    }
    err[t] = std::sqrt(s * m.element_volumes()[t]);
  }
  return err;
}

}  // namespace

TEST_CASE("threshold marking") {
  SUBCASE("theta = 1 marks nothing strictly above the maximum") {
    CHECK(threshold_marks({0.1, 0.5, 0.5, 0.2}, 1.0) == std::vector<bool>{false, false, false, false});
    CHECK(threshold_marks({0.1, 0.5, 0.5, 0.2}, 0.999) == std::vector<bool>{false, true, true, false});
  }
  SUBCASE("small theta marks every positive estimate") {
    CHECK(threshold_marks({0.1, 0.5, 0.0, 1e-9}, 1e-12) == std::vector<bool>{true, true, false, true});
  }
  SUBCASE("all-zero estimates mark nothing") {
    CHECK(threshold_marks({0.0, 0.0, 0.0}, 1e-6) == std::vector<bool>{false, false, false});
    CHECK(threshold_marks({}, 0.5).empty());
  }
  SUBCASE("mark sets are nested in theta") {
    Rng rng(3);
    std::vector<double> est(300);
    for (double& e : est) e = rng.uniform() * rng.uniform();
    std::vector<bool> prev(est.size(), false);
    for (double theta = 1.0; theta > 1e-3; theta *= 0.8) {
      const auto m = threshold_marks(est, theta);
      for (std::size_t i = 0; i < est.size(); ++i) CHECK((!prev[i] || m[i]));
      prev = m;
    }
  }
}

TEST_CASE("ZZ estimate vanishes on affine and constant fields") {
  std::vector<mesh::MeshPtr> meshes{mesh::uniform_refine(unit_square(), 3)};
  for (auto kind : {tasks::TaskKind::Laplace, tasks::TaskKind::Poisson}) {
    const auto spec = tasks::sample_task(kind, 11);
    meshes.push_back(std::make_shared<const mesh::TriMesh>(tasks::initial_mesh_for_domain(spec, 0.1)));
  }
  Rng rng(1);
  std::vector<bool> marks(meshes.back()->num_elements());
  for (std::size_t i = 0; i < marks.size(); ++i) marks[i] = rng.bernoulli(0.3);
  meshes.push_back(mesh::refine_rgb(meshes.back(), marks).child_mesh);
  for (const auto& m : meshes) {
    for (auto exec : {Exec::Serial, Exec::Parallel}) {
      const auto affine = zz_error_estimate(nodal(m, [](Point2 p) { return 2.0 * p.x - 0.5 * p.y + 3.0; }), exec);
      CHECK(*std::max_element(affine.begin(), affine.end()) <= 1e-12);
      const auto constant = zz_error_estimate(nodal(m, [](Point2) { return 0.7; }), exec);
      CHECK(*std::max_element(constant.begin(), constant.end()) == 0.0);
    }
  }
}

TEST_CASE("ZZ estimate tracks the error of a manufactured solution") {
  const double pi = std::numbers::pi;
  const auto exact = [pi](Point2 p) { return std::sin(pi * p.x) * std::sin(pi * p.y); };
  const auto grad = [pi](Point2 p) {
    return Point2{pi * std::cos(pi * p.x) * std::sin(pi * p.y), pi * std::sin(pi * p.x) * std::cos(pi * p.y)};
  };
  fem::PdeProblem prob;
  prob.kind = fem::PdeKind::Poisson;
  prob.load = [pi, exact](Point2 p) { return 2 * pi * pi * exact(p); };
  prob.dirichlet = {{1, 0.0}};
  double prev = INFINITY;
  for (int level = 2; level <= 5; ++level) {
    const auto sol = fem::assemble_and_solve(prob, mesh::uniform_refine(unit_square(), level));
    const auto est = zz_error_estimate(sol);
    // Global estimate: root of the summed squared element contributions.
    double total = 0.0;
    for (double e : est) total += e * e;
    CHECK(total < prev);
    prev = total;
    CHECK(spearman(est, element_gradient_errors(sol, grad)) >= 0.5);
  }
}

TEST_CASE("serial and parallel ZZ agree") {
  const auto task = small_task(tasks::TaskKind::Poisson);
  CHECK(zz_error_estimate(task->initial_solution, Exec::Serial) == zz_error_estimate(task->initial_solution, Exec::Parallel));
}

TEST_CASE("oracle estimates") {
  const auto task = small_task();
  SUBCASE("zero on the reference") {
    for (auto v : {OracleVariant::Integrated, OracleVariant::Max}) {
      const auto e = oracle_error_estimate(task->reference->solution(), *task, v);
      CHECK(*std::max_element(e.begin(), e.end()) <= 1e-12);
    }
  }
  SUBCASE("integrated estimates partition the global L1 difference") {
    const auto e = oracle_error_estimate(task->initial_solution, *task, OracleVariant::Integrated);
    const auto cmp = reference::compare_to_reference(task->initial_solution, *task->reference);
    double global = 0.0;
    for (std::size_t p = 0; p < task->reference->num_points(); ++p) global += task->reference->volumes()[p] * cmp.point_diff[p];
    CHECK(std::abs(std::accumulate(e.begin(), e.end(), 0.0) - global) <= 1e-12);
  }
  SUBCASE("two-element mesh matches a brute-force scan") {
    tasks::TaskInstance t;
    fem::PdeProblem prob;
    prob.kind = fem::PdeKind::Poisson;
    prob.load = [](Point2 p) { return 1.0 + p.x; };
    prob.dirichlet = {{1, 0.0}};
    t.problem = prob;
    t.initial_mesh = unit_square();
    t.reference = std::make_shared<const reference::ReferenceData>(
        fem::assemble_and_solve(prob, mesh::uniform_refine(unit_square(), 3)));
    const auto coarse = fem::assemble_and_solve(prob, mesh::uniform_refine(unit_square(), 1));
    const auto& m = *coarse.mesh;
    const auto& ref = *t.reference;
    std::vector<double> integ(m.num_elements(), 0.0), mx(m.num_elements(), 0.0);
    for (std::size_t p = 0; p < ref.num_points(); ++p) {
      const Point2 q = ref.points()[p];
      std::vector<std::pair<std::size_t, double>> hits;
      for (std::size_t e = 0; e < m.num_elements(); ++e) {
        const auto& tri = m.triangles()[e];
        const Point2 a = m.vertex(tri[0]), b = m.vertex(tri[1]), c = m.vertex(tri[2]);
        const double det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
        const double l1 = ((b.x - q.x) * (c.y - q.y) - (c.x - q.x) * (b.y - q.y)) / det;
        const double l2 = ((c.x - q.x) * (a.y - q.y) - (a.x - q.x) * (c.y - q.y)) / det;
        if (l1 < -1e-12 || l2 < -1e-12 || 1 - l1 - l2 < -1e-12) continue;
        const double u = l1 * coarse.nodal_values(tri[0]) + l2 * coarse.nodal_values(tri[1]) +
                         (1 - l1 - l2) * coarse.nodal_values(tri[2]);
        hits.push_back({e, std::abs(u - ref.values()[p])});
      }
      for (const auto& [e, d] : hits) {
        const double w = 1.0 / static_cast<double>(hits.size());
        integ[e] += w * ref.volumes()[p] * d;
        mx[e] = std::max(mx[e], w * d);
      }
    }
    const auto gi = oracle_error_estimate(coarse, t, OracleVariant::Integrated);
    const auto gm = oracle_error_estimate(coarse, t, OracleVariant::Max);
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
      CHECK(gi[e] == doctest::Approx(integ[e]).epsilon(1e-12));
      CHECK(gm[e] == doctest::Approx(mx[e]).epsilon(1e-12));
    }
  }
}

TEST_CASE("heuristic runs") {
  const auto task = small_task();
  const std::size_t n0 = task->initial_mesh->num_elements();
  SUBCASE("uniform refinement multiplies the element count by four per step") {
    const auto r = run_heuristic(*task, {.kind = HeuristicKind::Uniform, .steps = 2});
    CHECK(r.solution.mesh->num_elements() == 16 * n0);
    CHECK(r.trace.size() == 2);
  }
  SUBCASE("tiny theta reproduces the uniform topology") {
    const auto r = run_heuristic(*task, {.kind = HeuristicKind::Oracle, .theta = 1e-12, .steps = 2});
    const auto u = mesh::uniform_refine(task->initial_mesh, 2);
    CHECK(r.solution.mesh->num_elements() == u->num_elements());
    CHECK(r.solution.mesh->num_vertices() == u->num_vertices());
  }
  SUBCASE("theta = 1 refines only the maximizers and their closure") {
    HeuristicConfig c{.kind = HeuristicKind::MaxOracle, .theta = 0.999999, .steps = 1};
    const auto r = run_heuristic(*task, c);
    const auto est = oracle_error_estimate(task->initial_solution, *task, OracleVariant::Max);
    const double top = *std::max_element(est.begin(), est.end());
    CHECK(r.trace[0].marked == std::count_if(est.begin(), est.end(), [&](double e) { return e > 0.999999 * top; }));
    CHECK(r.trace[0].marked >= 1);
    CHECK(r.solution.mesh->num_elements() > n0);
  }
  SUBCASE("an exact solution refines nothing") {
    tasks::TaskInstance exact = *task;
    exact.initial_mesh = task->reference_mesh();
    exact.initial_solution = task->reference->solution();
    const auto r = run_heuristic(exact, {.kind = HeuristicKind::Oracle, .theta = 0.5, .steps = 3});
    CHECK(r.solution.mesh->num_elements() == exact.initial_mesh->num_elements());
  }
  SUBCASE("ZZ starts from uniform refinements") {
    const auto r = run_heuristic(*task, {.kind = HeuristicKind::Zz, .theta = 0.5, .steps = 1, .initial_uniform_refinements = 2});
    CHECK(r.trace[0].elements == static_cast<int>(16 * n0));
    CHECK(r.solution.mesh->num_elements() > 16 * n0);
  }
  SUBCASE("identical inputs give identical meshes") {
    for (auto kind : {HeuristicKind::Oracle, HeuristicKind::MaxOracle, HeuristicKind::Zz}) {
      HeuristicConfig c{.kind = kind, .theta = 0.3, .steps = 3};
      const auto a = run_heuristic(*task, c), b = run_heuristic(*task, c);
      CHECK(a.solution.mesh->vertices() == b.solution.mesh->vertices());
      CHECK(a.solution.mesh->triangles() == b.solution.mesh->triangles());
    }
  }
  SUBCASE("element cap stops the run") {
    const auto r = run_heuristic(*task, {.kind = HeuristicKind::Uniform, .steps = 4, .element_cap = 5 * static_cast<int>(n0)});
    CHECK(r.capped);
    CHECK(r.solution.mesh->num_elements() == 4 * n0);
  }
  SUBCASE("invalid configuration") {
    CHECK_THROWS_AS(run_heuristic(*task, {.theta = 0.0}), std::invalid_argument);
    CHECK_THROWS_AS(run_heuristic(*task, {.theta = 1.5}), std::invalid_argument);
  }
}
