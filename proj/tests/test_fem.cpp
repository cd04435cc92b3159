#include "doctest.h"

#include <cmath>
#include <numbers>
#include <sstream>

#include "asmr/fem.hpp"

using namespace asmr;
using namespace asmr::fem;
using mesh::BoundaryEdge;
using mesh::MeshPtr;
using mesh::Triangle;
using mesh::TriMesh;

namespace {

MeshPtr unit_square() {
  return std::make_shared<const TriMesh>(
      std::vector<Point2>{{0, 0}, {1, 0}, {1, 1}, {0, 1}},
      std::vector<Triangle>{{0, 1, 2}, {0, 2, 3}},
      std::vector<BoundaryEdge>{{0, 1, 1}, {1, 2, 1}, {2, 3, 1}, {0, 3, 1}});
}

MeshPtr skewed_fan() {
  return std::make_shared<const TriMesh>(
      std::vector<Point2>{{0.3, 0.4}, {0, 0}, {1.1, 0.1}, {0.9, 0.8}, {0.2, 1.0}, {-0.3, 0.5}},
      std::vector<Triangle>{{0, 1, 2}, {0, 2, 3}, {0, 3, 4}, {0, 4, 5}, {0, 5, 1}},
      std::vector<BoundaryEdge>{{1, 2, 1}, {2, 3, 1}, {3, 4, 2}, {4, 5, 2}, {1, 5, 3}});
}

FemSolution affine_solution(const MeshPtr& m, double a, double b, double c) {
  PdeProblem p;
  p.boundary_value = [=](Point2 x) { return a * x.x + b * x.y + c; };
  return assemble_and_solve(p, m);
}

}  // namespace

TEST_CASE("P1 reproduces affine boundary data exactly") {
  for (const auto& m : {mesh::uniform_refine(unit_square(), 3), mesh::uniform_refine(skewed_fan(), 2)}) {
    const auto sol = affine_solution(m, 1.0, 0.0, 0.0);
    for (std::size_t v = 0; v < m->num_vertices(); ++v) {
      CHECK(std::abs(sol.nodal_values(static_cast<Eigen::Index>(v)) - m->vertices()[v].x) <= 1e-10);
    }
  }
}

TEST_CASE("zero load with zero boundary data gives zero") {
  PdeProblem p;
  p.kind = PdeKind::Poisson;
  p.load = [](Point2) { return 0.0; };
  p.dirichlet = {{1, 0.0}};
  const auto sol = assemble_and_solve(p, mesh::uniform_refine(unit_square(), 2));
  CHECK(sol.nodal_values.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("manufactured Poisson solution converges at second order") {
  const double pi = std::numbers::pi;
  PdeProblem p;
  p.kind = PdeKind::Poisson;
  p.load = [pi](Point2 x) { return 2 * pi * pi * std::sin(pi * x.x) * std::sin(pi * x.y); };
  p.dirichlet = {{1, 0.0}};
  const ScalarField exact = [pi](Point2 x) { return std::sin(pi * x.x) * std::sin(pi * x.y); };

  auto m = mesh::uniform_refine(unit_square(), 2);
  std::vector<double> errors;
  for (int level = 0; level <= 4; ++level) {
    errors.push_back(l2_error(assemble_and_solve(p, m), exact));
    m = mesh::uniform_refine(m, 1);
  }
  for (std::size_t k = 1; k < errors.size(); ++k) {
    const double ratio = errors[k - 1] / errors[k];
    CAPTURE(k);
    CHECK(ratio == doctest::Approx(4.0).epsilon(0.5 / 4.0));
    CHECK(errors[k] <= 1.01 * errors[k - 1]);
    const double slope = std::log2(ratio);
    CHECK(slope >= 1.9);
    CHECK(slope <= 2.1);
  }
}

TEST_CASE("stiffness matrix is symmetric and serial and parallel assembly agree") {
  const auto m = mesh::uniform_refine(skewed_fan(), 3);
  const Eigen::SparseMatrix<double> k = assemble_stiffness(*m, Exec::Parallel);
  const Eigen::SparseMatrix<double> kt = k.transpose();
  CHECK((k - kt).cwiseAbs().sum() <= 1e-12 * k.cwiseAbs().sum());
  const Eigen::SparseMatrix<double> ks = assemble_stiffness(*m, Exec::Serial);
  CHECK((k - ks).cwiseAbs().sum() == 0.0);
  // Rows of the Laplacian annihilate constants.
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(k.cols());
  CHECK((k * ones).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("Dirichlet vertices keep their prescribed values") {
  PdeProblem p;
  p.dirichlet = {{1, 0.25}, {2, -1.5}, {3, 2.0}};
  const auto m = mesh::uniform_refine(skewed_fan(), 2);
  const auto sol = assemble_and_solve(p, m);
  for (const auto& be : m->boundary_edges()) {
    for (int v : {be.a, be.b}) {
      const double val = sol.nodal_values(v);
      CHECK((val == 0.25 || val == -1.5 || val == 2.0));
    }
  }
}

TEST_CASE("evaluate_at_points interpolates") {
  const auto m = mesh::uniform_refine(skewed_fan(), 2);
  PdeProblem p;
  p.dirichlet = {{1, 0.0}, {2, 1.0}, {3, 0.5}};
  const auto sol = assemble_and_solve(p, m);

  const auto at_vertices = evaluate_at_points(sol, m->vertices());
  for (std::size_t v = 0; v < m->num_vertices(); ++v) {
    CHECK(at_vertices[v] == doctest::Approx(sol.nodal_values(static_cast<Eigen::Index>(v))).epsilon(1e-12));
  }
  std::vector<Point2> centroids;
  for (std::size_t t = 0; t < m->num_elements(); ++t) {
    const auto c = m->corners(static_cast<int>(t));
    centroids.push_back(centroid(c[0], c[1], c[2]));
  }
  const auto at_centroids = evaluate_at_points(sol, centroids);
  for (std::size_t t = 0; t < m->num_elements(); ++t) {
    const auto& tri = m->triangles()[t];
    const double mean = (sol.nodal_values(tri[0]) + sol.nodal_values(tri[1]) + sol.nodal_values(tri[2])) / 3.0;
    CHECK(at_centroids[t] == doctest::Approx(mean).epsilon(1e-12));
  }

  const auto affine = affine_solution(m, 1.0, 0.0, 0.0);
  const std::vector<Point2> pts{{0.3, 0.4}, {0.1, 0.2}, {0.5, 0.5}, {0.0, 0.0}, {0.95, 0.3}};
  const auto vals = evaluate_at_points(affine, pts);
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK(std::abs(vals[i] - pts[i].x) <= 1e-12);
}

TEST_CASE("element gradients of affine and constant solutions") {
  const auto m = mesh::uniform_refine(skewed_fan(), 2);
  for (const auto& g : element_gradients(affine_solution(m, 1, 0, 0))) {
    CHECK(g.x == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(g.y) <= 1e-12);
  }
  for (const auto& g : element_gradients(affine_solution(m, 0, 1, 0))) {
    CHECK(std::abs(g.x) <= 1e-12);
    CHECK(g.y == doctest::Approx(1.0).epsilon(1e-12));
  }
  for (const auto& g : element_gradients(affine_solution(m, 0, 0, 3.0))) {
    CHECK(std::abs(g.x) <= 1e-12);
    CHECK(std::abs(g.y) <= 1e-12);
  }
}

TEST_CASE("solver errors") {
  PdeProblem p;
  p.dirichlet = {{1, 0.0}};

  SUBCASE("no Dirichlet nodes") {
    const auto m = std::make_shared<const TriMesh>(std::vector<Point2>{{0, 0}, {1, 0}, {0, 1}},
                                                   std::vector<Triangle>{{0, 1, 2}},
                                                   std::vector<BoundaryEdge>{});
    PdeProblem q;
    q.kind = PdeKind::Poisson;
    q.load = [](Point2) { return 1.0; };
    CHECK_THROWS_WITH_AS(assemble_and_solve(q, m, {.check_conforming = false}),
                         doctest::Contains("singular"), std::runtime_error);
  }
  SUBCASE("missing boundary value") {
    CHECK_THROWS_WITH_AS(assemble_and_solve(p, skewed_fan()), doctest::Contains("boundary tag 3"),
                         std::runtime_error);
  }
  SUBCASE("non-conforming mesh") {
    const auto m = std::make_shared<const TriMesh>(
        std::vector<Point2>{{0, 0}, {1, 0}, {0, 1}, {1, 1}, {0.5, 0.5}},
        std::vector<Triangle>{{0, 1, 2}, {1, 3, 4}, {4, 3, 2}},
        std::vector<BoundaryEdge>{{0, 1, 1}, {1, 3, 1}, {2, 3, 1}, {0, 2, 1}});
    CHECK_THROWS_WITH_AS(assemble_and_solve(p, m), doctest::Contains("non-conforming"), std::runtime_error);
  }
  SUBCASE("point outside the mesh") {
    const auto sol = assemble_and_solve(p, unit_square());
    const std::vector<Point2> pts{{0.5, 0.5}, {1.5, 0.25}};
    CHECK_THROWS_WITH_AS(evaluate_at_points(sol, pts), doctest::Contains("(1.5, 0.25)"), std::runtime_error);
  }
}

TEST_CASE("solution text round trip") {
  PdeProblem p;
  p.dirichlet = {{1, 0.1}, {2, 0.7}, {3, -0.2}};
  const auto sol = assemble_and_solve(p, mesh::uniform_refine(skewed_fan(), 1));
  std::stringstream ss;
  write_solution(ss, sol);
  const auto back = read_solution(ss);
  CHECK(back.mesh->vertices() == sol.mesh->vertices());
  CHECK(back.mesh->triangles() == sol.mesh->triangles());
  CHECK(back.nodal_values == sol.nodal_values);

  std::stringstream bad;
  mesh::write_mesh(bad, *sol.mesh);
  CHECK_THROWS_AS(read_solution(bad), std::runtime_error);
}
