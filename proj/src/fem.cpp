#include "asmr/fem.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <Eigen/SparseCholesky>

#include "asmr/spatial.hpp"

namespace asmr::fem {

namespace {

// Gradients of the three hat functions on triangle t, and its area.
struct LocalGeometry {
  std::array<Point2, 3> grad;
  double area;
};

LocalGeometry local_geometry(const mesh::TriMesh& mesh, int t) {
  const auto c = mesh.corners(t);
  const double det = orient(c[0], c[1], c[2]);
  LocalGeometry g;
  g.area = 0.5 * det;
  for (int k = 0; k < 3; ++k) {
    const Point2 a = c[static_cast<std::size_t>((k + 1) % 3)];
    const Point2 b = c[static_cast<std::size_t>((k + 2) % 3)];
    g.grad[static_cast<std::size_t>(k)] = {(a.y - b.y) / det, (b.x - a.x) / det};
  }
  return g;
}

void local_stiffness(const mesh::TriMesh& mesh, int t, Eigen::Triplet<double>* out) {
  const auto g = local_geometry(mesh, t);
  const auto& tri = mesh.triangle(t);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double k = g.area * dot(g.grad[static_cast<std::size_t>(i)], g.grad[static_cast<std::size_t>(j)]);
      out[3 * i + j] = {tri[static_cast<std::size_t>(i)], tri[static_cast<std::size_t>(j)], k};
    }
  }
}

}  // namespace

Eigen::SparseMatrix<double> assemble_stiffness(const mesh::TriMesh& mesh, Exec exec) {
  const int n = static_cast<int>(mesh.num_elements());
  std::vector<Eigen::Triplet<double>> triplets(static_cast<std::size_t>(9 * n));
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (int t = 0; t < n; ++t) local_stiffness(mesh, t, &triplets[static_cast<std::size_t>(9 * t)]);
  } else {
    for (int t = 0; t < n; ++t) local_stiffness(mesh, t, &triplets[static_cast<std::size_t>(9 * t)]);
  }
  const auto nv = static_cast<Eigen::Index>(mesh.num_vertices());
  Eigen::SparseMatrix<double> k(nv, nv);
  k.setFromTriplets(triplets.begin(), triplets.end());
  return k;
}

Eigen::VectorXd assemble_load(const mesh::TriMesh& mesh, const ScalarField& f) {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh.num_vertices()));
  if (!f) return b;
  for (std::size_t t = 0; t < mesh.num_elements(); ++t) {
    const auto& tri = mesh.triangles()[t];
    const auto c = mesh.corners(static_cast<int>(t));
    const double w = mesh.element_volumes()[t] / 3.0;
    // Mid-edge values; hat function k is 1/2 on the two edges touching vertex k.
    const double f01 = f(midpoint(c[0], c[1]));
    const double f12 = f(midpoint(c[1], c[2]));
    const double f20 = f(midpoint(c[2], c[0]));
    b(tri[0]) += w * 0.5 * (f01 + f20);
    b(tri[1]) += w * 0.5 * (f01 + f12);
    b(tri[2]) += w * 0.5 * (f12 + f20);
  }
  return b;
}

FemSolution assemble_and_solve(const PdeProblem& problem, const mesh::MeshPtr& mesh_ptr,
                               const SolveOptions& options) {
  const mesh::TriMesh& mesh = *mesh_ptr;
  if (options.check_conforming) {
    const auto report = mesh::validate_conforming(mesh);
    if (!report.ok) throw std::runtime_error("assemble_and_solve: non-conforming mesh: " + report.message);
  }
  const auto nv = static_cast<Eigen::Index>(mesh.num_vertices());

  // Dirichlet values; where tags meet, the smallest tag wins.
  std::vector<int> dirichlet_tag(static_cast<std::size_t>(nv), mesh::kNoTag);
  for (const auto& be : mesh.boundary_edges()) {
    if (!problem.boundary_value && !problem.dirichlet.contains(be.tag)) {
      throw std::runtime_error("assemble_and_solve: no Dirichlet value for boundary tag " +
                               std::to_string(be.tag));
    }
    for (int v : {be.a, be.b}) {
      int& tag = dirichlet_tag[static_cast<std::size_t>(v)];
      if (tag == mesh::kNoTag || be.tag < tag) tag = be.tag;
    }
  }
  Eigen::VectorXd u = Eigen::VectorXd::Zero(nv);
  std::vector<int> free_index(static_cast<std::size_t>(nv), -1);
  int num_free = 0;
  for (Eigen::Index v = 0; v < nv; ++v) {
    const int tag = dirichlet_tag[static_cast<std::size_t>(v)];
    if (tag == mesh::kNoTag) {
      free_index[static_cast<std::size_t>(v)] = num_free++;
    } else if (problem.boundary_value) {
      u(v) = problem.boundary_value(mesh.vertex(static_cast<int>(v)));
    } else {
      u(v) = problem.dirichlet.at(tag);
    }
  }
  if (num_free == nv) throw std::runtime_error("assemble_and_solve: singular system (no Dirichlet nodes)");

  const Eigen::SparseMatrix<double> k = assemble_stiffness(mesh, options.assembly);
  const Eigen::VectorXd load =
      problem.kind == PdeKind::Poisson ? assemble_load(mesh, problem.load) : Eigen::VectorXd::Zero(nv);

  Eigen::VectorXd b(num_free);
  for (Eigen::Index v = 0; v < nv; ++v) {
    const int f = free_index[static_cast<std::size_t>(v)];
    if (f >= 0) b(f) = load(v);
  }
  std::vector<Eigen::Triplet<double>> reduced;
  reduced.reserve(static_cast<std::size_t>(k.nonZeros()));
  for (int col = 0; col < k.outerSize(); ++col) {
    const int fc = free_index[static_cast<std::size_t>(col)];
    for (Eigen::SparseMatrix<double>::InnerIterator it(k, col); it; ++it) {
      const int fr = free_index[static_cast<std::size_t>(it.row())];
      if (fr < 0) continue;
      if (fc >= 0) {
        reduced.emplace_back(fr, fc, it.value());
      } else {
        b(fr) -= it.value() * u(col);  // boundary lift
      }
    }
  }
  if (num_free > 0) {
    Eigen::SparseMatrix<double> a(num_free, num_free);
    a.setFromTriplets(reduced.begin(), reduced.end());
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> solver(a);
    if (solver.info() != Eigen::Success) throw std::runtime_error("assemble_and_solve: singular system");
    const Eigen::VectorXd x = solver.solve(b);
    const double bnorm = b.norm();
    const double res = (a * x - b).norm();
    if (!std::isfinite(res) || res > 1e-10 * std::max(bnorm, 1e-300)) {
      if (!(bnorm == 0.0 && res == 0.0)) {
        std::ostringstream msg;
        msg << "assemble_and_solve: relative residual " << res / bnorm << " exceeds 1e-10";
        throw std::runtime_error(msg.str());
      }
    }
    for (Eigen::Index v = 0; v < nv; ++v) {
      const int f = free_index[static_cast<std::size_t>(v)];
      if (f >= 0) u(v) = x(f);
    }
  }
  return {mesh_ptr, std::move(u)};
}

double interpolate(const FemSolution& sol, int t, Point2 p) {
  const auto c = sol.mesh->corners(t);
  const auto l = barycentric(p, c[0], c[1], c[2]);
  const auto& tri = sol.mesh->triangle(t);
  return l[0] * sol.nodal_values(tri[0]) + l[1] * sol.nodal_values(tri[1]) +
         l[2] * sol.nodal_values(tri[2]);
}

std::vector<double> evaluate_at_points(const FemSolution& sol, std::span<const Point2> points) {
  const spatial::PointLocator locator(sol.mesh);
  std::vector<double> out;
  out.reserve(points.size());
  for (const Point2 p : points) {
    const int t = locator.locate(p, 1e-9);
    if (t < 0) {
      std::ostringstream msg;
      msg << std::setprecision(17) << "evaluate_at_points: point (" << p.x << ", " << p.y
          << ") lies outside the mesh";
      throw std::runtime_error(msg.str());
    }
    out.push_back(interpolate(sol, t, p));
  }
  return out;
}

std::vector<Point2> element_gradients(const FemSolution& sol) {
  const auto& mesh = *sol.mesh;
  std::vector<Point2> grads(mesh.num_elements());
  for (std::size_t t = 0; t < mesh.num_elements(); ++t) {
    const auto g = local_geometry(mesh, static_cast<int>(t));
    const auto& tri = mesh.triangles()[t];
    // Differences against vertex 0 make constant fields give exactly zero.
    const double u0 = sol.nodal_values(tri[0]);
    grads[t] = (sol.nodal_values(tri[1]) - u0) * g.grad[1] + (sol.nodal_values(tri[2]) - u0) * g.grad[2];
  }
  return grads;
}

double l2_error(const FemSolution& sol, const ScalarField& exact) {
  // Symmetric 6-point rule, exact for degree 4.
  static constexpr std::array<std::array<double, 4>, 6> rule{{
      {0.445948490915965, 0.445948490915965, 0.108103018168070, 0.223381589678011},
      {0.445948490915965, 0.108103018168070, 0.445948490915965, 0.223381589678011},
      {0.108103018168070, 0.445948490915965, 0.445948490915965, 0.223381589678011},
      {0.091576213509771, 0.091576213509771, 0.816847572980459, 0.109951743655322},
      {0.091576213509771, 0.816847572980459, 0.091576213509771, 0.109951743655322},
      {0.816847572980459, 0.091576213509771, 0.091576213509771, 0.109951743655322},
  }};
  const auto& mesh = *sol.mesh;
  double sum = 0.0;
  for (std::size_t t = 0; t < mesh.num_elements(); ++t) {
    const auto c = mesh.corners(static_cast<int>(t));
    const auto& tri = mesh.triangles()[t];
    double local = 0.0;
    for (const auto& q : rule) {
      const Point2 p = q[0] * c[0] + q[1] * c[1] + q[2] * c[2];
      const double uh = q[0] * sol.nodal_values(tri[0]) + q[1] * sol.nodal_values(tri[1]) +
                        q[2] * sol.nodal_values(tri[2]);
      const double d = uh - exact(p);
      local += q[3] * d * d;
    }
    sum += local * mesh.element_volumes()[t];
  }
  return std::sqrt(sum);
}

void write_solution(std::ostream& out, const FemSolution& sol) {
  mesh::write_mesh(out, *sol.mesh);
  out << "solution " << sol.nodal_values.size() << '\n' << std::setprecision(17);
  for (Eigen::Index i = 0; i < sol.nodal_values.size(); ++i) out << sol.nodal_values(i) << '\n';
}

FemSolution read_solution(std::istream& in) {
  auto m = std::make_shared<const mesh::TriMesh>(mesh::read_mesh(in));
  std::string word;
  Eigen::Index n = 0;
  if (!(in >> word >> n) || word != "solution" || n != static_cast<Eigen::Index>(m->num_vertices())) {
    throw std::runtime_error("read_solution: missing or mismatched solution block");
  }
  Eigen::VectorXd values(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(in >> values(i))) throw std::runtime_error("read_solution: truncated solution block");
  }
  return {std::move(m), std::move(values)};
}

}  // namespace asmr::fem
