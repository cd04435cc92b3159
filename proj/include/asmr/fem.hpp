#pragma once

// Linear Lagrange (P1) finite elements for scalar Laplace/Poisson problems
// with Dirichlet data on tagged boundary segments.

#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "asmr/mesh.hpp"
#include "asmr/parallel.hpp"

namespace asmr::fem {

enum class PdeKind { Laplace, Poisson };

using ScalarField = std::function<double(Point2)>;

struct PdeProblem {
  PdeKind kind = PdeKind::Laplace;
  ScalarField load;                 // Poisson only
  std::map<int, double> dirichlet;  // boundary tag -> value
  ScalarField boundary_value;       // if set, replaces the per-tag constants
};

struct FemSolution {
  mesh::MeshPtr mesh;
  Eigen::VectorXd nodal_values;
};

struct SolveOptions {
  bool check_conforming = true;
  Exec assembly = Exec::Parallel;
};

/// Full stiffness matrix (before boundary elimination).
Eigen::SparseMatrix<double> assemble_stiffness(const mesh::TriMesh& mesh, Exec exec = Exec::Parallel);

/// Load vector with the 3-point mid-edge rule on each element.
Eigen::VectorXd assemble_load(const mesh::TriMesh& mesh, const ScalarField& f);

/// Solves the P1 Galerkin system with Dirichlet elimination.
/// Throws std::runtime_error for non-conforming meshes, missing boundary values
/// or singular systems.
FemSolution assemble_and_solve(const PdeProblem& problem, const mesh::MeshPtr& mesh,
                               const SolveOptions& options = {});

/// Value of the solution in element t at p (barycentric interpolation).
double interpolate(const FemSolution& sol, int t, Point2 p);

/// Barycentric interpolation at arbitrary points. Throws if a point lies
/// outside every element by more than 1e-9 in barycentric coordinates.
std::vector<double> evaluate_at_points(const FemSolution& sol, std::span<const Point2> points);

/// Constant gradient of the solution on each element.
std::vector<Point2> element_gradients(const FemSolution& sol);

/// L2 norm of (u_h - exact), integrated with a degree-4 rule per element.
double l2_error(const FemSolution& sol, const ScalarField& exact);

/// Mesh text format followed by "solution <nvertices>" and one value per line.
void write_solution(std::ostream& out, const FemSolution& sol);
FemSolution read_solution(std::istream& in);

}  // namespace asmr::fem
