#pragma once

// Conforming triangular meshes, red-green-blue refinement and the parent/child
// agent mappings that link consecutive refinement steps.

#include <array>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/SparseCore>

#include "asmr/geometry.hpp"

namespace asmr::mesh {

using Triangle = std::array<int, 3>;

/// Undirected edge stored with a < b.
struct Edge {
  int a = 0;
  int b = 0;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

inline Edge make_edge(int u, int v) { return u < v ? Edge{u, v} : Edge{v, u}; }

struct BoundaryEdge {
  int a = 0;  // a < b
  int b = 0;
  int tag = 0;
  friend auto operator<=>(const BoundaryEdge&, const BoundaryEdge&) = default;
};

inline constexpr int kNoTag = -1;
inline constexpr int kNoElement = -1;

/// Immutable triangulation with cached per-element geometry and edge topology.
///
/// Construction never rejects a mesh; use validate_conforming() to check the
/// invariants. Local edge k of triangle t joins t[k] and t[(k + 1) % 3].
class TriMesh {
 public:
  TriMesh() = default;
  TriMesh(std::vector<Point2> vertices, std::vector<Triangle> triangles,
          std::vector<BoundaryEdge> boundary_edges);

  std::size_t num_vertices() const { return vertices_.size(); }
  std::size_t num_elements() const { return triangles_.size(); }
  bool empty() const { return triangles_.empty(); }

  const std::vector<Point2>& vertices() const { return vertices_; }
  const std::vector<Triangle>& triangles() const { return triangles_; }
  /// Sorted by (a, b).
  const std::vector<BoundaryEdge>& boundary_edges() const { return boundary_edges_; }
  const std::vector<Point2>& element_midpoints() const { return midpoints_; }
  const std::vector<double>& element_volumes() const { return volumes_; }

  Point2 vertex(int v) const { return vertices_[static_cast<std::size_t>(v)]; }
  const Triangle& triangle(int t) const { return triangles_[static_cast<std::size_t>(t)]; }
  std::array<Point2, 3> corners(int t) const;
  double signed_area(int t) const;
  double total_area() const;

  /// Unique edges in lexicographic order.
  const std::vector<Edge>& edges() const { return edges_; }
  /// Edge id of local edge k of each triangle.
  const std::vector<std::array<int, 3>>& triangle_edges() const { return triangle_edges_; }
  /// Number of triangles incident to each edge.
  const std::vector<int>& edge_use_count() const { return edge_count_; }
  /// Up to two incident triangles per edge; kNoElement where absent.
  const std::vector<std::array<int, 2>>& edge_elements() const { return edge_elements_; }
  /// Boundary tag per edge id, kNoTag for untagged edges.
  const std::vector<int>& edge_tags() const { return edge_tags_; }
  int find_edge(int u, int v) const;

  /// Interior edges shared by exactly two triangles, as (element, element) pairs in edge order.
  std::vector<std::array<int, 2>> element_adjacency() const;

 private:
  std::vector<Point2> vertices_;
  std::vector<Triangle> triangles_;
  std::vector<BoundaryEdge> boundary_edges_;
  std::vector<Point2> midpoints_;
  std::vector<double> volumes_;
  std::vector<Edge> edges_;
  std::vector<std::array<int, 3>> triangle_edges_;
  std::vector<int> edge_count_;
  std::vector<std::array<int, 2>> edge_elements_;
  std::vector<int> edge_tags_;
};

using MeshPtr = std::shared_ptr<const TriMesh>;

struct RefinementResult {
  MeshPtr child_mesh;
  std::vector<int> parent_of;            // per child element
  std::vector<bool> directly_refined;    // per old element
  std::vector<int> child_count;          // per old element
};

/// Marks every marked element for red refinement and closes the mesh with
/// green (one bisection) and blue (two bisections) splits. Every split of an
/// element bisects its refinement edge, the longest edge with ties broken by
/// the lexicographically smallest (min vertex, max vertex) pair.
RefinementResult refine_rgb(const MeshPtr& mesh, const std::vector<bool>& marks);

/// Red-refines every element `times` times.
MeshPtr uniform_refine(const MeshPtr& mesh, int times);

/// Local index k of the refinement edge (t[k], t[k+1]) of triangle t.
int refinement_edge(const TriMesh& mesh, int t);

enum class MappingVariant { NormalizedSum, UnnormalizedSum, NormalizedMean, UnnormalizedMean };

std::string to_string(MappingVariant v);
MappingVariant mapping_variant_from_string(const std::string& s);

/// Sparse responsibility matrix between the elements of consecutive meshes.
struct AgentMapping {
  Eigen::SparseMatrix<double, Eigen::RowMajor> matrix;

  int rows() const { return static_cast<int>(matrix.rows()); }
  int cols() const { return static_cast<int>(matrix.cols()); }
  double total() const { return matrix.sum(); }
  /// (phi * v), mapping values of new agents back to old agents.
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return matrix * v; }
};

AgentMapping build_agent_mapping(const RefinementResult& result,
                                 MappingVariant variant = MappingVariant::NormalizedSum);
AgentMapping identity_mapping(int n);

/// Ordered product phi^0 phi^1 ... phi^k. Throws on an empty list or mismatched dimensions.
AgentMapping compose_mappings(std::span<const AgentMapping> maps);

struct ConformityReport {
  bool ok = false;
  std::string message;
  explicit operator bool() const { return ok; }
};

ConformityReport validate_conforming(const TriMesh& mesh);

/// Plain-text serialization: "ntriangles nvertices", vertex lines, triangle
/// lines, then "a b tag" boundary lines. Deterministic, round-trips exactly.
void write_mesh(std::ostream& out, const TriMesh& mesh);
TriMesh read_mesh(std::istream& in);
void save_mesh(const std::string& path, const TriMesh& mesh);
TriMesh load_mesh(const std::string& path);

/// Applies x -> R x + shift to every vertex.
TriMesh transformed(const TriMesh& mesh, double angle, Point2 shift);

}  // namespace asmr::mesh
