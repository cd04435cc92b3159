#pragma once

// Static 2D k-d tree and point location in triangle meshes.

#include <algorithm>
#include <vector>

#include "asmr/geometry.hpp"
#include "asmr/mesh.hpp"

namespace asmr::spatial {

class KdTree2 {
 public:
  KdTree2() = default;
  explicit KdTree2(std::vector<Point2> points, int leaf_size = 16);

  std::size_t size() const { return points_.size(); }
  const std::vector<Point2>& points() const { return points_; }

  /// Calls f(index) for every point inside the closed box [lo, hi].
  template <class F>
  void for_each_in_box(Point2 lo, Point2 hi, F&& f) const {
    if (nodes_.empty()) return;
    visit_box(0, lo, hi, f);
  }

  std::vector<int> in_box(Point2 lo, Point2 hi) const;
  std::vector<int> in_radius(Point2 center, double radius) const;

 private:
  struct Node {
    Point2 lo, hi;  // bounding box of the node's points
    int begin = 0;
    int end = 0;
    int left = -1;
    int right = -1;
  };

  int build(int begin, int end, int leaf_size);

  template <class F>
  void visit_box(int id, Point2 lo, Point2 hi, F& f) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.hi.x < lo.x || n.lo.x > hi.x || n.hi.y < lo.y || n.lo.y > hi.y) return;
    if (n.left < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        const int idx = index_[static_cast<std::size_t>(i)];
        const Point2 p = points_[static_cast<std::size_t>(idx)];
        if (p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y) f(idx);
      }
      return;
    }
    visit_box(n.left, lo, hi, f);
    visit_box(n.right, lo, hi, f);
  }

  std::vector<Point2> points_;
  std::vector<int> index_;
  std::vector<Node> nodes_;
};

/// Barycentric tolerance used for point-in-triangle membership.
inline constexpr double kBarycentricTolerance = 1e-12;

/// True if p lies in triangle t of the mesh, allowing barycentric coordinates down to -tol.
bool contains(const mesh::TriMesh& mesh, int t, Point2 p, double tol = kBarycentricTolerance);

/// Locates points in a triangle mesh via a k-d tree over element midpoints.
class PointLocator {
 public:
  explicit PointLocator(mesh::MeshPtr mesh);

  /// All elements containing p within the barycentric tolerance, ascending.
  std::vector<int> locate_all(Point2 p, double tol = kBarycentricTolerance) const;
  /// Lowest-index containing element, or -1.
  int locate(Point2 p, double tol = kBarycentricTolerance) const;

  const mesh::TriMesh& mesh() const { return *mesh_; }

 private:
  mesh::MeshPtr mesh_;
  KdTree2 tree_;
  double max_radius_ = 0.0;
};

}  // namespace asmr::spatial
