#include "asmr/spatial.hpp"

#include <limits>
#include <numeric>

namespace asmr::spatial {

KdTree2::KdTree2(std::vector<Point2> points, int leaf_size) : points_(std::move(points)) {
  index_.resize(points_.size());
  std::iota(index_.begin(), index_.end(), 0);
  if (!points_.empty()) {
    nodes_.reserve(2 * points_.size() / static_cast<std::size_t>(std::max(1, leaf_size)) + 2);
    build(0, static_cast<int>(points_.size()), std::max(1, leaf_size));
  }
}

int KdTree2::build(int begin, int end, int leaf_size) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({});
  Point2 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  Point2 hi{-lo.x, -lo.y};
  for (int i = begin; i < end; ++i) {
    const Point2 p = points_[static_cast<std::size_t>(index_[static_cast<std::size_t>(i)])];
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
  }
  nodes_[static_cast<std::size_t>(id)].lo = lo;
  nodes_[static_cast<std::size_t>(id)].hi = hi;
  nodes_[static_cast<std::size_t>(id)].begin = begin;
  nodes_[static_cast<std::size_t>(id)].end = end;
  if (end - begin <= leaf_size) return id;

  const bool split_x = (hi.x - lo.x) >= (hi.y - lo.y);
  const int mid = begin + (end - begin) / 2;
  // Ties are broken by index so the tree layout is deterministic.
  std::nth_element(index_.begin() + begin, index_.begin() + mid, index_.begin() + end,
                   [&](int a, int b) {
                     const Point2 pa = points_[static_cast<std::size_t>(a)];
                     const Point2 pb = points_[static_cast<std::size_t>(b)];
                     const double ka = split_x ? pa.x : pa.y;
                     const double kb = split_x ? pb.x : pb.y;
                     return ka < kb || (ka == kb && a < b);
                   });
  const int left = build(begin, mid, leaf_size);
  const int right = build(mid, end, leaf_size);
  nodes_[static_cast<std::size_t>(id)].left = left;
  nodes_[static_cast<std::size_t>(id)].right = right;
  return id;
}

std::vector<int> KdTree2::in_box(Point2 lo, Point2 hi) const {
  std::vector<int> out;
  for_each_in_box(lo, hi, [&](int i) { out.push_back(i); });
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> KdTree2::in_radius(Point2 c, double r) const {
  std::vector<int> out;
  const double r2 = r * r;
  for_each_in_box({c.x - r, c.y - r}, {c.x + r, c.y + r}, [&](int i) {
    if (squared_distance(points_[static_cast<std::size_t>(i)], c) <= r2) out.push_back(i);
  });
  std::sort(out.begin(), out.end());
  return out;
}

bool contains(const mesh::TriMesh& mesh, int t, Point2 p, double tol) {
  const auto c = mesh.corners(t);
  const auto l = barycentric(p, c[0], c[1], c[2]);
  return l[0] >= -tol && l[1] >= -tol && l[2] >= -tol;
}

PointLocator::PointLocator(mesh::MeshPtr mesh)
    : mesh_(std::move(mesh)), tree_(mesh_->element_midpoints()) {
  for (std::size_t t = 0; t < mesh_->num_elements(); ++t) {
    const auto c = mesh_->corners(static_cast<int>(t));
    const Point2 m = mesh_->element_midpoints()[t];
    for (const auto& v : c) max_radius_ = std::max(max_radius_, distance(v, m));
  }
}

std::vector<int> PointLocator::locate_all(Point2 p, double tol) const {
  // A containing element's midpoint is no farther from p than its farthest vertex.
  const double r = max_radius_ * (1.0 + 1e-9) + 1e-14;
  std::vector<int> out;
  tree_.for_each_in_box({p.x - r, p.y - r}, {p.x + r, p.y + r}, [&](int t) {
    if (contains(*mesh_, t, p, tol)) out.push_back(t);
  });
  std::sort(out.begin(), out.end());
  return out;
}

int PointLocator::locate(Point2 p, double tol) const {
  const auto all = locate_all(p, tol);
  return all.empty() ? -1 : all.front();
}

}  // namespace asmr::spatial
