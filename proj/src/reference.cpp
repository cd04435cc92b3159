#include "asmr/reference.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace asmr::reference {

ReferenceData::ReferenceData(fem::FemSolution solution)
    : solution_(std::move(solution)),
      points_(solution_.mesh->element_midpoints()),
      volumes_(solution_.mesh->element_volumes()),
      tree_(points_) {
  values_.resize(points_.size());
  for (std::size_t m = 0; m < points_.size(); ++m) {
    values_[m] = fem::interpolate(solution_, static_cast<int>(m), points_[m]);
  }
}

namespace {

[[noreturn]] void throw_unassigned(const ReferenceData& ref, int p) {
  const Point2 q = ref.points()[static_cast<std::size_t>(p)];
  std::ostringstream msg;
  msg << std::setprecision(17) << "assign_points: reference point " << p << " (" << q.x << ", " << q.y
      << ") lies in no element";
  throw std::runtime_error(msg.str());
}

PointAssignment from_lists(const std::vector<std::vector<int>>& per_element, std::size_t num_points,
                           const ReferenceData& ref) {
  std::vector<int> count(num_points, 0);
  PointAssignment a;
  a.offsets.reserve(per_element.size() + 1);
  a.offsets.push_back(0);
  for (const auto& list : per_element) {
    for (int p : list) ++count[static_cast<std::size_t>(p)];
    a.points.insert(a.points.end(), list.begin(), list.end());
    a.offsets.push_back(static_cast<int>(a.points.size()));
  }
  for (std::size_t p = 0; p < num_points; ++p) {
    if (count[p] == 0) throw_unassigned(ref, static_cast<int>(p));
  }
  a.weights.resize(a.points.size());
  for (std::size_t k = 0; k < a.points.size(); ++k) {
    a.weights[k] = 1.0 / count[static_cast<std::size_t>(a.points[k])];
  }
  return a;
}

}  // namespace

PointAssignment assign_points(const mesh::TriMesh& mesh, const ReferenceData& ref, Exec exec) {
  const int n = static_cast<int>(mesh.num_elements());
  std::vector<std::vector<int>> per_element(static_cast<std::size_t>(n));
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(dynamic, 64)
    for (int t = 0; t < n; ++t) {
      const auto c = mesh.corners(t);
      Point2 lo{std::min({c[0].x, c[1].x, c[2].x}), std::min({c[0].y, c[1].y, c[2].y})};
      Point2 hi{std::max({c[0].x, c[1].x, c[2].x}), std::max({c[0].y, c[1].y, c[2].y})};
      // Covers points the barycentric tolerance admits just outside the triangle.
      const double pad = 1e-10 * std::max(hi.x - lo.x, hi.y - lo.y);
      lo = {lo.x - pad, lo.y - pad};
      hi = {hi.x + pad, hi.y + pad};
      auto& list = per_element[static_cast<std::size_t>(t)];
      ref.tree().for_each_in_box(lo, hi, [&](int p) {
        if (spatial::contains(mesh, t, ref.points()[static_cast<std::size_t>(p)])) list.push_back(p);
      });
      std::sort(list.begin(), list.end());
    }
  } else {
    const spatial::PointLocator locator(std::make_shared<const mesh::TriMesh>(mesh));
    for (int p = 0; p < static_cast<int>(ref.num_points()); ++p) {
      for (int t : locator.locate_all(ref.points()[static_cast<std::size_t>(p)])) {
        per_element[static_cast<std::size_t>(t)].push_back(p);
      }
    }
  }
  return from_lists(per_element, ref.num_points(), ref);
}

Comparison compare_to_reference(const fem::FemSolution& sol, const ReferenceData& ref, Exec exec) {
  const auto& mesh = *sol.mesh;
  Comparison c;
  c.assignment = assign_points(mesh, ref, exec);
  const auto& a = c.assignment;
  const int n = a.num_elements();
  c.max_error.assign(static_cast<std::size_t>(n), 0.0);
  c.integrated_error.assign(static_cast<std::size_t>(n), 0.0);
  c.point_diff.assign(ref.num_points(), -1.0);
  for (int t = 0; t < n; ++t) {
    double mx = 0.0;
    double sum = 0.0;
    for (int k = a.offsets[static_cast<std::size_t>(t)]; k < a.offsets[static_cast<std::size_t>(t) + 1]; ++k) {
      const auto p = static_cast<std::size_t>(a.points[static_cast<std::size_t>(k)]);
      const double d = std::abs(ref.values()[p] - fem::interpolate(sol, t, ref.points()[p]));
      const double w = a.weights[static_cast<std::size_t>(k)];
      mx = std::max(mx, w * d);
      sum += w * ref.volumes()[p] * d;
      if (c.point_diff[p] < 0.0) c.point_diff[p] = d;  // elements visited in ascending order
    }
    c.max_error[static_cast<std::size_t>(t)] = mx;
    c.integrated_error[static_cast<std::size_t>(t)] = sum;
  }
  return c;
}

}  // namespace asmr::reference
