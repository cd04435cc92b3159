#pragma once

// Comparison of coarse solutions against a fine reference solution, sampled
// at the midpoints of the reference elements.

#include <vector>

#include "asmr/fem.hpp"
#include "asmr/parallel.hpp"
#include "asmr/spatial.hpp"

namespace asmr::reference {

class ReferenceData {
 public:
  explicit ReferenceData(fem::FemSolution solution);

  const fem::FemSolution& solution() const { return solution_; }
  const mesh::TriMesh& mesh() const { return *solution_.mesh; }
  std::size_t num_points() const { return points_.size(); }
  const std::vector<Point2>& points() const { return points_; }
  /// Volume of the reference element each point is the midpoint of.
  const std::vector<double>& volumes() const { return volumes_; }
  /// Reference solution at each point.
  const std::vector<double>& values() const { return values_; }
  const spatial::KdTree2& tree() const { return tree_; }

 private:
  fem::FemSolution solution_;
  std::vector<Point2> points_;
  std::vector<double> volumes_;
  std::vector<double> values_;
  spatial::KdTree2 tree_;
};

/// Element -> reference point incidence in compressed row form. A point on
/// the boundary between k elements appears in each of them with weight 1/k.
struct PointAssignment {
  std::vector<int> offsets;  // num_elements + 1
  std::vector<int> points;   // ascending within each element
  std::vector<double> weights;

  int num_elements() const { return static_cast<int>(offsets.size()) - 1; }
};

/// Parallel: k-d tree box query per element. Serial: point location per point.
/// Throws std::runtime_error if a point lies in no element.
PointAssignment assign_points(const mesh::TriMesh& mesh, const ReferenceData& ref,
                              Exec exec = Exec::Parallel);

struct Comparison {
  PointAssignment assignment;
  /// |u* - u| at each point, interpolated in the lowest-index containing element.
  std::vector<double> point_diff;
  /// max over contained points of weight * |u* - u|.
  std::vector<double> max_error;
  /// Sum over contained points of weight * volume * |u* - u|.
  std::vector<double> integrated_error;
};

Comparison compare_to_reference(const fem::FemSolution& sol, const ReferenceData& ref,
                                Exec exec = Exec::Parallel);

}  // namespace asmr::reference
