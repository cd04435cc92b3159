#pragma once

// Problem families, the structured mesher and reference-solution caching.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "asmr/fem.hpp"
#include "asmr/mesh.hpp"
#include "asmr/reference.hpp"

namespace asmr::tasks {

enum class TaskKind { Laplace, Poisson };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

/// Gaussian with covariance R(angle) diag(var_u, var_v) R(angle)^T.
struct GaussianComponent {
  Point2 mean;
  double var_u = 0.0;
  double var_v = 0.0;
  double angle = 0.0;
  double weight = 0.0;

  /// (sxx, sxy, syy)
  std::array<double, 3> covariance() const;
  double density(Point2 p) const;
  friend bool operator==(const GaussianComponent&, const GaussianComponent&) = default;
};

struct TaskSpec {
  TaskKind kind = TaskKind::Laplace;
  std::uint64_t seed = 0;
  // Laplace: unit square minus an axis-aligned rectangular hole.
  Point2 hole_center;
  Point2 hole_size;
  // Poisson: (0,1)^2 minus [corner.x, 1] x [corner.y, 1].
  Point2 corner;
  std::vector<GaussianComponent> gmm;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

void to_json(nlohmann::json& j, const TaskSpec& s);
void from_json(const nlohmann::json& j, TaskSpec& s);

TaskSpec sample_task(TaskKind kind, std::uint64_t seed);

bool inside_domain(const TaskSpec& spec, Point2 p);
double domain_area(const TaskSpec& spec);
double load(const TaskSpec& spec, Point2 p);
/// Per-element task feature: hole distance (Laplace) or load value (Poisson).
double task_feature(const TaskSpec& spec, Point2 p);
fem::PdeProblem make_problem(const TaskSpec& spec);

/// Tensor grid through all domain corners, two triangles per cell, then
/// Delaunay edge flips. Outer square edges get tag 1, all others tag 2.
mesh::TriMesh initial_mesh_for_domain(const TaskSpec& spec, double target_size = 0.05);

/// Lawson flips until every interior edge is locally Delaunay (strict test).
mesh::TriMesh delaunay_flip(const mesh::TriMesh& mesh);

struct InstanceOptions {
  double mesh_size = 0.05;
  std::string cache_dir;  // empty disables caching
};

struct TaskInstance {
  TaskSpec spec;
  int refinement_depth = 0;
  double mesh_size = 0.0;
  fem::PdeProblem problem;
  mesh::MeshPtr initial_mesh;
  std::shared_ptr<const reference::ReferenceData> reference;
  fem::FemSolution initial_solution;
  /// Sum of per-element maximum errors on the initial mesh.
  double initial_error_total = 0.0;
  /// Sum of per-element integrated errors on the initial mesh.
  double initial_integrated_total = 0.0;
  bool from_cache = false;

  const mesh::MeshPtr& reference_mesh() const { return reference->solution().mesh; }
};

using TaskPtr = std::shared_ptr<const TaskInstance>;

/// Cache key: FNV-1a over the spec, depth and mesh size, as 16 hex digits.
std::string content_hash(const TaskSpec& spec, int refinement_depth, double mesh_size);

TaskInstance instantiate(const TaskSpec& spec, int refinement_depth, const InstanceOptions& options = {});

enum class Split { Train, Eval };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// Specs for one split. Train and eval seeds come from disjoint streams.
std::vector<TaskSpec> generate_specs(TaskKind kind, std::uint64_t master_seed, Split split, int count);

struct TaskSet {
  TaskKind kind = TaskKind::Laplace;
  std::uint64_t master_seed = 0;
  Split split = Split::Train;
  int refinement_depth = 4;
  double mesh_size = 0.05;
  std::string cache_dir;
  std::vector<TaskSpec> specs;
};

nlohmann::json manifest_json(const TaskSet& set);
TaskSet task_set_from_json(const nlohmann::json& j);
void write_manifest(const std::string& path, const TaskSet& set);
TaskSet read_manifest(const std::string& path);

/// Instantiates every spec of the set (in parallel across specs).
std::vector<TaskPtr> instantiate_all(const TaskSet& set, int workers = 1);

}  // namespace asmr::tasks
