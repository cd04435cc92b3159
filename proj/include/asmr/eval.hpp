#pragma once

// Mesh quality metrics, interquartile-mean aggregation, Pareto sweeps over the
// element penalty or heuristic threshold, and CSV/SVG output.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "asmr/baselines.hpp"
#include "asmr/env.hpp"
#include "asmr/policy.hpp"
#include "asmr/tasks.hpp"
#include "asmr/train.hpp"

namespace asmr::eval {

/// Unnormalized errors from per-reference-point absolute differences.
struct RawErrors {
  double squared = 0.0;  // sum Vol * diff^2
  double mean = 0.0;     // sum Vol * |diff|
  double top = 0.0;      // mean of the largest 0.1% of |diff| (at least one point)
};

RawErrors raw_errors(std::span<const double> point_diff, std::span<const double> volumes);

struct MeshMetrics {
  int element_count = 0;
  double squared_error = 0.0;  // each normalized by the initial mesh's value
  double mean_error = 0.0;
  double top_error = 0.0;
};

MeshMetrics mesh_metrics(const fem::FemSolution& sol, const tasks::TaskInstance& task, Exec exec = Exec::Parallel);

/// Mean of the middle half of the sorted values, with partial weight for
/// values straddling the 25th and 75th percentiles. Throws on empty input.
double iqm(std::vector<double> values);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

std::vector<double> log_space(double lo, double hi, int n);

// ---------------------------------------------------------------------------

struct RunRecord {
  std::string method;
  double parameter = 0.0;  // alpha, theta or uniform level
  int task_index = 0;
  MeshMetrics metrics;
  std::string termination;  // "horizon", "cap", ...
};

struct ParetoPoint {
  std::string method;
  std::uint64_t seed = 0;
  double parameter = 0.0;
  int runs = 0;
  double iqm_elements = 0.0;
  double iqm_squared = 0.0;
  double iqm_mean = 0.0;
  double iqm_top = 0.0;

  friend bool operator==(const ParetoPoint&, const ParetoPoint&) = default;
};

struct SweepOptions {
  int workers = 1;
  /// Drop capped runs before aggregation.
  bool outlier_filter = false;
  std::uint64_t seed = 0;  // label carried into the points
};

struct SweepResult {
  std::vector<ParetoPoint> points;  // ordered by parameter as given
  std::vector<RunRecord> runs;      // ordered by (parameter, task)
};

/// Aggregates the runs of one parameter value.
ParetoPoint aggregate(const std::string& method, std::uint64_t seed, double parameter, std::span<const RunRecord> runs,
                      bool outlier_filter);

struct PolicyRollout {
  train::Episode episode;
  env::EpisodeState final_state;
  MeshMetrics metrics;
  std::vector<env::TraceRow> trace;
};

/// Environment settings stored with a checkpoint, with the horizon replaced when > 0.
env::EnvConfig env_config_for(const policy::Checkpoint& ckpt, int horizon = 0);

/// Deterministic rollout at a fixed alpha.
PolicyRollout rollout_policy(const policy::Checkpoint& ckpt, const tasks::TaskPtr& task, const env::EnvConfig& config,
                             double alpha);

SweepResult pareto_sweep(const policy::Checkpoint& ckpt, const std::vector<tasks::TaskPtr>& tasks,
                         const env::EnvConfig& config, const std::vector<double>& alphas, const SweepOptions& options = {});

SweepResult baseline_sweep(const std::vector<tasks::TaskPtr>& tasks, const baselines::HeuristicConfig& config,
                           const std::vector<double>& thetas, const SweepOptions& options = {});

/// Uniform refinement levels 0..max_level.
SweepResult uniform_sweep(const std::vector<tasks::TaskPtr>& tasks, int max_level, const SweepOptions& options = {});

/// Piecewise-linear interpolation of (elements, squared error) in log-log
/// space; the curve must be sorted by element count. Returns NaN outside the
/// covered element range or where an error is not positive.
double interpolate_front(std::span<const ParetoPoint> front, double elements);

void write_pareto_csv(const std::string& path, std::span<const ParetoPoint> points);
std::vector<ParetoPoint> read_pareto_csv(const std::string& path);
void write_runs_csv(const std::string& path, std::span<const RunRecord> runs);

// ---------------------------------------------------------------------------

struct SvgOptions {
  int width = 800;
  double stroke_width = 0.5;
};

/// Triangles filled by a scalar colormap over per-element values.
void render_mesh_svg(const mesh::TriMesh& mesh, std::span<const double> element_values, const std::string& path,
                     const SvgOptions& options = {});
/// Colors each element by the mean of its vertex values.
void render_solution_svg(const fem::FemSolution& sol, const std::string& path, const SvgOptions& options = {});

}  // namespace asmr::eval
