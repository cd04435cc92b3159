#pragma once

// Refinement episodes: elements are agents that split, receive local rewards
// and observe a graph of their neighbourhood.

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "asmr/mesh.hpp"
#include "asmr/rng.hpp"
#include "asmr/tasks.hpp"

namespace asmr::env {

enum class RewardVariant { Max, VolumeScaled };

std::string to_string(RewardVariant v);
RewardVariant reward_variant_from_string(const std::string& s);

struct EnvConfig {
  int horizon = 4;
  double alpha_min = 1e-3;
  double alpha_max = 1e-1;
  RewardVariant reward = RewardVariant::Max;
  mesh::MappingVariant mapping = mesh::MappingVariant::NormalizedSum;
  /// Scale child errors by |old|/|new| inside the max term.
  bool reward_uses_normalized_phi = false;
  int element_cap = 20000;
  double cap_penalty = -1000.0;
  Exec exec = Exec::Parallel;
};

inline constexpr int kNodeFeatures = 6;
inline constexpr int kEdgeFeatures = 1;

/// Node features per element: mean and population std of the solution at the
/// vertices, volume, t/T, log10(alpha), task feature at the midpoint.
struct ObservationGraph {
  Eigen::MatrixXd node_features;            // N x kNodeFeatures
  std::vector<std::array<int, 2>> edges;    // directed (sender, receiver)
  Eigen::MatrixXd edge_features;            // E x kEdgeFeatures

  int num_nodes() const { return static_cast<int>(node_features.rows()); }
  int num_edges() const { return static_cast<int>(edges.size()); }
};

ObservationGraph build_graph(const fem::FemSolution& sol, std::span<const double> task_features,
                             double time_fraction, double alpha);

/// Normalized per-element errors.
struct ElementErrors {
  std::vector<double> max;         // divided by the initial error total
  std::vector<double> integrated;  // divided by the initial integrated total
};

ElementErrors compute_element_errors(const fem::FemSolution& sol, const tasks::TaskInstance& task,
                                     Exec exec = Exec::Parallel);

/// err_i - max_{children j} scale * err_j - alpha (children_i - 1); exactly 0
/// for elements with a single child.
Eigen::VectorXd max_rewards(std::span<const double> old_errors, std::span<const double> new_errors,
                            std::span<const int> parent_of, double alpha, double child_scale = 1.0);

/// (err_i - sum_j err_j) / volume_i - alpha (children_i - 1) on integrated
/// errors; exactly 0 for elements with a single child.
Eigen::VectorXd volume_rewards(std::span<const double> old_integrated, std::span<const double> new_integrated,
                               std::span<const int> parent_of, std::span<const double> old_volumes,
                               double alpha);

struct EpisodeState {
  tasks::TaskPtr task;
  EnvConfig config;
  int t = 0;
  double alpha = 0.0;
  mesh::MeshPtr mesh;
  fem::FemSolution solution;
  ElementErrors errors;
  std::vector<mesh::AgentMapping> mappings;
  bool done = false;
};

ObservationGraph build_observation(const EpisodeState& state);

/// Samples alpha log-uniformly from the configured range.
EpisodeState reset(const tasks::TaskPtr& task, const EnvConfig& config, Rng& rng);
/// Uses a fixed alpha (inference).
EpisodeState reset_with_alpha(const tasks::TaskPtr& task, const EnvConfig& config, double alpha);

enum class Termination { None, Horizon, Cap };
std::string to_string(Termination t);

struct StepInfo {
  int old_elements = 0;
  int new_elements = 0;
  double old_error_sum = 0.0;
  double new_error_sum = 0.0;
  Termination termination = Termination::None;
};

struct StepOutcome {
  ObservationGraph next_observation;
  Eigen::VectorXd rewards;  // one per old element
  mesh::AgentMapping mapping;
  bool done = false;
  StepInfo info;
};

/// Refines, solves, scores and advances the episode. Throws if the episode is
/// over or the action count does not match the element count.
StepOutcome step(EpisodeState& state, const std::vector<bool>& actions);

struct TraceRow {
  int step = 0;
  int old_elements = 0;
  int new_elements = 0;
  double old_error_sum = 0.0;
  double new_error_sum = 0.0;
  double reward_sum = 0.0;
  double alpha = 0.0;
  Termination termination = Termination::None;
};

TraceRow trace_row(int step, double alpha, const StepOutcome& outcome);
void write_trace_csv(const std::string& path, std::span<const TraceRow> rows);

}  // namespace asmr::env
