#pragma once

// Non-learned refinement strategies: uniform refinement and threshold
// marking driven by oracle or recovered-gradient error estimates.

#include <string>
#include <vector>

#include "asmr/fem.hpp"
#include "asmr/parallel.hpp"
#include "asmr/tasks.hpp"

namespace asmr::baselines {

enum class HeuristicKind { Uniform, Oracle, MaxOracle, Zz };

std::string to_string(HeuristicKind k);
HeuristicKind heuristic_kind_from_string(const std::string& s);

struct HeuristicConfig {
  HeuristicKind kind = HeuristicKind::Oracle;
  double theta = 0.5;
  int steps = 4;
  /// Uniform passes applied before the first ZZ step.
  int initial_uniform_refinements = 2;
  int element_cap = 20000;

  void validate() const;
};

struct HeuristicStep {
  int step = 0;
  int elements = 0;
  int marked = 0;
  int new_elements = 0;
  double estimate_sum = 0.0;
};

struct HeuristicResult {
  fem::FemSolution solution;  // on the final mesh
  std::vector<HeuristicStep> trace;
  bool capped = false;  // stopped because the next mesh would exceed the cap
};

/// Marks elements with estimate > theta * max estimate (nothing when all are zero).
std::vector<bool> threshold_marks(const std::vector<double>& estimates, double theta);

/// Recovered nodal gradients (area-weighted averages of element gradients)
/// compared against the element gradient, in the L2 norm over each element.
std::vector<double> zz_error_estimate(const fem::FemSolution& sol, Exec exec = Exec::Parallel);

enum class OracleVariant { Integrated, Max };

/// Reference-based per-element errors (unnormalized).
std::vector<double> oracle_error_estimate(const fem::FemSolution& sol, const tasks::TaskInstance& task,
                                          OracleVariant variant, Exec exec = Exec::Parallel);

/// solve -> estimate -> mark -> refine, `steps` times, then a final solve.
HeuristicResult run_heuristic(const tasks::TaskInstance& task, const HeuristicConfig& config);

void write_heuristic_trace_csv(const std::string& path, const std::vector<HeuristicStep>& trace);

}  // namespace asmr::baselines
