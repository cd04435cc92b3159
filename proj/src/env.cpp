#include "asmr/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace asmr::env {

std::string to_string(RewardVariant v) { return v == RewardVariant::Max ? "max" : "volume_scaled"; }

RewardVariant reward_variant_from_string(const std::string& s) {
  if (s == "max") return RewardVariant::Max;
  if (s == "volume_scaled") return RewardVariant::VolumeScaled;
  throw std::invalid_argument("unknown reward variant: " + s);
}

std::string to_string(Termination t) {
  switch (t) {
    case Termination::None: return "none";
    case Termination::Horizon: return "horizon";
    case Termination::Cap: return "cap";
  }
  return "none";
}

ObservationGraph build_graph(const fem::FemSolution& sol, std::span<const double> task_features,
                             double time_fraction, double alpha) {
  const auto& m = *sol.mesh;
  const int n = static_cast<int>(m.num_elements());
  if (task_features.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("build_graph: one task feature per element required");
  }
  ObservationGraph g;
  g.node_features.resize(n, kNodeFeatures);
  const double log_alpha = std::log10(alpha);
  for (int t = 0; t < n; ++t) {
    const auto& tri = m.triangle(t);
    const double u0 = sol.nodal_values(tri[0]), u1 = sol.nodal_values(tri[1]), u2 = sol.nodal_values(tri[2]);
    const double mean = u0 + ((u1 - u0) + (u2 - u0)) / 3.0;  // exact for equal values
    const double var = ((u0 - mean) * (u0 - mean) + (u1 - mean) * (u1 - mean) + (u2 - mean) * (u2 - mean)) / 3.0;
    g.node_features(t, 0) = mean;
    g.node_features(t, 1) = std::sqrt(var);
    g.node_features(t, 2) = m.element_volumes()[static_cast<std::size_t>(t)];
    g.node_features(t, 3) = time_fraction;
    g.node_features(t, 4) = log_alpha;
    g.node_features(t, 5) = task_features[static_cast<std::size_t>(t)];
  }
  const auto pairs = m.element_adjacency();
  g.edges.reserve(2 * pairs.size());
  g.edge_features.resize(static_cast<Eigen::Index>(2 * pairs.size()), kEdgeFeatures);
  Eigen::Index k = 0;
  for (const auto& [a, b] : pairs) {
    const double d = distance(m.element_midpoints()[static_cast<std::size_t>(a)],
                              m.element_midpoints()[static_cast<std::size_t>(b)]);
    g.edges.push_back({a, b});
    g.edge_features(k++, 0) = d;
    g.edges.push_back({b, a});
    g.edge_features(k++, 0) = d;
  }
  return g;
}

ElementErrors compute_element_errors(const fem::FemSolution& sol, const tasks::TaskInstance& task, Exec exec) {
  auto cmp = reference::compare_to_reference(sol, *task.reference, exec);
  ElementErrors e{std::move(cmp.max_error), std::move(cmp.integrated_error)};
  for (double& v : e.max) v /= task.initial_error_total;
  for (double& v : e.integrated) v /= task.initial_integrated_total;
  return e;
}

namespace {

void check_shapes(std::size_t old_n, std::size_t new_n, std::span<const int> parent_of) {
  if (parent_of.size() != new_n) throw std::invalid_argument("rewards: parent_of must have one entry per child");
  for (int p : parent_of) {
    if (p < 0 || static_cast<std::size_t>(p) >= old_n) throw std::invalid_argument("rewards: parent index out of range");
  }
}

std::vector<int> child_counts(std::size_t old_n, std::span<const int> parent_of) {
  std::vector<int> c(old_n, 0);
  for (int p : parent_of) ++c[static_cast<std::size_t>(p)];
  return c;
}

}  // namespace

Eigen::VectorXd max_rewards(std::span<const double> old_errors, std::span<const double> new_errors,
                            std::span<const int> parent_of, double alpha, double child_scale) {
  check_shapes(old_errors.size(), new_errors.size(), parent_of);
  const auto count = child_counts(old_errors.size(), parent_of);
  std::vector<double> child_max(old_errors.size(), 0.0);
  for (std::size_t j = 0; j < parent_of.size(); ++j) {
    double& m = child_max[static_cast<std::size_t>(parent_of[j])];
    m = std::max(m, child_scale * new_errors[j]);
  }
  Eigen::VectorXd r(static_cast<Eigen::Index>(old_errors.size()));
  for (std::size_t i = 0; i < old_errors.size(); ++i) {
    r(static_cast<Eigen::Index>(i)) =
        count[i] == 1 ? 0.0 : (old_errors[i] - child_max[i]) - alpha * (count[i] - 1);
  }
  return r;
}

Eigen::VectorXd volume_rewards(std::span<const double> old_integrated, std::span<const double> new_integrated,
                               std::span<const int> parent_of, std::span<const double> old_volumes,
                               double alpha) {
  check_shapes(old_integrated.size(), new_integrated.size(), parent_of);
  if (old_volumes.size() != old_integrated.size()) throw std::invalid_argument("volume_rewards: volume count");
  const auto count = child_counts(old_integrated.size(), parent_of);
  std::vector<double> child_sum(old_integrated.size(), 0.0);
  for (std::size_t j = 0; j < parent_of.size(); ++j) child_sum[static_cast<std::size_t>(parent_of[j])] += new_integrated[j];
  Eigen::VectorXd r(static_cast<Eigen::Index>(old_integrated.size()));
  for (std::size_t i = 0; i < old_integrated.size(); ++i) {
    r(static_cast<Eigen::Index>(i)) =
        count[i] == 1 ? 0.0 : (old_integrated[i] - child_sum[i]) / old_volumes[i] - alpha * (count[i] - 1);
  }
  return r;
}

ObservationGraph build_observation(const EpisodeState& s) {
  const auto& m = *s.mesh;
  std::vector<double> features(m.num_elements());
  for (std::size_t t = 0; t < features.size(); ++t) {
    features[t] = tasks::task_feature(s.task->spec, m.element_midpoints()[t]);
  }
  const double frac = s.config.horizon > 0 ? static_cast<double>(s.t) / s.config.horizon : 0.0;
  return build_graph(s.solution, features, frac, s.alpha);
}

EpisodeState reset_with_alpha(const tasks::TaskPtr& task, const EnvConfig& config, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("reset: alpha must be positive");
  EpisodeState s;
  s.task = task;
  s.config = config;
  s.alpha = alpha;
  s.mesh = task->initial_mesh;
  s.solution = task->initial_solution;
  s.errors = compute_element_errors(s.solution, *task, config.exec);
  s.done = config.horizon <= 0;
  return s;
}

EpisodeState reset(const tasks::TaskPtr& task, const EnvConfig& config, Rng& rng) {
  if (!(config.alpha_min > 0.0) || config.alpha_max < config.alpha_min) {
    throw std::invalid_argument("reset: need 0 < alpha_min <= alpha_max");
  }
  const double alpha =
      config.alpha_min == config.alpha_max ? config.alpha_min : rng.log_uniform(config.alpha_min, config.alpha_max);
  return reset_with_alpha(task, config, alpha);
}

namespace {

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

StepOutcome step(EpisodeState& s, const std::vector<bool>& actions) {
  if (s.done) throw std::logic_error("step: episode is over");
  if (actions.size() != s.mesh->num_elements()) throw std::invalid_argument("step: one action per element required");
  const auto refined = mesh::refine_rgb(s.mesh, actions);
  StepOutcome out;
  out.mapping = mesh::build_agent_mapping(refined, s.config.mapping);
  out.info.old_elements = static_cast<int>(s.mesh->num_elements());
  out.info.new_elements = static_cast<int>(refined.child_mesh->num_elements());
  out.info.old_error_sum = sum(s.errors.max);

  if (out.info.new_elements > s.config.element_cap) {
    out.rewards = Eigen::VectorXd::Constant(out.info.old_elements, s.config.cap_penalty);
    out.done = s.done = true;
    out.info.new_error_sum = out.info.old_error_sum;
    out.info.termination = Termination::Cap;
    s.mappings.push_back(out.mapping);
    out.next_observation = build_observation(s);
    return out;
  }

  auto sol = fem::assemble_and_solve(s.task->problem, refined.child_mesh,
                                     {.check_conforming = false, .assembly = s.config.exec});
  auto errors = compute_element_errors(sol, *s.task, s.config.exec);
  if (s.config.reward == RewardVariant::Max) {
    const double scale = s.config.reward_uses_normalized_phi
                             ? static_cast<double>(out.info.old_elements) / out.info.new_elements
                             : 1.0;
    out.rewards = max_rewards(s.errors.max, errors.max, refined.parent_of, s.alpha, scale);
  } else {
    out.rewards = volume_rewards(s.errors.integrated, errors.integrated, refined.parent_of,
                                 s.mesh->element_volumes(), s.alpha);
  }
  s.mesh = refined.child_mesh;
  s.solution = std::move(sol);
  s.errors = std::move(errors);
  s.mappings.push_back(out.mapping);
  ++s.t;
  out.info.new_error_sum = sum(s.errors.max);
  if (s.t >= s.config.horizon) {
    s.done = true;
    out.info.termination = Termination::Horizon;
  }
  out.done = s.done;
  out.next_observation = build_observation(s);
  return out;
}

TraceRow trace_row(int step, double alpha, const StepOutcome& o) {
  return {step, o.info.old_elements, o.info.new_elements, o.info.old_error_sum, o.info.new_error_sum,
          o.rewards.sum(), alpha, o.info.termination};
}

void write_trace_csv(const std::string& path, std::span<const TraceRow> rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(17);
  out << "step,old_elements,new_elements,old_error_sum,new_error_sum,reward_sum,alpha,termination\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.old_elements << ',' << r.new_elements << ',' << r.old_error_sum << ','
        << r.new_error_sum << ',' << r.reward_sum << ',' << r.alpha << ',' << to_string(r.termination) << '\n';
  }
}

}  // namespace asmr::env
