#include "asmr/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "asmr/reference.hpp"

namespace asmr::baselines {

std::string to_string(HeuristicKind k) {
  switch (k) {
    case HeuristicKind::Uniform: return "uniform";
    case HeuristicKind::Oracle: return "oracle";
    case HeuristicKind::MaxOracle: return "max_oracle";
    case HeuristicKind::Zz: return "zz";
  }
  return "uniform";
}

HeuristicKind heuristic_kind_from_string(const std::string& s) {
  if (s == "uniform") return HeuristicKind::Uniform;
  if (s == "oracle") return HeuristicKind::Oracle;
  if (s == "max_oracle") return HeuristicKind::MaxOracle;
  if (s == "zz") return HeuristicKind::Zz;
  throw std::invalid_argument("unknown heuristic: " + s);
}

void HeuristicConfig::validate() const {
  if (!(theta > 0.0 && theta <= 1.0)) throw std::invalid_argument("HeuristicConfig: theta must lie in (0, 1]");
  if (steps < 0 || initial_uniform_refinements < 0) throw std::invalid_argument("HeuristicConfig: negative step count");
  if (element_cap <= 0) throw std::invalid_argument("HeuristicConfig: element cap must be positive");
}

std::vector<bool> threshold_marks(const std::vector<double>& estimates, double theta) {
  const double top = estimates.empty() ? 0.0 : *std::max_element(estimates.begin(), estimates.end());
  std::vector<bool> marks(estimates.size(), false);
  if (!(top > 0.0)) return marks;
  const double cut = theta * top;
  for (std::size_t i = 0; i < estimates.size(); ++i) marks[i] = estimates[i] > cut;
  return marks;
}

std::vector<double> zz_error_estimate(const fem::FemSolution& sol, Exec exec) {
  const auto& m = *sol.mesh;
  const auto grads = fem::element_gradients(sol);
  const int ne = static_cast<int>(m.num_elements());
  std::vector<Point2> rec(m.num_vertices(), {0.0, 0.0});
  std::vector<double> weight(m.num_vertices(), 0.0);
  for (int t = 0; t < ne; ++t) {
    const double a = m.element_volumes()[static_cast<std::size_t>(t)];
    for (int v : m.triangle(t)) {
      rec[static_cast<std::size_t>(v)].x += a * grads[static_cast<std::size_t>(t)].x;
      rec[static_cast<std::size_t>(v)].y += a * grads[static_cast<std::size_t>(t)].y;
      weight[static_cast<std::size_t>(v)] += a;
    }
  }
  for (std::size_t v = 0; v < rec.size(); ++v) {
    if (weight[v] > 0.0) {
      rec[v].x /= weight[v];
      rec[v].y /= weight[v];
    }
  }
  // Edge-midpoint rule, exact for the quadratic integrand.
  std::vector<double> est(static_cast<std::size_t>(ne));
  auto element = [&](int t) {
    const auto& tri = m.triangle(t);
    const Point2 g = grads[static_cast<std::size_t>(t)];
    double sum = 0.0;
    for (int k = 0; k < 3; ++k) {
      const Point2 a = rec[static_cast<std::size_t>(tri[k])], b = rec[static_cast<std::size_t>(tri[(k + 1) % 3])];
      const double dx = 0.5 * (a.x + b.x) - g.x, dy = 0.5 * (a.y + b.y) - g.y;
      sum += dx * dx + dy * dy;
    }
    est[static_cast<std::size_t>(t)] = std::sqrt(m.element_volumes()[static_cast<std::size_t>(t)] * sum / 3.0);
  };
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (int t = 0; t < ne; ++t) element(t);
  } else {
    for (int t = 0; t < ne; ++t) element(t);
  }
  return est;
}

std::vector<double> oracle_error_estimate(const fem::FemSolution& sol, const tasks::TaskInstance& task,
                                          OracleVariant variant, Exec exec) {
  auto cmp = reference::compare_to_reference(sol, *task.reference, exec);
  return variant == OracleVariant::Integrated ? std::move(cmp.integrated_error) : std::move(cmp.max_error);
}

HeuristicResult run_heuristic(const tasks::TaskInstance& task, const HeuristicConfig& config) {
  config.validate();
  const fem::SolveOptions solve{.check_conforming = false, .assembly = Exec::Parallel};
  HeuristicResult res;
  mesh::MeshPtr m = task.initial_mesh;
  if (config.kind == HeuristicKind::Zz && config.initial_uniform_refinements > 0) {
    m = mesh::uniform_refine(m, config.initial_uniform_refinements);
  }
  res.solution = m == task.initial_mesh ? task.initial_solution : fem::assemble_and_solve(task.problem, m, solve);
  for (int s = 0; s < config.steps; ++s) {
    std::vector<double> est;
    switch (config.kind) {
      case HeuristicKind::Uniform: est.assign(m->num_elements(), 1.0); break;
      case HeuristicKind::Oracle: est = oracle_error_estimate(res.solution, task, OracleVariant::Integrated); break;
      case HeuristicKind::MaxOracle: est = oracle_error_estimate(res.solution, task, OracleVariant::Max); break;
      case HeuristicKind::Zz: est = zz_error_estimate(res.solution); break;
    }
    const auto marks = threshold_marks(est, config.theta);
    HeuristicStep st;
    st.step = s;
    st.elements = static_cast<int>(m->num_elements());
    st.marked = static_cast<int>(std::count(marks.begin(), marks.end(), true));
    for (double e : est) st.estimate_sum += e;
    const auto refined = mesh::refine_rgb(m, marks);
    st.new_elements = static_cast<int>(refined.child_mesh->num_elements());
    res.trace.push_back(st);
    if (st.new_elements > config.element_cap) {
      res.capped = true;
      break;
    }
    if (st.new_elements == st.elements) break;  // nothing marked; later passes see the same estimates
    m = refined.child_mesh;
    res.solution = fem::assemble_and_solve(task.problem, m, solve);
  }
  return res;
}

void write_heuristic_trace_csv(const std::string& path, const std::vector<HeuristicStep>& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(17);
  out << "step,elements,marked,new_elements,estimate_sum\n";
  for (const auto& s : trace) {
    out << s.step << ',' << s.elements << ',' << s.marked << ',' << s.new_elements << ',' << s.estimate_sum << '\n';
  }
}

}  // namespace asmr::baselines
