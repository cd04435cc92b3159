#include "asmr/eval.hpp"

#include <algorithm>
#include <array>
#include <exception>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "asmr/reference.hpp"

namespace asmr::eval {

RawErrors raw_errors(std::span<const double> point_diff, std::span<const double> volumes) {
  if (point_diff.size() != volumes.size()) throw std::invalid_argument("raw_errors: size mismatch");
  RawErrors r;
  for (std::size_t p = 0; p < point_diff.size(); ++p) {
    r.squared += volumes[p] * point_diff[p] * point_diff[p];
    r.mean += volumes[p] * point_diff[p];
  }
  if (point_diff.empty()) return r;
  const std::size_t k = std::max<std::size_t>(1, point_diff.size() / 1000);
  std::vector<double> sorted(point_diff.begin(), point_diff.end());
  std::partial_sort(sorted.begin(), sorted.begin() + static_cast<long>(k), sorted.end(), std::greater<>());
  for (std::size_t i = 0; i < k; ++i) r.top += sorted[i];
  r.top /= static_cast<double>(k);
  return r;
}

namespace {

RawErrors raw_for(const fem::FemSolution& sol, const tasks::TaskInstance& task, Exec exec) {
  const auto cmp = reference::compare_to_reference(sol, *task.reference, exec);
  return raw_errors(cmp.point_diff, task.reference->volumes());
}

double ratio(double a, double b) { return b > 0.0 ? a / b : (a > 0.0 ? std::numeric_limits<double>::infinity() : 0.0); }

}  // namespace

MeshMetrics mesh_metrics(const fem::FemSolution& sol, const tasks::TaskInstance& task, Exec exec) {
  const RawErrors base = raw_for(task.initial_solution, task, exec);
  const RawErrors cur = sol.mesh == task.initial_mesh ? base : raw_for(sol, task, exec);
  MeshMetrics m;
  m.element_count = static_cast<int>(sol.mesh->num_elements());
  m.squared_error = ratio(cur.squared, base.squared);
  m.mean_error = ratio(cur.mean, base.mean);
  m.top_error = ratio(cur.top, base.top);
  return m;
}

double iqm(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("iqm: empty input");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  const double lo = 0.25 * n, hi = 0.75 * n;
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double a = static_cast<double>(i), b = a + 1.0;
    const double w = std::min(b, hi) - std::max(a, lo);
    if (w > 0.0) sum += w * values[i];
  }
  return sum / (hi - lo);
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> log_space(double lo, double hi, int n) {
  if (n <= 0 || !(lo > 0.0) || !(hi > 0.0)) throw std::invalid_argument("log_space: need n > 0 and positive bounds");
  std::vector<double> v(static_cast<std::size_t>(n));
  if (n == 1) {
    v[0] = lo;
    return v;
  }
  const double a = std::log(lo), b = std::log(hi);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = std::exp(a + (b - a) * i / (n - 1));
  v.front() = lo;
  v.back() = hi;
  return v;
}

// --- sweeps -----------------------------------------------------------------

ParetoPoint aggregate(const std::string& method, std::uint64_t seed, double parameter, std::span<const RunRecord> runs,
                      bool outlier_filter) {
  std::vector<double> el, sq, mean, top;
  for (const auto& r : runs) {
    if (outlier_filter && r.termination == "cap") continue;
    el.push_back(r.metrics.element_count);
    sq.push_back(r.metrics.squared_error);
    mean.push_back(r.metrics.mean_error);
    top.push_back(r.metrics.top_error);
  }
  ParetoPoint p;
  p.method = method;
  p.seed = seed;
  p.parameter = parameter;
  p.runs = static_cast<int>(el.size());
  if (el.empty()) {
    p.iqm_elements = p.iqm_squared = p.iqm_mean = p.iqm_top = std::numeric_limits<double>::quiet_NaN();
    return p;
  }
  p.iqm_elements = iqm(el);
  p.iqm_squared = iqm(sq);
  p.iqm_mean = iqm(mean);
  p.iqm_top = iqm(top);
  return p;
}

env::EnvConfig env_config_for(const policy::Checkpoint& ckpt, int horizon) {
  env::EnvConfig c = ckpt.training.is_object() && ckpt.training.contains("env")
                         ? train::env_config_from_json(ckpt.training.at("env"))
                         : env::EnvConfig{};
  if (horizon > 0) c.horizon = horizon;
  return c;
}

PolicyRollout rollout_policy(const policy::Checkpoint& ckpt, const tasks::TaskPtr& task, const env::EnvConfig& config,
                             double alpha) {
  const policy::Mpn net(ckpt.config);
  const train::PolicyView view{&net, ckpt.params, &ckpt.normalizer};
  Rng unused(0);
  PolicyRollout r;
  r.episode = train::collect_episode(view, task, 0, config, unused, {.alpha = alpha, .deterministic = true}, &r.final_state);
  r.metrics = mesh_metrics(r.final_state.solution, *task, config.exec);
  for (std::size_t t = 0; t < r.episode.steps.size(); ++t) {
    const auto& tr = r.episode.steps[t];
    r.trace.push_back({static_cast<int>(t), tr.info.old_elements, tr.info.new_elements, tr.info.old_error_sum,
                       tr.info.new_error_sum, tr.rewards.sum(), alpha, tr.info.termination});
  }
  return r;
}

namespace {

template <typename Job>
SweepResult run_jobs(const std::string& method, const std::vector<double>& params, std::size_t num_tasks,
                     const SweepOptions& options, Job job) {
  const std::size_t total = params.size() * num_tasks;
  std::vector<RunRecord> runs(total);
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1) num_threads(std::max(1, options.workers))
  for (std::size_t k = 0; k < total; ++k) {
    try {
      RunRecord& r = runs[k];
      r.method = method;
      r.parameter = params[k / num_tasks];
      r.task_index = static_cast<int>(k % num_tasks);
      job(r);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  SweepResult res;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::span<const RunRecord> slice(runs.data() + i * num_tasks, num_tasks);
    res.points.push_back(aggregate(method, options.seed, params[i], slice, options.outlier_filter));
  }
  res.runs = std::move(runs);
  return res;
}

}  // namespace

SweepResult pareto_sweep(const policy::Checkpoint& ckpt, const std::vector<tasks::TaskPtr>& task_list,
                         const env::EnvConfig& config, const std::vector<double>& alphas, const SweepOptions& options) {
  if (task_list.empty() || alphas.empty()) throw std::invalid_argument("pareto_sweep: need tasks and alpha values");
  env::EnvConfig cfg = config;
  if (options.workers > 1) cfg.exec = Exec::Serial;
  return run_jobs("asmr", alphas, task_list.size(), options, [&](RunRecord& r) {
    const auto roll = rollout_policy(ckpt, task_list[static_cast<std::size_t>(r.task_index)], cfg, r.parameter);
    r.metrics = roll.metrics;
    r.termination = env::to_string(roll.episode.termination);
  });
}

SweepResult baseline_sweep(const std::vector<tasks::TaskPtr>& task_list, const baselines::HeuristicConfig& config,
                           const std::vector<double>& thetas, const SweepOptions& options) {
  if (task_list.empty() || thetas.empty()) throw std::invalid_argument("baseline_sweep: need tasks and theta values");
  return run_jobs(baselines::to_string(config.kind), thetas, task_list.size(), options, [&](RunRecord& r) {
    baselines::HeuristicConfig c = config;
    c.theta = r.parameter;
    const auto& task = *task_list[static_cast<std::size_t>(r.task_index)];
    const auto res = baselines::run_heuristic(task, c);
    r.metrics = mesh_metrics(res.solution, task);
    r.termination = res.capped ? "cap" : "done";
  });
}

SweepResult uniform_sweep(const std::vector<tasks::TaskPtr>& task_list, int max_level, const SweepOptions& options) {
  if (task_list.empty() || max_level < 0) throw std::invalid_argument("uniform_sweep: need tasks and a level >= 0");
  std::vector<double> levels;
  for (int k = 0; k <= max_level; ++k) levels.push_back(k);
  return run_jobs("uniform", levels, task_list.size(), options, [&](RunRecord& r) {
    const auto& task = *task_list[static_cast<std::size_t>(r.task_index)];
    const int k = static_cast<int>(r.parameter);
    const auto sol = k == 0 ? task.initial_solution
                            : fem::assemble_and_solve(task.problem, mesh::uniform_refine(task.initial_mesh, k),
                                                      {.check_conforming = false, .assembly = Exec::Parallel});
    r.metrics = mesh_metrics(sol, task);
    r.termination = "done";
  });
}

double interpolate_front(std::span<const ParetoPoint> front, double elements) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i + 1 < front.size(); ++i) {
    const auto& a = front[i];
    const auto& b = front[i + 1];
    if (elements < a.iqm_elements || elements > b.iqm_elements) continue;
    if (!(a.iqm_squared > 0.0) || !(b.iqm_squared > 0.0)) return nan;
    if (b.iqm_elements == a.iqm_elements) return a.iqm_squared;
    const double s = (std::log(elements) - std::log(a.iqm_elements)) / (std::log(b.iqm_elements) - std::log(a.iqm_elements));
    return std::exp(std::log(a.iqm_squared) + s * (std::log(b.iqm_squared) - std::log(a.iqm_squared)));
  }
  if (front.size() == 1 && elements == front[0].iqm_elements) return front[0].iqm_squared;
  return nan;
}

// --- CSV --------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

void write_pareto_csv(const std::string& path, std::span<const ParetoPoint> points) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "method,seed,parameter,metric,runs,iqm_elements,iqm_error\n";
  for (const auto& p : points) {
    const std::pair<const char*, double> metrics[] = {{"squared", p.iqm_squared}, {"mean", p.iqm_mean}, {"top", p.iqm_top}};
    for (const auto& [name, value] : metrics) {
      out << p.method << ',' << p.seed << ',' << fmt(p.parameter) << ',' << name << ',' << p.runs << ','
          << fmt(p.iqm_elements) << ',' << fmt(value) << '\n';
    }
  }
}

std::vector<ParetoPoint> read_pareto_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::getline(in, line);
  std::vector<ParetoPoint> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 7) throw std::runtime_error(path + ": malformed row: " + line);
    const std::string method = c[0];
    const std::uint64_t seed = std::stoull(c[1]);
    const double parameter = std::stod(c[2]);
    if (points.empty() || points.back().method != method || points.back().seed != seed ||
        points.back().parameter != parameter) {
      ParetoPoint p;
      p.method = method;
      p.seed = seed;
      p.parameter = parameter;
      p.runs = std::stoi(c[4]);
      p.iqm_elements = std::stod(c[5]);
      points.push_back(p);
    }
    const double value = std::stod(c[6]);
    if (c[3] == "squared") {
      points.back().iqm_squared = value;
    } else if (c[3] == "mean") {
      points.back().iqm_mean = value;
    } else if (c[3] == "top") {
      points.back().iqm_top = value;
    } else {
      throw std::runtime_error(path + ": unknown metric " + c[3]);
    }
  }
  return points;
}

void write_runs_csv(const std::string& path, std::span<const RunRecord> runs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "method,parameter,task,elements,squared_error,mean_error,top_error,termination\n";
  for (const auto& r : runs) {
    out << r.method << ',' << fmt(r.parameter) << ',' << r.task_index << ',' << r.metrics.element_count << ','
        << fmt(r.metrics.squared_error) << ',' << fmt(r.metrics.mean_error) << ',' << fmt(r.metrics.top_error) << ','
        << r.termination << '\n';
  }
}

// --- SVG --------------------------------------------------------------------

namespace {

std::array<int, 3> colormap(double t) {
  static constexpr std::array<std::array<int, 3>, 5> anchors{
      {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  if (!std::isfinite(t)) return {160, 160, 160};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  std::array<int, 3> c{};
  for (int k = 0; k < 3; ++k) {
    c[static_cast<std::size_t>(k)] = static_cast<int>(std::lround(
        anchors[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] * (1 - f) +
        anchors[static_cast<std::size_t>(i + 1)][static_cast<std::size_t>(k)] * f));
  }
  return c;
}

}  // namespace

void render_mesh_svg(const mesh::TriMesh& mesh, std::span<const double> values, const std::string& path,
                     const SvgOptions& options) {
  if (values.size() != mesh.num_elements()) throw std::invalid_argument("render_mesh_svg: one value per element required");
  double x0 = INFINITY, y0 = INFINITY, x1 = -INFINITY, y1 = -INFINITY;
  for (const auto& p : mesh.vertices()) {
    x0 = std::min(x0, p.x);
    y0 = std::min(y0, p.y);
    x1 = std::max(x1, p.x);
    y1 = std::max(y1, p.y);
  }
  if (mesh.empty()) x0 = y0 = 0.0, x1 = y1 = 1.0;
  const double span = std::max({x1 - x0, y1 - y0, 1e-300});
  const double scale = options.width / span;
  const double height = (y1 - y0) * scale;
  double lo = INFINITY, hi = -INFINITY;
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" "
                "height=\"%d\" viewBox=\"0 0 %d %d\">\n<g stroke=\"#202020\" stroke-width=\"%.3f\" stroke-linejoin=\"round\">\n",
                options.width, static_cast<int>(std::ceil(height)), options.width, static_cast<int>(std::ceil(height)),
                options.stroke_width);
  out << buf;
  for (std::size_t t = 0; t < mesh.num_elements(); ++t) {
    const double v = values[t];
    const double u = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    const auto c = colormap(std::isfinite(v) ? u : NAN);
    out << "<polygon points=\"";
    for (int k = 0; k < 3; ++k) {
      const Point2 p = mesh.vertex(mesh.triangles()[t][static_cast<std::size_t>(k)]);
      std::snprintf(buf, sizeof buf, "%s%.3f,%.3f", k ? " " : "", (p.x - x0) * scale, (y1 - p.y) * scale);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "\" fill=\"#%02x%02x%02x\"/>\n", c[0], c[1], c[2]);
    out << buf;
  }
  out << "</g>\n</svg>\n";
  if (!out) throw std::runtime_error("failed writing " + path);
}

void render_solution_svg(const fem::FemSolution& sol, const std::string& path, const SvgOptions& options) {
  const auto& m = *sol.mesh;
  std::vector<double> v(m.num_elements());
  for (std::size_t t = 0; t < m.num_elements(); ++t) {
    const auto& tri = m.triangles()[t];
    v[t] = (sol.nodal_values[tri[0]] + sol.nodal_values[tri[1]] + sol.nodal_values[tri[2]]) / 3.0;
  }
  render_mesh_svg(m, v, path, options);
}

}  // namespace asmr::eval
