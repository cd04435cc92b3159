#include "asmr/tasks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <unistd.h>

#include "asmr/rng.hpp"

namespace asmr::tasks {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kCacheFormatVersion = 1;
constexpr std::uint64_t kSpecStream = 0x7461736b;  // "task"

}  // namespace

std::string to_string(TaskKind k) { return k == TaskKind::Laplace ? "laplace" : "poisson"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "laplace") return TaskKind::Laplace;
  if (s == "poisson") return TaskKind::Poisson;
  throw std::invalid_argument("unknown task kind: " + s);
}

std::string to_string(Split s) { return s == Split::Train ? "train" : "eval"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "eval") return Split::Eval;
  throw std::invalid_argument("unknown split: " + s);
}

std::array<double, 3> GaussianComponent::covariance() const {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * c * var_u + s * s * var_v, c * s * (var_u - var_v), s * s * var_u + c * c * var_v};
}

double GaussianComponent::density(Point2 p) const {
  const double c = std::cos(angle), s = std::sin(angle);
  const Point2 d = p - mean;
  const double du = c * d.x + s * d.y;
  const double dv = -s * d.x + c * d.y;
  const double q = du * du / var_u + dv * dv / var_v;
  return std::exp(-0.5 * q) / (2.0 * std::numbers::pi * std::sqrt(var_u * var_v));
}

// --- sampling ---------------------------------------------------------------

TaskSpec sample_task(TaskKind kind, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, {static_cast<std::uint64_t>(kind)});
  TaskSpec s;
  s.kind = kind;
  s.seed = seed;
  if (kind == TaskKind::Laplace) {
    s.hole_size = {rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25)};
    s.hole_center = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
    return s;
  }
  s.corner = {rng.uniform(0.2, 0.95), rng.uniform(0.2, 0.95)};
  double total = 0.0;
  for (int k = 0; k < 3; ++k) {
    GaussianComponent g;
    do {
      g.mean = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
    } while (!inside_domain(s, g.mean));
    g.var_u = rng.log_uniform(1e-4, 1e-3);
    g.var_v = rng.log_uniform(1e-4, 1e-3);
    g.angle = rng.uniform(0.0, std::numbers::pi);
    g.weight = std::exp(rng.normal()) + 1.0;
    total += g.weight;
    s.gmm.push_back(g);
  }
  for (auto& g : s.gmm) g.weight /= total;
  return s;
}

std::vector<TaskSpec> generate_specs(TaskKind kind, std::uint64_t master_seed, Split split, int count) {
  std::vector<TaskSpec> specs;
  for (int i = 0; i < count; ++i) {
    Rng r = Rng::stream(master_seed, {kSpecStream, static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(i)});
    specs.push_back(sample_task(kind, r()));
  }
  return specs;
}

// --- geometry ---------------------------------------------------------------

namespace {

Point2 hole_lo(const TaskSpec& s) { return s.hole_center - 0.5 * s.hole_size; }
Point2 hole_hi(const TaskSpec& s) { return s.hole_center + 0.5 * s.hole_size; }

}  // namespace

bool inside_domain(const TaskSpec& s, Point2 p) {
  if (p.x <= 0.0 || p.x >= 1.0 || p.y <= 0.0 || p.y >= 1.0) return false;
  if (s.kind == TaskKind::Laplace) {
    const Point2 lo = hole_lo(s), hi = hole_hi(s);
    return !(p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y);
  }
  return !(p.x >= s.corner.x && p.y >= s.corner.y);
}

double domain_area(const TaskSpec& s) {
  if (s.kind == TaskKind::Laplace) return 1.0 - s.hole_size.x * s.hole_size.y;
  return 1.0 - (1.0 - s.corner.x) * (1.0 - s.corner.y);
}

double load(const TaskSpec& s, Point2 p) {
  double f = 0.0;
  for (const auto& g : s.gmm) f += g.weight * g.density(p);
  return f;
}

double task_feature(const TaskSpec& s, Point2 p) {
  if (s.kind == TaskKind::Poisson) return load(s, p);
  const Point2 lo = hole_lo(s), hi = hole_hi(s);
  const double dx = std::max({lo.x - p.x, 0.0, p.x - hi.x});
  const double dy = std::max({lo.y - p.y, 0.0, p.y - hi.y});
  return std::hypot(dx, dy);
}

fem::PdeProblem make_problem(const TaskSpec& s) {
  fem::PdeProblem p;
  if (s.kind == TaskKind::Laplace) {
    p.kind = fem::PdeKind::Laplace;
    p.dirichlet = {{1, 1.0}, {2, 0.0}};
  } else {
    p.kind = fem::PdeKind::Poisson;
    p.load = [s](Point2 x) { return load(s, x); };
    p.dirichlet = {{1, 0.0}, {2, 0.0}};
  }
  return p;
}

// --- mesher -----------------------------------------------------------------

namespace {

std::vector<double> axis_nodes(std::vector<double> breaks, double cell) {
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());
  std::vector<double> nodes{breaks.front()};
  for (std::size_t k = 0; k + 1 < breaks.size(); ++k) {
    const double a = breaks[k], b = breaks[k + 1];
    const int n = std::max(1, static_cast<int>(std::lround((b - a) / cell)));
    for (int i = 1; i < n; ++i) nodes.push_back(a + (b - a) * i / n);
    nodes.push_back(b);
  }
  return nodes;
}

// Positive if d lies strictly inside the circumcircle of counter-clockwise (a, b, c).
double incircle(Point2 a, Point2 b, Point2 c, Point2 d) {
  const Point2 ad = a - d, bd = b - d, cd = c - d;
  const double a2 = dot(ad, ad), b2 = dot(bd, bd), c2 = dot(cd, cd);
  return a2 * cross(bd, cd) - b2 * cross(ad, cd) + c2 * cross(ad, bd);
}

}  // namespace

mesh::TriMesh delaunay_flip(const mesh::TriMesh& input) {
  const auto& verts = input.vertices();
  std::vector<mesh::Triangle> tris = input.triangles();
  for (;;) {
    std::map<mesh::Edge, std::vector<std::pair<int, int>>> uses;  // edge -> (triangle, local edge)
    for (int t = 0; t < static_cast<int>(tris.size()); ++t) {
      for (int k = 0; k < 3; ++k) {
        const auto& tri = tris[static_cast<std::size_t>(t)];
        uses[mesh::make_edge(tri[static_cast<std::size_t>(k)], tri[static_cast<std::size_t>((k + 1) % 3)])]
            .emplace_back(t, k);
      }
    }
    std::vector<bool> touched(tris.size(), false);
    bool flipped = false;
    for (const auto& [edge, list] : uses) {
      if (list.size() != 2) continue;
      const auto [t1, k1] = list[0];
      const auto [t2, k2] = list[1];
      if (touched[static_cast<std::size_t>(t1)] || touched[static_cast<std::size_t>(t2)]) continue;
      const auto& T1 = tris[static_cast<std::size_t>(t1)];
      const auto& T2 = tris[static_cast<std::size_t>(t2)];
      const int a = T1[static_cast<std::size_t>(k1)];
      const int b = T1[static_cast<std::size_t>((k1 + 1) % 3)];
      const int c = T1[static_cast<std::size_t>((k1 + 2) % 3)];
      const int d = T2[static_cast<std::size_t>((k2 + 2) % 3)];
      const Point2 pa = verts[static_cast<std::size_t>(a)], pb = verts[static_cast<std::size_t>(b)];
      const Point2 pc = verts[static_cast<std::size_t>(c)], pd = verts[static_cast<std::size_t>(d)];
      const double scale = squared_distance(pa, pd) + squared_distance(pb, pd) + squared_distance(pc, pd);
      if (incircle(pa, pb, pc, pd) <= 1e-12 * scale * scale) continue;
      if (orient(pa, pd, pc) <= 0.0 || orient(pd, pb, pc) <= 0.0) continue;
      tris[static_cast<std::size_t>(t1)] = {a, d, c};
      tris[static_cast<std::size_t>(t2)] = {d, b, c};
      touched[static_cast<std::size_t>(t1)] = touched[static_cast<std::size_t>(t2)] = true;
      flipped = true;
    }
    if (!flipped) break;
  }
  return mesh::TriMesh(verts, std::move(tris), input.boundary_edges());
}

mesh::TriMesh initial_mesh_for_domain(const TaskSpec& s, double target_size) {
  if (!(target_size > 0.0)) throw std::invalid_argument("initial_mesh_for_domain: target size must be positive");
  // Right triangles with legs of length `cell` have the area of an equilateral triangle of side h.
  const double cell = target_size * std::sqrt(std::sqrt(3.0) / 2.0);
  std::vector<double> bx{0.0, 1.0}, by{0.0, 1.0};
  if (s.kind == TaskKind::Laplace) {
    bx.push_back(hole_lo(s).x);
    bx.push_back(hole_hi(s).x);
    by.push_back(hole_lo(s).y);
    by.push_back(hole_hi(s).y);
  } else {
    bx.push_back(s.corner.x);
    by.push_back(s.corner.y);
  }
  const auto xs = axis_nodes(bx, cell);
  const auto ys = axis_nodes(by, cell);
  const int nx = static_cast<int>(xs.size()), ny = static_cast<int>(ys.size());

  std::vector<int> id(static_cast<std::size_t>(nx * ny), -1);
  std::vector<Point2> verts;
  auto vertex = [&](int i, int j) {
    int& v = id[static_cast<std::size_t>(j * nx + i)];
    if (v < 0) {
      v = static_cast<int>(verts.size());
      verts.push_back({xs[static_cast<std::size_t>(i)], ys[static_cast<std::size_t>(j)]});
    }
    return v;
  };
  std::vector<mesh::Triangle> tris;
  for (int j = 0; j + 1 < ny; ++j) {
    for (int i = 0; i + 1 < nx; ++i) {
      const Point2 c = midpoint({xs[static_cast<std::size_t>(i)], ys[static_cast<std::size_t>(j)]},
                                {xs[static_cast<std::size_t>(i + 1)], ys[static_cast<std::size_t>(j + 1)]});
      if (!inside_domain(s, c)) continue;
      const int a = vertex(i, j), b = vertex(i + 1, j), cc = vertex(i + 1, j + 1), d = vertex(i, j + 1);
      tris.push_back({a, b, cc});
      tris.push_back({a, cc, d});
    }
  }
  if (tris.empty()) throw std::runtime_error("initial_mesh_for_domain: empty triangulation");

  std::map<mesh::Edge, int> count;
  for (const auto& t : tris) {
    for (int k = 0; k < 3; ++k) ++count[mesh::make_edge(t[static_cast<std::size_t>(k)], t[static_cast<std::size_t>((k + 1) % 3)])];
  }
  auto on_outer = [](Point2 p, Point2 q) {
    return (p.x == 0.0 && q.x == 0.0) || (p.x == 1.0 && q.x == 1.0) || (p.y == 0.0 && q.y == 0.0) ||
           (p.y == 1.0 && q.y == 1.0);
  };
  std::vector<mesh::BoundaryEdge> boundary;
  for (const auto& [e, n] : count) {
    if (n != 1) continue;
    const int tag = on_outer(verts[static_cast<std::size_t>(e.a)], verts[static_cast<std::size_t>(e.b)]) ? 1 : 2;
    boundary.push_back({e.a, e.b, tag});
  }
  const mesh::TriMesh grid(std::move(verts), std::move(tris), std::move(boundary));
  return delaunay_flip(grid);
}

// --- serialization ----------------------------------------------------------

namespace {

json point_json(Point2 p) { return json::array({p.x, p.y}); }
Point2 point_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

void to_json(json& j, const TaskSpec& s) {
  j = json{{"kind", to_string(s.kind)}, {"seed", s.seed}};
  if (s.kind == TaskKind::Laplace) {
    j["hole_center"] = point_json(s.hole_center);
    j["hole_size"] = point_json(s.hole_size);
  } else {
    j["corner"] = point_json(s.corner);
    json g = json::array();
    for (const auto& c : s.gmm) {
      g.push_back({{"mean", point_json(c.mean)}, {"var_u", c.var_u}, {"var_v", c.var_v},
                   {"angle", c.angle}, {"weight", c.weight}});
    }
    j["gmm"] = g;
  }
}

void from_json(const json& j, TaskSpec& s) {
  s = TaskSpec{};
  s.kind = task_kind_from_string(j.at("kind").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  if (s.kind == TaskKind::Laplace) {
    s.hole_center = point_from(j.at("hole_center"));
    s.hole_size = point_from(j.at("hole_size"));
  } else {
    s.corner = point_from(j.at("corner"));
    for (const auto& c : j.at("gmm")) {
      s.gmm.push_back({point_from(c.at("mean")), c.at("var_u").get<double>(), c.at("var_v").get<double>(),
                       c.at("angle").get<double>(), c.at("weight").get<double>()});
    }
  }
}

std::string content_hash(const TaskSpec& spec, int refinement_depth, double mesh_size) {
  const json key{{"spec", spec}, {"depth", refinement_depth}, {"mesh_size", mesh_size},
                 {"format", kCacheFormatVersion}};
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : key.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

// --- instantiation ----------------------------------------------------------

namespace {

fem::FemSolution load_solution_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return fem::read_solution(in);
}

void write_cache_entry(const fs::path& dir, const std::string& hash, const TaskSpec& spec, int depth,
                       double mesh_size, const mesh::TriMesh& initial, const fem::FemSolution& ref) {
  fs::create_directories(dir.parent_path());
  // Unique temporary name so concurrent writers never share a directory.
  static std::atomic<std::uint64_t> counter{0};
  const fs::path tmp =
      dir.parent_path() / (hash + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++));
  fs::create_directories(tmp);
  mesh::save_mesh((tmp / "initial.mesh").string(), initial);
  {
    std::ofstream out(tmp / "reference.sol");
    fem::write_solution(out, ref);
  }
  {
    std::ofstream out(tmp / "manifest.json");
    out << json{{"hash", hash}, {"spec", spec}, {"refinement_depth", depth}, {"mesh_size", mesh_size},
                {"initial_elements", initial.num_elements()}, {"reference_elements", ref.mesh->num_elements()},
                {"files", {"initial.mesh", "reference.sol"}}}
               .dump(2)
        << '\n';
  }
  std::error_code ec;
  fs::rename(tmp, dir, ec);
  if (ec) fs::remove_all(tmp);  // another writer won the race
}

}  // namespace

TaskInstance instantiate(const TaskSpec& spec, int refinement_depth, const InstanceOptions& options) {
  if (refinement_depth < 0) throw std::invalid_argument("instantiate: negative refinement depth");
  TaskInstance inst;
  inst.spec = spec;
  inst.refinement_depth = refinement_depth;
  inst.mesh_size = options.mesh_size;
  inst.problem = make_problem(spec);

  const std::string hash = content_hash(spec, refinement_depth, options.mesh_size);
  const fs::path dir = options.cache_dir.empty() ? fs::path{} : fs::path(options.cache_dir) / hash;
  std::optional<fem::FemSolution> ref;
  if (!dir.empty() && fs::exists(dir / "manifest.json")) {
    inst.initial_mesh = std::make_shared<const mesh::TriMesh>(mesh::load_mesh((dir / "initial.mesh").string()));
    ref = load_solution_file(dir / "reference.sol");
    inst.from_cache = true;
  } else {
    inst.initial_mesh = std::make_shared<const mesh::TriMesh>(initial_mesh_for_domain(spec, options.mesh_size));
    const auto report = mesh::validate_conforming(*inst.initial_mesh);
    if (!report.ok) throw std::runtime_error("instantiate: mesher produced an invalid mesh: " + report.message);
    const auto ref_mesh = mesh::uniform_refine(inst.initial_mesh, refinement_depth);
    ref = fem::assemble_and_solve(inst.problem, ref_mesh, {.check_conforming = false});
    if (!dir.empty()) write_cache_entry(dir, hash, spec, refinement_depth, options.mesh_size, *inst.initial_mesh, *ref);
  }
  inst.reference = std::make_shared<const reference::ReferenceData>(std::move(*ref));
  inst.initial_solution = fem::assemble_and_solve(inst.problem, inst.initial_mesh);
  const auto cmp = reference::compare_to_reference(inst.initial_solution, *inst.reference);
  for (double e : cmp.max_error) inst.initial_error_total += e;
  for (double e : cmp.integrated_error) inst.initial_integrated_total += e;
  if (!(inst.initial_error_total > 0.0)) {
    throw std::runtime_error("instantiate: initial mesh already matches the reference (zero error)");
  }
  return inst;
}

std::vector<TaskPtr> instantiate_all(const TaskSet& set, int workers) {
  const int n = static_cast<int>(set.specs.size());
  std::vector<TaskPtr> out(static_cast<std::size_t>(n));
  const InstanceOptions opt{set.mesh_size, set.cache_dir};
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1) num_threads(std::max(1, workers))
  for (int i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] =
          std::make_shared<const TaskInstance>(instantiate(set.specs[static_cast<std::size_t>(i)], set.refinement_depth, opt));
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

// --- manifests --------------------------------------------------------------

json manifest_json(const TaskSet& set) {
  json tasks = json::array();
  for (const auto& s : set.specs) {
    const std::string hash = content_hash(s, set.refinement_depth, set.mesh_size);
    json entry{{"spec", s}, {"hash", hash}};
    if (!set.cache_dir.empty()) entry["path"] = (fs::path(set.cache_dir) / hash).string();
    tasks.push_back(entry);
  }
  return json{{"kind", to_string(set.kind)},
              {"master_seed", set.master_seed},
              {"split", to_string(set.split)},
              {"refinement_depth", set.refinement_depth},
              {"mesh_size", set.mesh_size},
              {"cache_dir", set.cache_dir},
              {"tasks", tasks}};
}

TaskSet task_set_from_json(const json& j) {
  TaskSet set;
  set.kind = task_kind_from_string(j.at("kind").get<std::string>());
  set.master_seed = j.at("master_seed").get<std::uint64_t>();
  set.split = split_from_string(j.at("split").get<std::string>());
  set.refinement_depth = j.at("refinement_depth").get<int>();
  set.mesh_size = j.at("mesh_size").get<double>();
  set.cache_dir = j.value("cache_dir", std::string{});
  for (const auto& t : j.at("tasks")) set.specs.push_back(t.at("spec").get<TaskSpec>());
  return set;
}

void write_manifest(const std::string& path, const TaskSet& set) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << manifest_json(set).dump(2) << '\n';
}

TaskSet read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return task_set_from_json(json::parse(in));
}

}  // namespace asmr::tasks
