#include "asmr/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace asmr::mesh {

TriMesh::TriMesh(std::vector<Point2> vertices, std::vector<Triangle> triangles,
                 std::vector<BoundaryEdge> boundary_edges)
    : vertices_(std::move(vertices)),
      triangles_(std::move(triangles)),
      boundary_edges_(std::move(boundary_edges)) {
  for (auto& be : boundary_edges_) {
    if (be.a > be.b) std::swap(be.a, be.b);
  }
  std::sort(boundary_edges_.begin(), boundary_edges_.end());

  const std::size_t n = triangles_.size();
  const int nv = static_cast<int>(vertices_.size());
  midpoints_.resize(n);
  volumes_.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& tri = triangles_[t];
    bool in_range = true;
    for (int v : tri) in_range = in_range && v >= 0 && v < nv;
    if (!in_range) {
      midpoints_[t] = {};
      volumes_[t] = 0.0;
      continue;
    }
    const auto c = corners(static_cast<int>(t));
    midpoints_[t] = centroid(c[0], c[1], c[2]);
    volumes_[t] = 0.5 * std::abs(orient(c[0], c[1], c[2]));
  }

  std::vector<std::pair<Edge, int>> half;  // (edge, 3 * t + k)
  half.reserve(3 * n);
  for (std::size_t t = 0; t < n; ++t) {
    for (int k = 0; k < 3; ++k) {
      half.emplace_back(make_edge(triangles_[t][k], triangles_[t][(k + 1) % 3]),
                        static_cast<int>(3 * t) + k);
    }
  }
  std::sort(half.begin(), half.end());
  triangle_edges_.assign(n, {-1, -1, -1});
  for (std::size_t i = 0; i < half.size();) {
    std::size_t j = i;
    const int id = static_cast<int>(edges_.size());
    std::array<int, 2> elems{kNoElement, kNoElement};
    int count = 0;
    while (j < half.size() && half[j].first == half[i].first) {
      const int t = half[j].second / 3;
      triangle_edges_[static_cast<std::size_t>(t)][half[j].second % 3] = id;
      if (count < 2) elems[static_cast<std::size_t>(count)] = t;
      ++count;
      ++j;
    }
    edges_.push_back(half[i].first);
    edge_count_.push_back(count);
    edge_elements_.push_back(elems);
    i = j;
  }
  edge_tags_.assign(edges_.size(), kNoTag);
  for (const auto& be : boundary_edges_) {
    const int id = find_edge(be.a, be.b);
    if (id >= 0) edge_tags_[static_cast<std::size_t>(id)] = be.tag;
  }
}

std::array<Point2, 3> TriMesh::corners(int t) const {
  const auto& tri = triangle(t);
  return {vertex(tri[0]), vertex(tri[1]), vertex(tri[2])};
}

double TriMesh::signed_area(int t) const {
  const auto c = corners(t);
  return 0.5 * orient(c[0], c[1], c[2]);
}

double TriMesh::total_area() const {
  double s = 0.0;
  for (double v : volumes_) s += v;
  return s;
}

int TriMesh::find_edge(int u, int v) const {
  const Edge e = make_edge(u, v);
  auto it = std::lower_bound(edges_.begin(), edges_.end(), e);
  if (it == edges_.end() || *it != e) return -1;
  return static_cast<int>(it - edges_.begin());
}

std::vector<std::array<int, 2>> TriMesh::element_adjacency() const {
  std::vector<std::array<int, 2>> adj;
  for (std::size_t e = 0; e < edges_.size(); ++e) {
    if (edge_count_[e] == 2) adj.push_back(edge_elements_[e]);
  }
  return adj;
}

int refinement_edge(const TriMesh& mesh, int t) {
  const auto& tri = mesh.triangle(t);
  int best = 0;
  double best_len = -1.0;
  Edge best_edge{};
  for (int k = 0; k < 3; ++k) {
    const int u = tri[k];
    const int v = tri[(k + 1) % 3];
    const double len = squared_distance(mesh.vertex(u), mesh.vertex(v));
    const Edge e = make_edge(u, v);
    if (len > best_len || (len == best_len && e < best_edge)) {
      best = k;
      best_len = len;
      best_edge = e;
    }
  }
  return best;
}

RefinementResult refine_rgb(const MeshPtr& mesh_ptr, const std::vector<bool>& marks) {
  const TriMesh& mesh = *mesh_ptr;
  const int n = static_cast<int>(mesh.num_elements());
  if (static_cast<int>(marks.size()) != n) {
    throw std::invalid_argument("refine_rgb: expected " + std::to_string(n) + " marks, got " +
                                std::to_string(marks.size()));
  }
  const auto& tri_edges = mesh.triangle_edges();
  const auto& edge_elems = mesh.edge_elements();

  std::vector<int> ref_edge(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) ref_edge[static_cast<std::size_t>(t)] = refinement_edge(mesh, t);

  std::vector<char> split(mesh.edges().size(), 0);
  std::deque<int> queue;
  auto mark_edge = [&](int e) {
    if (split[static_cast<std::size_t>(e)]) return;
    split[static_cast<std::size_t>(e)] = 1;
    for (int t : edge_elems[static_cast<std::size_t>(e)]) {
      if (t != kNoElement) queue.push_back(t);
    }
  };
  for (int t = 0; t < n; ++t) {
    if (marks[static_cast<std::size_t>(t)]) {
      for (int e : tri_edges[static_cast<std::size_t>(t)]) mark_edge(e);
    }
  }
  // Closure: any element with a split edge must also split its refinement edge.
  while (!queue.empty()) {
    const int t = queue.front();
    queue.pop_front();
    const auto& te = tri_edges[static_cast<std::size_t>(t)];
    mark_edge(te[static_cast<std::size_t>(ref_edge[static_cast<std::size_t>(t)])]);
  }

  std::vector<Point2> vertices = mesh.vertices();
  std::vector<int> edge_vertex(mesh.edges().size(), -1);
  for (std::size_t e = 0; e < mesh.edges().size(); ++e) {
    if (!split[e]) continue;
    edge_vertex[e] = static_cast<int>(vertices.size());
    const Edge& ed = mesh.edges()[e];
    vertices.push_back(midpoint(mesh.vertex(ed.a), mesh.vertex(ed.b)));
  }

  RefinementResult result;
  result.directly_refined.assign(marks.begin(), marks.end());
  result.child_count.assign(static_cast<std::size_t>(n), 0);
  std::vector<Triangle> triangles;
  triangles.reserve(static_cast<std::size_t>(n) * 2);
  auto emit = [&](int parent, Triangle t) {
    triangles.push_back(t);
    result.parent_of.push_back(parent);
    ++result.child_count[static_cast<std::size_t>(parent)];
  };

  for (int t = 0; t < n; ++t) {
    const auto& tri = mesh.triangle(t);
    const auto& te = tri_edges[static_cast<std::size_t>(t)];
    const int r = ref_edge[static_cast<std::size_t>(t)];
    if (!split[static_cast<std::size_t>(te[static_cast<std::size_t>(r)])]) {
      emit(t, tri);
      continue;
    }
    // Rotate so the refinement edge joins p2 and p0; orientation is preserved.
    const int s = (r + 1) % 3;
    const int p0 = tri[static_cast<std::size_t>(s)];
    const int p1 = tri[static_cast<std::size_t>((s + 1) % 3)];
    const int p2 = tri[static_cast<std::size_t>((s + 2) % 3)];
    const int e01 = te[static_cast<std::size_t>(s)];
    const int e12 = te[static_cast<std::size_t>((s + 1) % 3)];
    const int e20 = te[static_cast<std::size_t>((s + 2) % 3)];
    const int m01 = edge_vertex[static_cast<std::size_t>(e01)];
    const int m12 = edge_vertex[static_cast<std::size_t>(e12)];
    const int m20 = edge_vertex[static_cast<std::size_t>(e20)];
    if (m01 >= 0 && m12 >= 0) {  // red
      emit(t, {p0, m01, m20});
      emit(t, {m01, p1, m12});
      emit(t, {m20, m12, p2});
      emit(t, {m01, m12, m20});
    } else if (m01 >= 0) {  // blue
      emit(t, {p0, m01, m20});
      emit(t, {m01, p1, m20});
      emit(t, {p1, p2, m20});
    } else if (m12 >= 0) {  // blue
      emit(t, {p0, p1, m20});
      emit(t, {p1, m12, m20});
      emit(t, {m12, p2, m20});
    } else {  // green
      emit(t, {p0, p1, m20});
      emit(t, {p1, p2, m20});
    }
  }

  std::vector<BoundaryEdge> boundary;
  boundary.reserve(mesh.boundary_edges().size() * 2);
  for (const auto& be : mesh.boundary_edges()) {
    const int e = mesh.find_edge(be.a, be.b);
    const int m = e >= 0 ? edge_vertex[static_cast<std::size_t>(e)] : -1;
    if (m >= 0) {
      boundary.push_back({std::min(be.a, m), std::max(be.a, m), be.tag});
      boundary.push_back({std::min(m, be.b), std::max(m, be.b), be.tag});
    } else {
      boundary.push_back(be);
    }
  }

  result.child_mesh =
      std::make_shared<const TriMesh>(std::move(vertices), std::move(triangles), std::move(boundary));
  return result;
}

MeshPtr uniform_refine(const MeshPtr& mesh, int times) {
  if (times < 0) throw std::invalid_argument("uniform_refine: negative count");
  MeshPtr current = mesh;
  for (int i = 0; i < times; ++i) {
    const std::vector<bool> all(current->num_elements(), true);
    current = refine_rgb(current, all).child_mesh;
  }
  return current;
}

std::string to_string(MappingVariant v) {
  switch (v) {
    case MappingVariant::NormalizedSum: return "normalized_sum";
    case MappingVariant::UnnormalizedSum: return "unnormalized_sum";
    case MappingVariant::NormalizedMean: return "normalized_mean";
    case MappingVariant::UnnormalizedMean: return "unnormalized_mean";
  }
  return "unknown";
}

MappingVariant mapping_variant_from_string(const std::string& s) {
  if (s == "normalized_sum") return MappingVariant::NormalizedSum;
  if (s == "unnormalized_sum") return MappingVariant::UnnormalizedSum;
  if (s == "normalized_mean") return MappingVariant::NormalizedMean;
  if (s == "unnormalized_mean") return MappingVariant::UnnormalizedMean;
  throw std::invalid_argument("unknown mapping variant '" + s + "'");
}

AgentMapping build_agent_mapping(const RefinementResult& result, MappingVariant variant) {
  const int rows = static_cast<int>(result.child_count.size());
  const int cols = static_cast<int>(result.parent_of.size());
  const double ratio = static_cast<double>(rows) / static_cast<double>(cols);
  const bool normalized =
      variant == MappingVariant::NormalizedSum || variant == MappingVariant::NormalizedMean;
  const bool mean =
      variant == MappingVariant::NormalizedMean || variant == MappingVariant::UnnormalizedMean;

  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(static_cast<std::size_t>(cols));
  for (int j = 0; j < cols; ++j) {
    const int i = result.parent_of[static_cast<std::size_t>(j)];
    double w = normalized ? ratio : 1.0;
    if (mean) w /= static_cast<double>(result.child_count[static_cast<std::size_t>(i)]);
    entries.emplace_back(i, j, w);
  }
  AgentMapping m;
  m.matrix.resize(rows, cols);
  m.matrix.setFromTriplets(entries.begin(), entries.end());
  return m;
}

AgentMapping identity_mapping(int n) {
  AgentMapping m;
  m.matrix.resize(n, n);
  m.matrix.setIdentity();
  return m;
}

AgentMapping compose_mappings(std::span<const AgentMapping> maps) {
  if (maps.empty()) throw std::invalid_argument("compose_mappings: empty mapping list");
  AgentMapping out = maps.front();
  for (std::size_t k = 1; k < maps.size(); ++k) {
    if (out.cols() != maps[k].rows()) {
      throw std::invalid_argument("compose_mappings: mapping " + std::to_string(k) + " has " +
                                  std::to_string(maps[k].rows()) + " rows, expected " +
                                  std::to_string(out.cols()));
    }
    Eigen::SparseMatrix<double, Eigen::RowMajor> prod = out.matrix * maps[k].matrix;
    out.matrix = std::move(prod);
  }
  return out;
}

ConformityReport validate_conforming(const TriMesh& mesh) {
  auto fail = [](std::string msg) { return ConformityReport{false, std::move(msg)}; };
  if (mesh.empty()) return fail("empty mesh");
  const int nv = static_cast<int>(mesh.num_vertices());
  for (std::size_t t = 0; t < mesh.num_elements(); ++t) {
    for (int v : mesh.triangles()[t]) {
      if (v < 0 || v >= nv) return fail("triangle " + std::to_string(t) + " has invalid vertex index");
    }
    if (!(mesh.signed_area(static_cast<int>(t)) > 0.0)) {
      return fail("triangle " + std::to_string(t) + " has non-positive signed area");
    }
  }

  // Duplicate vertices within 1e-12.
  std::vector<int> order(static_cast<std::size_t>(nv));
  for (int i = 0; i < nv; ++i) order[static_cast<std::size_t>(i)] = i;
  const auto& pts = mesh.vertices();
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return pts[static_cast<std::size_t>(a)].x < pts[static_cast<std::size_t>(b)].x;
  });
  constexpr double kDup = 1e-12;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Point2 p = pts[static_cast<std::size_t>(order[i])];
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const Point2 q = pts[static_cast<std::size_t>(order[j])];
      if (q.x - p.x > kDup) break;
      if (std::abs(q.y - p.y) <= kDup) {
        return fail("duplicate vertices " + std::to_string(order[i]) + " and " +
                    std::to_string(order[j]));
      }
    }
  }

  const auto& edges = mesh.edges();
  const auto& counts = mesh.edge_use_count();
  const auto& tags = mesh.edge_tags();
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const std::string name = "(" + std::to_string(edges[e].a) + "," + std::to_string(edges[e].b) + ")";
    if (counts[e] > 2) return fail("edge " + name + " shared by >2 triangles");
    if (counts[e] == 1 && tags[e] == kNoTag) {
      // An unmatched edge that is not on the boundary: look for a hanging node on it.
      const Point2 a = mesh.vertex(edges[e].a);
      const Point2 b = mesh.vertex(edges[e].b);
      const double len = distance(a, b);
      for (int v = 0; v < nv; ++v) {
        if (v == edges[e].a || v == edges[e].b) continue;
        const Point2 p = mesh.vertex(v);
        const double s = dot(p - a, b - a) / (len * len);
        if (s > 0.0 && s < 1.0 && std::abs(orient(a, b, p)) <= 1e-12 * len * len) {
          return fail("edge shared by >2 or vertex-on-edge: vertex " + std::to_string(v) +
                      " hangs on edge " + name);
        }
      }
      return fail("edge shared by >2 or vertex-on-edge: interior edge " + name +
                  " has a single neighbour and no boundary tag");
    }
    if (counts[e] == 2 && tags[e] != kNoTag) {
      return fail("boundary-tagged edge " + name + " is shared by two triangles");
    }
  }
  for (const auto& be : mesh.boundary_edges()) {
    if (mesh.find_edge(be.a, be.b) < 0) {
      return fail("boundary edge (" + std::to_string(be.a) + "," + std::to_string(be.b) +
                  ") is not an edge of the mesh");
    }
  }
  return {true, "ok"};
}

void write_mesh(std::ostream& out, const TriMesh& mesh) {
  out << mesh.num_elements() << ' ' << mesh.num_vertices() << '\n';
  out << std::setprecision(17);
  for (const auto& p : mesh.vertices()) out << p.x << ' ' << p.y << '\n';
  for (const auto& t : mesh.triangles()) out << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
  for (const auto& be : mesh.boundary_edges()) out << be.a << ' ' << be.b << ' ' << be.tag << '\n';
}

TriMesh read_mesh(std::istream& in) {
  std::size_t nt = 0;
  std::size_t nv = 0;
  if (!(in >> nt >> nv)) throw std::runtime_error("read_mesh: missing header");
  std::vector<Point2> vertices(nv);
  for (auto& p : vertices) {
    if (!(in >> p.x >> p.y)) throw std::runtime_error("read_mesh: truncated vertex block");
  }
  std::vector<Triangle> triangles(nt);
  for (auto& t : triangles) {
    if (!(in >> t[0] >> t[1] >> t[2])) throw std::runtime_error("read_mesh: truncated triangle block");
  }
  std::vector<BoundaryEdge> boundary;
  std::string line;
  std::getline(in, line);
  while (in.peek() != EOF) {
    const auto pos = in.tellg();
    if (!std::getline(in, line)) break;
    if (line.empty()) continue;
    std::istringstream ls(line);
    BoundaryEdge be;
    if (!(ls >> be.a >> be.b >> be.tag)) {
      // Start of a trailing section (e.g. an appended solution); leave it unread.
      in.clear();
      in.seekg(pos);
      break;
    }
    boundary.push_back(be);
  }
  return TriMesh(std::move(vertices), std::move(triangles), std::move(boundary));
}

void save_mesh(const std::string& path, const TriMesh& mesh) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  write_mesh(f, mesh);
}

TriMesh load_mesh(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  return read_mesh(f);
}

TriMesh transformed(const TriMesh& mesh, double angle, Point2 shift) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  std::vector<Point2> v = mesh.vertices();
  for (auto& p : v) p = {c * p.x - s * p.y + shift.x, s * p.x + c * p.y + shift.y};
  return TriMesh(std::move(v), mesh.triangles(), mesh.boundary_edges());
}

}  // namespace asmr::mesh
