#include "asmr/policy.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include <Eigen/QR>

namespace asmr::policy {

using nlohmann::json;

void MpnConfig::validate() const {
  if (latent_dim <= 0 || message_passing_steps < 0 || mlp_hidden_layers < 0 || node_features <= 0 ||
      edge_features <= 0) {
    throw std::invalid_argument("MpnConfig: dimensions must be positive");
  }
  if (!(edge_dropout >= 0.0 && edge_dropout < 1.0)) throw std::invalid_argument("MpnConfig: dropout must be in [0, 1)");
}

void to_json(json& j, const MpnConfig& c) {
  j = json{{"latent_dim", c.latent_dim},       {"message_passing_steps", c.message_passing_steps},
           {"mlp_hidden_layers", c.mlp_hidden_layers}, {"edge_dropout", c.edge_dropout},
           {"leaky_slope", c.leaky_slope},     {"node_features", c.node_features},
           {"edge_features", c.edge_features}};
}

void from_json(const json& j, MpnConfig& c) {
  MpnConfig d;
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.message_passing_steps = j.value("message_passing_steps", d.message_passing_steps);
  c.mlp_hidden_layers = j.value("mlp_hidden_layers", d.mlp_hidden_layers);
  c.edge_dropout = j.value("edge_dropout", d.edge_dropout);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
  c.node_features = j.value("node_features", d.node_features);
  c.edge_features = j.value("edge_features", d.edge_features);
  c.validate();
}

// --- caches -----------------------------------------------------------------

namespace {

constexpr double kLayerNormEps = 1e-5;

enum class Act { Leaky, Tanh };

struct MlpCache {
  std::vector<RowMatrix> pre;   // hidden pre-activations
  std::vector<RowMatrix> post;  // hidden activations
};

struct LnCache {
  RowMatrix xhat;
  Eigen::VectorXd inv_std;
};

struct StepCache {
  RowMatrix h_in, e_in;
  MlpCache edge_mlp;
  LnCache edge_ln;
  RowMatrix agg;
  Eigen::VectorXd inv_deg;
  MlpCache node_mlp;
  LnCache node_ln;
};

}  // namespace

struct TowerCache {
  RowMatrix x_nodes, x_edges;
  std::vector<int> send, recv;
  std::vector<StepCache> steps;
  RowMatrix h_final;
  MlpCache head;
};

ForwardCache::ForwardCache() = default;
ForwardCache::~ForwardCache() = default;
ForwardCache::ForwardCache(ForwardCache&&) noexcept = default;
ForwardCache& ForwardCache::operator=(ForwardCache&&) noexcept = default;

// --- layout -----------------------------------------------------------------

std::size_t Mpn::add(const std::string& name, std::size_t size) {
  blocks_.push_back({name, cursor_, size});
  const std::size_t off = cursor_;
  cursor_ += size;
  return off;
}

Mpn::Linear Mpn::add_linear(const std::string& name, int in, int out) {
  Linear l;
  l.in = in;
  l.out = out;
  l.w = add(name + "/w", static_cast<std::size_t>(in) * static_cast<std::size_t>(out));
  l.b = add(name + "/b", static_cast<std::size_t>(out));
  return l;
}

Mpn::Mlp Mpn::add_mlp(const std::string& name, int parts, int out) {
  const int d = config_.latent_dim;
  Mlp m;
  for (int k = 0; k < parts; ++k) {
    m.first_w.push_back(add(name + "/0/w" + std::to_string(k), static_cast<std::size_t>(d) * static_cast<std::size_t>(d)));
  }
  m.first_b = add(name + "/0/b", static_cast<std::size_t>(d));
  for (int l = 0; l < config_.mlp_hidden_layers; ++l) {
    const bool last = l + 1 == config_.mlp_hidden_layers;
    m.rest.push_back(add_linear(name + "/" + std::to_string(l + 1), d, last ? out : d));
  }
  return m;
}

Mpn::Mpn(MpnConfig config) : config_(config) {
  config_.validate();
  const int d = config_.latent_dim;
  for (const char* tower : {"policy", "value"}) {
    const std::string p = tower;
    cursor_ = 0;
    const std::size_t block_start = blocks_.size();
    Tower t;
    t.node_enc = add_linear(p + "/node_enc", config_.node_features, d);
    t.edge_enc = add_linear(p + "/edge_enc", config_.edge_features, d);
    for (int s = 0; s < config_.message_passing_steps; ++s) {
      const std::string sp = p + "/step" + std::to_string(s);
      Step st;
      st.edge = add_mlp(sp + "/edge", 3, d);
      st.edge_ln_g = add(sp + "/edge_ln/g", static_cast<std::size_t>(d));
      st.edge_ln_b = add(sp + "/edge_ln/b", static_cast<std::size_t>(d));
      st.node = add_mlp(sp + "/node", 2, d);
      st.node_ln_g = add(sp + "/node_ln/g", static_cast<std::size_t>(d));
      st.node_ln_b = add(sp + "/node_ln/b", static_cast<std::size_t>(d));
      t.steps.push_back(st);
    }
    t.head = add_mlp(p + "/head", 1, 1);
    tower_size_ = cursor_;
    if (p == "policy") {
      tower_ = t;
    } else {
      for (std::size_t b = block_start; b < blocks_.size(); ++b) blocks_[b].offset += tower_size_;
    }
  }
}

// --- initialization ---------------------------------------------------------

namespace {

// Orthogonal (rows x cols) matrix scaled by gain.
Eigen::MatrixXd orthogonal(int rows, int cols, double gain, Rng& rng) {
  const int big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd a(big, small);
  for (int j = 0; j < small; ++j) {
    for (int i = 0; i < big; ++i) a(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (int j = 0; j < small; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  Eigen::MatrixXd w = rows >= cols ? q : Eigen::MatrixXd(q.transpose());
  return gain * w;
}

void write_matrix(std::vector<double>& p, std::size_t off, const Eigen::MatrixXd& w) {
  Eigen::Map<Eigen::MatrixXd>(p.data() + off, w.rows(), w.cols()) = w;
}

}  // namespace

std::vector<double> Mpn::init_params(Rng& rng) const {
  std::vector<double> p(num_params(), 0.0);
  const int d = config_.latent_dim;
  const double core = std::sqrt(2.0);
  for (int tower = 0; tower < 2; ++tower) {
    const std::size_t base = static_cast<std::size_t>(tower) * tower_size_;
    auto linear = [&](const Linear& l, double gain) { write_matrix(p, base + l.w, orthogonal(l.in, l.out, gain, rng)); };
    auto mlp = [&](const Mlp& m, double last_gain) {
      const int parts = static_cast<int>(m.first_w.size());
      const Eigen::MatrixXd first = orthogonal(parts * d, d, core, rng);
      for (int k = 0; k < parts; ++k) write_matrix(p, base + m.first_w[static_cast<std::size_t>(k)], first.middleRows(k * d, d));
      for (std::size_t l = 0; l < m.rest.size(); ++l) linear(m.rest[l], l + 1 == m.rest.size() ? last_gain : core);
    };
    auto ones = [&](std::size_t off) { std::fill_n(p.begin() + static_cast<long>(base + off), d, 1.0); };
    linear(tower_.node_enc, core);
    linear(tower_.edge_enc, core);
    for (const auto& st : tower_.steps) {
      mlp(st.edge, core);
      ones(st.edge_ln_g);
      mlp(st.node, core);
      ones(st.node_ln_g);
    }
    mlp(tower_.head, tower == 0 ? 0.01 : 1.0);
  }
  return p;
}

// --- forward / backward -----------------------------------------------------

namespace {

using ConstW = Eigen::Map<const Eigen::MatrixXd>;
using MutW = Eigen::Map<Eigen::MatrixXd>;
using ConstB = Eigen::Map<const Eigen::RowVectorXd>;
using MutB = Eigen::Map<Eigen::RowVectorXd>;

RowMatrix activate(const RowMatrix& z, Act act, double slope) {
  if (act == Act::Tanh) return z.array().tanh().matrix();
  return z.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
}

RowMatrix layer_norm(const RowMatrix& x, const double* g, const double* b, LnCache& c) {
  const Eigen::Index n = x.rows(), d = x.cols();
  c.xhat.resize(n, d);
  c.inv_std.resize(n);
  RowMatrix y(n, d);
  const ConstB gain(g, d), bias(b, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    c.inv_std(i) = inv;
    c.xhat.row(i) = (x.row(i).array() - mu) * inv;
    y.row(i) = c.xhat.row(i).cwiseProduct(gain) + bias;
  }
  return y;
}

RowMatrix layer_norm_backward(const RowMatrix& dy, const LnCache& c, const double* g, double* dg, double* db) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  const ConstB gain(g, d);
  MutB(dg, d) += (dy.cwiseProduct(c.xhat)).colwise().sum();
  MutB(db, d) += dy.colwise().sum();
  RowMatrix dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(gain);
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(c.xhat.row(i)).mean();
    dx.row(i) = c.inv_std(i) * (dxhat.array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

}  // namespace

namespace {

struct Params {
  const double* p;
  int d;
  ConstW w(std::size_t off, int in, int out) const { return ConstW(p + off, in, out); }
  ConstB b(std::size_t off, int n) const { return ConstB(p + off, n); }
};

struct Grads {
  double* g;
  MutW w(std::size_t off, int in, int out) const { return MutW(g + off, in, out); }
  MutB b(std::size_t off, int n) const { return MutB(g + off, n); }
};

}  // namespace

void Mpn::tower_forward(const double* p, const env::ObservationGraph& g, const std::vector<int>& kept,
                        TowerCache& c, Eigen::VectorXd& out) const {
  const int d = config_.latent_dim;
  const double slope = config_.leaky_slope;
  const Params P{p, d};
  const Eigen::Index n = g.num_nodes();
  const auto m = static_cast<Eigen::Index>(kept.size());

  auto mlp_rest = [&](const Mlp& mlp, RowMatrix z, Act act, MlpCache& mc) {
    mc.pre.clear();
    mc.post.clear();
    for (const auto& l : mlp.rest) {
      RowMatrix a = activate(z, act, slope);
      RowMatrix next = a * P.w(l.w, l.in, l.out);
      next.rowwise() += P.b(l.b, l.out);
      mc.pre.push_back(std::move(z));
      mc.post.push_back(std::move(a));
      z = std::move(next);
    }
    return z;
  };

  c.x_nodes = g.node_features;
  c.x_edges.resize(m, config_.edge_features);
  c.send.resize(static_cast<std::size_t>(m));
  c.recv.resize(static_cast<std::size_t>(m));
  for (Eigen::Index k = 0; k < m; ++k) {
    const int e = kept[static_cast<std::size_t>(k)];
    c.x_edges.row(k) = g.edge_features.row(e);
    c.send[static_cast<std::size_t>(k)] = g.edges[static_cast<std::size_t>(e)][0];
    c.recv[static_cast<std::size_t>(k)] = g.edges[static_cast<std::size_t>(e)][1];
  }

  RowMatrix h = c.x_nodes * P.w(tower_.node_enc.w, tower_.node_enc.in, d);
  h.rowwise() += P.b(tower_.node_enc.b, d);
  RowMatrix e = c.x_edges * P.w(tower_.edge_enc.w, tower_.edge_enc.in, d);
  e.rowwise() += P.b(tower_.edge_enc.b, d);

  c.steps.resize(tower_.steps.size());
  for (std::size_t s = 0; s < tower_.steps.size(); ++s) {
    const Step& st = tower_.steps[s];
    StepCache& sc = c.steps[s];
    sc.h_in = h;
    sc.e_in = e;

    // Edge update from (receiver, sender, edge).
    const RowMatrix pr = h * P.w(st.edge.first_w[0], d, d);
    const RowMatrix ps = h * P.w(st.edge.first_w[1], d, d);
    RowMatrix z = e * P.w(st.edge.first_w[2], d, d);
    z.rowwise() += P.b(st.edge.first_b, d);
    for (Eigen::Index k = 0; k < m; ++k) {
      z.row(k) += pr.row(c.recv[static_cast<std::size_t>(k)]) + ps.row(c.send[static_cast<std::size_t>(k)]);
    }
    RowMatrix upd = mlp_rest(st.edge, std::move(z), Act::Leaky, sc.edge_mlp);
    e = layer_norm(e + upd, p + st.edge_ln_g, p + st.edge_ln_b, sc.edge_ln);

    // Mean of incoming edges; zero for isolated nodes.
    sc.agg = RowMatrix::Zero(n, d);
    sc.inv_deg = Eigen::VectorXd::Zero(n);
    for (Eigen::Index k = 0; k < m; ++k) {
      const int r = c.recv[static_cast<std::size_t>(k)];
      sc.agg.row(r) += e.row(k);
      sc.inv_deg(r) += 1.0;
    }
    for (Eigen::Index v = 0; v < n; ++v) {
      if (sc.inv_deg(v) > 0.0) {
        sc.inv_deg(v) = 1.0 / sc.inv_deg(v);
        sc.agg.row(v) *= sc.inv_deg(v);
      }
    }

    RowMatrix q = h * P.w(st.node.first_w[0], d, d) + sc.agg * P.w(st.node.first_w[1], d, d);
    q.rowwise() += P.b(st.node.first_b, d);
    RowMatrix nupd = mlp_rest(st.node, std::move(q), Act::Leaky, sc.node_mlp);
    h = layer_norm(h + nupd, p + st.node_ln_g, p + st.node_ln_b, sc.node_ln);
  }
  c.h_final = h;
  RowMatrix z = h * P.w(tower_.head.first_w[0], d, d);
  z.rowwise() += P.b(tower_.head.first_b, d);
  const RowMatrix y = mlp_rest(tower_.head, std::move(z), Act::Tanh, c.head);
  out = y.col(0);
}

void Mpn::tower_backward(const double* p, const TowerCache& c, const Eigen::VectorXd& dout, double* grad) const {
  const int d = config_.latent_dim;
  const double slope = config_.leaky_slope;
  const Params P{p, d};
  const Grads G{grad};
  const Eigen::Index n = c.x_nodes.rows();
  const auto m = static_cast<Eigen::Index>(c.send.size());

  auto mlp_rest_back = [&](const Mlp& mlp, const MlpCache& mc, RowMatrix dz, Act act) {
    for (std::size_t i = mlp.rest.size(); i-- > 0;) {
      const Linear& l = mlp.rest[i];
      G.w(l.w, l.in, l.out).noalias() += mc.post[i].transpose() * dz;
      G.b(l.b, l.out) += dz.colwise().sum();
      RowMatrix da = dz * P.w(l.w, l.in, l.out).transpose();
      if (act == Act::Tanh) {
        dz = da.array() * (1.0 - mc.post[i].array().square());
      } else {
        dz = da.array() * mc.pre[i].unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; }).array();
      }
    }
    return dz;
  };

  RowMatrix dz = dout;
  dz = mlp_rest_back(tower_.head, c.head, std::move(dz), Act::Tanh);
  G.w(tower_.head.first_w[0], d, d).noalias() += c.h_final.transpose() * dz;
  G.b(tower_.head.first_b, d) += dz.colwise().sum();
  RowMatrix dh = dz * P.w(tower_.head.first_w[0], d, d).transpose();
  RowMatrix de = RowMatrix::Zero(m, d);

  for (std::size_t s = tower_.steps.size(); s-- > 0;) {
    const Step& st = tower_.steps[s];
    const StepCache& sc = c.steps[s];

    // Node update.
    const RowMatrix dhpre = layer_norm_backward(dh, sc.node_ln, p + st.node_ln_g, grad + st.node_ln_g, grad + st.node_ln_b);
    RowMatrix dh_in = dhpre;
    const RowMatrix dq = mlp_rest_back(st.node, sc.node_mlp, dhpre, Act::Leaky);
    G.w(st.node.first_w[0], d, d).noalias() += sc.h_in.transpose() * dq;
    G.w(st.node.first_w[1], d, d).noalias() += sc.agg.transpose() * dq;
    G.b(st.node.first_b, d) += dq.colwise().sum();
    dh_in.noalias() += dq * P.w(st.node.first_w[0], d, d).transpose();
    const RowMatrix dagg = dq * P.w(st.node.first_w[1], d, d).transpose();

    // Aggregation.
    for (Eigen::Index k = 0; k < m; ++k) {
      const int r = c.recv[static_cast<std::size_t>(k)];
      de.row(k) += sc.inv_deg(r) * dagg.row(r);
    }

    // Edge update.
    const RowMatrix depre = layer_norm_backward(de, sc.edge_ln, p + st.edge_ln_g, grad + st.edge_ln_g, grad + st.edge_ln_b);
    RowMatrix de_in = depre;
    const RowMatrix dz1 = mlp_rest_back(st.edge, sc.edge_mlp, depre, Act::Leaky);
    G.w(st.edge.first_w[2], d, d).noalias() += sc.e_in.transpose() * dz1;
    G.b(st.edge.first_b, d) += dz1.colwise().sum();
    de_in.noalias() += dz1 * P.w(st.edge.first_w[2], d, d).transpose();
    RowMatrix dpr = RowMatrix::Zero(n, d), dps = RowMatrix::Zero(n, d);
    for (Eigen::Index k = 0; k < m; ++k) {
      dpr.row(c.recv[static_cast<std::size_t>(k)]) += dz1.row(k);
      dps.row(c.send[static_cast<std::size_t>(k)]) += dz1.row(k);
    }
    G.w(st.edge.first_w[0], d, d).noalias() += sc.h_in.transpose() * dpr;
    G.w(st.edge.first_w[1], d, d).noalias() += sc.h_in.transpose() * dps;
    dh_in.noalias() += dpr * P.w(st.edge.first_w[0], d, d).transpose();
    dh_in.noalias() += dps * P.w(st.edge.first_w[1], d, d).transpose();

    dh = std::move(dh_in);
    de = std::move(de_in);
  }
  G.w(tower_.node_enc.w, tower_.node_enc.in, d).noalias() += c.x_nodes.transpose() * dh;
  G.b(tower_.node_enc.b, d) += dh.colwise().sum();
  G.w(tower_.edge_enc.w, tower_.edge_enc.in, d).noalias() += c.x_edges.transpose() * de;
  G.b(tower_.edge_enc.b, d) += de.colwise().sum();
}

namespace {

// Vectorized reductions peel by address, so summation order depends on the
// alignment of the parameter buffer. Working on a copy with fixed alignment
// keeps results independent of where the caller's vector was allocated.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

bool aligned(const double* p) { return reinterpret_cast<std::uintptr_t>(p) % EIGEN_MAX_ALIGN_BYTES == 0; }

const double* aligned_view(std::span<const double> v, AlignedBuffer& storage) {
  if (aligned(v.data())) return v.data();
  storage.assign(v.begin(), v.end());
  return storage.data();
}

}  // namespace

Output Mpn::forward(std::span<const double> params, const env::ObservationGraph& g, Mode mode, Rng* rng,
                    ForwardCache* cache) const {
  if (params.size() != num_params()) throw std::invalid_argument("Mpn::forward: parameter count mismatch");
  if (g.node_features.cols() != config_.node_features ||
      (g.num_edges() > 0 && g.edge_features.cols() != config_.edge_features) ||
      g.edge_features.rows() != g.num_edges()) {
    throw std::invalid_argument("Mpn::forward: feature dimensions do not match the config");
  }
  const bool drop = mode == Mode::Train && config_.edge_dropout > 0.0;
  if (drop && rng == nullptr) throw std::invalid_argument("Mpn::forward: train mode needs a dropout rng");
  AlignedBuffer storage;
  const double* p = aligned_view(params, storage);
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.towers.resize(2);
  Output out;
  for (int t = 0; t < 2; ++t) {
    std::vector<int> kept;
    kept.reserve(static_cast<std::size_t>(g.num_edges()));
    for (int k = 0; k < g.num_edges(); ++k) {
      if (!drop || !rng->bernoulli(config_.edge_dropout)) kept.push_back(k);
    }
    tower_forward(p + static_cast<std::size_t>(t) * tower_size_, g, kept, c.towers[static_cast<std::size_t>(t)],
                  t == 0 ? out.logits : out.values);
  }
  return out;
}

void Mpn::backward(std::span<const double> params, const ForwardCache& cache, const Eigen::VectorXd& dlogits,
                   const Eigen::VectorXd& dvalues, std::span<double> grad) const {
  if (grad.size() != num_params() || params.size() != num_params()) {
    throw std::invalid_argument("Mpn::backward: parameter count mismatch");
  }
  AlignedBuffer storage;
  const double* p = aligned_view(params, storage);
  AlignedBuffer g(grad.size(), 0.0);
  tower_backward(p, cache.towers[0], dlogits, g.data());
  tower_backward(p + tower_size_, cache.towers[1], dvalues, g.data() + tower_size_);
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

env::ObservationGraph batch_graphs(std::span<const env::ObservationGraph* const> graphs, std::vector<int>& offsets) {
  offsets.assign(1, 0);
  Eigen::Index nodes = 0, edges = 0, nf = 0, ef = 0;
  for (const auto* g : graphs) {
    nodes += g->num_nodes();
    edges += g->num_edges();
    nf = g->node_features.cols();
    ef = std::max<Eigen::Index>(ef, g->edge_features.cols());
  }
  env::ObservationGraph b;
  b.node_features.resize(nodes, nf);
  b.edge_features.resize(edges, ef);
  b.edges.reserve(static_cast<std::size_t>(edges));
  Eigen::Index nr = 0, er = 0;
  for (const auto* g : graphs) {
    const int base = static_cast<int>(nr);
    b.node_features.middleRows(nr, g->num_nodes()) = g->node_features;
    if (g->num_edges() > 0) b.edge_features.middleRows(er, g->num_edges()) = g->edge_features;
    for (const auto& [s, r] : g->edges) b.edges.push_back({s + base, r + base});
    nr += g->num_nodes();
    er += g->num_edges();
    offsets.push_back(static_cast<int>(nr));
  }
  return b;
}

// --- observation normalization ----------------------------------------------

RunningNormalizer::RunningNormalizer(int dim, double clip)
    : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)), clip_(clip) {}

void RunningNormalizer::update(const Eigen::MatrixXd& rows) {
  if (rows.rows() == 0) return;
  if (rows.cols() != dim()) throw std::invalid_argument("RunningNormalizer: dimension mismatch");
  const double nb = static_cast<double>(rows.rows());
  const Eigen::VectorXd mb = rows.colwise().mean().transpose();
  const Eigen::VectorXd m2b = (rows.rowwise() - mb.transpose()).colwise().squaredNorm().transpose();
  const double total = count_ + nb;
  const Eigen::VectorXd delta = mb - mean_;
  mean_ += delta * (nb / total);
  m2_ += m2b + delta.cwiseProduct(delta) * (count_ * nb / total);
  count_ = total;
}

Eigen::VectorXd RunningNormalizer::variance() const {
  if (count_ <= 0.0) return Eigen::VectorXd::Ones(dim());
  return m2_ / count_;
}

Eigen::MatrixXd RunningNormalizer::apply(const Eigen::MatrixXd& rows) const {
  if (rows.rows() == 0) return rows;
  if (rows.cols() != dim()) throw std::invalid_argument("RunningNormalizer: dimension mismatch");
  const Eigen::RowVectorXd inv = (variance().array() + 1e-8).rsqrt().matrix().transpose();
  Eigen::MatrixXd out = (rows.rowwise() - mean_.transpose()).array().rowwise() * inv.array();
  return out.cwiseMax(-clip_).cwiseMin(clip_);
}

json RunningNormalizer::to_json() const {
  return json{{"count", count_},
              {"mean", std::vector<double>(mean_.data(), mean_.data() + mean_.size())},
              {"m2", std::vector<double>(m2_.data(), m2_.data() + m2_.size())},
              {"clip", clip_}};
}

RunningNormalizer RunningNormalizer::from_json(const json& j) {
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto m2 = j.at("m2").get<std::vector<double>>();
  RunningNormalizer r(static_cast<int>(mean.size()), j.value("clip", 10.0));
  r.count_ = j.at("count").get<double>();
  r.mean_ = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  r.m2_ = Eigen::Map<const Eigen::VectorXd>(m2.data(), static_cast<Eigen::Index>(m2.size()));
  return r;
}

void ObservationNormalizer::update(const env::ObservationGraph& g) {
  nodes.update(g.node_features);
  edges.update(g.edge_features);
}

env::ObservationGraph ObservationNormalizer::apply(const env::ObservationGraph& g) const {
  env::ObservationGraph out;
  out.node_features = nodes.apply(g.node_features);
  out.edges = g.edges;
  out.edge_features = g.num_edges() > 0 ? edges.apply(g.edge_features) : g.edge_features;
  return out;
}

// --- actions ----------------------------------------------------------------

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

double log_prob(double logit, bool action) { return action ? -softplus(-logit) : -softplus(logit); }

ActionSample sample_actions(const Eigen::VectorXd& logits, Rng& rng, bool deterministic) {
  ActionSample s;
  s.actions.resize(static_cast<std::size_t>(logits.size()));
  s.log_probs.resize(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double x = logits(i);
    bool a;
    if (deterministic) {
      a = x > 0.0;
    } else {
      a = rng.uniform() < 1.0 / (1.0 + std::exp(-x));
    }
    s.actions[static_cast<std::size_t>(i)] = a;
    s.log_probs(i) = log_prob(x, a);
  }
  return s;
}

// --- gradient check ---------------------------------------------------------

namespace {

bool same_signs(const std::vector<RowMatrix>& a, const std::vector<RowMatrix>& b) {
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (((a[k].array() > 0.0) != (b[k].array() > 0.0)).any()) return false;
  }
  return true;
}

// True when every LeakyReLU pre-activation has the same sign in both passes.
bool same_activation_pattern(const ForwardCache& a, const ForwardCache& b) {
  for (std::size_t t = 0; t < a.towers.size(); ++t) {
    const auto& ta = a.towers[t];
    const auto& tb = b.towers[t];
    if (!same_signs(ta.head.pre, tb.head.pre)) return false;
    for (std::size_t s = 0; s < ta.steps.size(); ++s) {
      if (!same_signs(ta.steps[s].edge_mlp.pre, tb.steps[s].edge_mlp.pre)) return false;
      if (!same_signs(ta.steps[s].node_mlp.pre, tb.steps[s].node_mlp.pre)) return false;
    }
  }
  return true;
}

}  // namespace

double gradient_check(const Mpn& net, std::span<const double> params, const env::ObservationGraph& graph, Rng& rng,
                      int samples_per_block) {
  std::vector<double> p(params.begin(), params.end());
  ForwardCache cache;
  const Output out = net.forward(p, graph, Mode::Eval, nullptr, &cache);
  std::vector<double> grad(p.size(), 0.0);
  net.backward(p, cache, Eigen::VectorXd::Ones(out.logits.size()), Eigen::VectorXd::Ones(out.values.size()), grad);

  ForwardCache probe;
  auto loss = [&](bool& smooth) {
    const Output o = net.forward(p, graph, Mode::Eval, nullptr, &probe);
    smooth = smooth && same_activation_pattern(cache, probe);
    return o.logits.sum() + o.values.sum();
  };
  constexpr double h = 1e-5;
  double worst = 0.0;
  for (const auto& block : net.blocks()) {
    std::set<std::size_t> tried;
    std::size_t used = 0;
    const std::size_t want = std::min<std::size_t>(block.size, static_cast<std::size_t>(samples_per_block));
    while (used < want && tried.size() < block.size) {
      const std::size_t i = block.offset + rng.below(block.size);
      if (!tried.insert(i).second) continue;
      const double saved = p[i];
      bool smooth = true;
      p[i] = saved + h;
      const double up = loss(smooth);
      p[i] = saved - h;
      const double down = loss(smooth);
      p[i] = saved;
      if (!smooth) continue;
      const double numeric = (up - down) / (2 * h);
      const double dev = std::abs(grad[i] - numeric) / std::max({std::abs(grad[i]), std::abs(numeric), 1e-3});
      worst = std::max(worst, dev);
      ++used;
    }
  }
  return worst;
}

// --- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const json j{{"format", "asmr-checkpoint"},
               {"version", 1},
               {"config", ck.config},
               {"iteration", ck.iteration},
               {"params", ck.params},
               {"normalizer", {{"nodes", ck.normalizer.nodes.to_json()}, {"edges", ck.normalizer.edges.to_json()}}},
               {"optimizer", ck.optimizer},
               {"training", ck.training}};
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << j.dump() << '\n';
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  const json j = json::parse(in);
  if (j.value("format", std::string{}) != "asmr-checkpoint") throw std::runtime_error(path + " is not a checkpoint");
  Checkpoint ck;
  ck.config = j.at("config").get<MpnConfig>();
  ck.iteration = j.at("iteration").get<std::int64_t>();
  ck.params = j.at("params").get<std::vector<double>>();
  ck.normalizer.nodes = RunningNormalizer::from_json(j.at("normalizer").at("nodes"));
  ck.normalizer.edges = RunningNormalizer::from_json(j.at("normalizer").at("edges"));
  ck.optimizer = j.value("optimizer", json{});
  ck.training = j.value("training", json{});
  if (ck.params.size() != Mpn(ck.config).num_params()) throw std::runtime_error(path + ": parameter count mismatch");
  return ck;
}

}  // namespace asmr::policy
