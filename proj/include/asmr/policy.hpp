#pragma once

// Message passing network with separate policy and value towers. Parameters
// live in one flat vector; gradients are computed by a hand-written reverse
// pass over cached activations.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "asmr/env.hpp"
#include "asmr/rng.hpp"

namespace asmr::policy {

struct MpnConfig {
  int latent_dim = 64;
  int message_passing_steps = 2;
  int mlp_hidden_layers = 2;
  double edge_dropout = 0.1;
  double leaky_slope = 0.01;
  int node_features = env::kNodeFeatures;
  int edge_features = env::kEdgeFeatures;

  void validate() const;
  friend bool operator==(const MpnConfig&, const MpnConfig&) = default;
};

void to_json(nlohmann::json& j, const MpnConfig& c);
void from_json(const nlohmann::json& j, MpnConfig& c);

enum class Mode { Train, Eval };

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ForwardCache;
struct TowerCache;

struct Output {
  Eigen::VectorXd logits;
  Eigen::VectorXd values;
};

class Mpn {
 public:
  explicit Mpn(MpnConfig config = {});

  const MpnConfig& config() const { return config_; }
  std::size_t num_params() const { return 2 * tower_size_; }

  /// Orthogonal weights (gain sqrt(2)), zero biases, unit layer-norm gains;
  /// the last policy layer is scaled by 0.01.
  std::vector<double> init_params(Rng& rng) const;

  /// In train mode each directed edge is dropped independently per tower,
  /// using draws from `dropout_rng`. `cache` may be null when no backward
  /// pass follows.
  Output forward(std::span<const double> params, const env::ObservationGraph& graph, Mode mode,
                 Rng* dropout_rng = nullptr, ForwardCache* cache = nullptr) const;

  /// Accumulates d(loss)/d(params) into grad given d(loss)/d(logits) and
  /// d(loss)/d(values).
  void backward(std::span<const double> params, const ForwardCache& cache, const Eigen::VectorXd& dlogits,
                const Eigen::VectorXd& dvalues, std::span<double> grad) const;

  /// Named parameter blocks (offset, size), e.g. for gradient checks.
  struct Block {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
  };
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  struct Linear {
    std::size_t w = 0;  // in x out, column-major
    std::size_t b = 0;
    int in = 0;
    int out = 0;
  };
  struct Mlp {
    // First layer takes the concatenation of `parts` inputs, one weight each.
    std::vector<std::size_t> first_w;
    std::size_t first_b = 0;
    std::vector<Linear> rest;
  };
  struct Step {
    Mlp edge;
    std::size_t edge_ln_g = 0, edge_ln_b = 0;
    Mlp node;
    std::size_t node_ln_g = 0, node_ln_b = 0;
  };
  struct Tower {
    Linear node_enc, edge_enc;
    std::vector<Step> steps;
    Mlp head;
  };

  std::size_t add(const std::string& name, std::size_t size);
  Linear add_linear(const std::string& name, int in, int out);
  Mlp add_mlp(const std::string& name, int parts, int out);

  void tower_forward(const double* p, const env::ObservationGraph& g, const std::vector<int>& kept_edges,
                     TowerCache& c, Eigen::VectorXd& out) const;
  void tower_backward(const double* p, const TowerCache& c, const Eigen::VectorXd& dout, double* grad) const;

  MpnConfig config_;
  std::vector<Block> blocks_;
  std::size_t cursor_ = 0;
  std::size_t tower_size_ = 0;
  Tower tower_;  // offsets relative to the tower start
};

struct ForwardCache {
  ForwardCache();
  ~ForwardCache();
  ForwardCache(ForwardCache&&) noexcept;
  ForwardCache& operator=(ForwardCache&&) noexcept;

  std::vector<TowerCache> towers;  // policy, value
};

/// Concatenates graphs into one disjoint union; offsets[i] is the first node
/// of graph i, offsets.back() the total node count.
env::ObservationGraph batch_graphs(std::span<const env::ObservationGraph* const> graphs, std::vector<int>& offsets);

// ---------------------------------------------------------------------------

/// Per-feature running mean and variance (parallel Welford merge).
class RunningNormalizer {
 public:
  RunningNormalizer() = default;
  explicit RunningNormalizer(int dim, double clip = 10.0);

  void update(const Eigen::MatrixXd& rows);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& rows) const;

  int dim() const { return static_cast<int>(mean_.size()); }
  double count() const { return count_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  Eigen::VectorXd variance() const;

  nlohmann::json to_json() const;
  static RunningNormalizer from_json(const nlohmann::json& j);

 private:
  double count_ = 0.0;
  Eigen::VectorXd mean_;
  Eigen::VectorXd m2_;
  double clip_ = 10.0;
};

struct ObservationNormalizer {
  RunningNormalizer nodes{env::kNodeFeatures};
  RunningNormalizer edges{env::kEdgeFeatures};

  void update(const env::ObservationGraph& g);
  env::ObservationGraph apply(const env::ObservationGraph& g) const;
};

// ---------------------------------------------------------------------------

struct ActionSample {
  std::vector<bool> actions;
  Eigen::VectorXd log_probs;
};

/// Independent Bernoulli(sigmoid(logit)) per element. Deterministic mode
/// refines only where logit > 0 (ties do not refine).
ActionSample sample_actions(const Eigen::VectorXd& logits, Rng& rng, bool deterministic);

/// log pi(a | logit) computed without overflow.
double log_prob(double logit, bool action);

/// Central differences (step 1e-5) on up to `samples_per_block` entries of
/// every parameter block, for the loss sum(logits) + sum(values) in eval
/// mode. Returns the max of |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
/// Entries whose +-step evaluations flip the sign of any LeakyReLU
/// pre-activation are skipped and replaced by other entries of the block, since
/// a central difference across a kink does not estimate the derivative.
double gradient_check(const Mpn& net, std::span<const double> params, const env::ObservationGraph& graph,
                      Rng& rng, int samples_per_block = 8);

// ---------------------------------------------------------------------------

struct Checkpoint {
  MpnConfig config;
  std::vector<double> params;
  std::int64_t iteration = 0;
  ObservationNormalizer normalizer;
  nlohmann::json optimizer;  // opaque optimizer state
  nlohmann::json training;   // opaque training configuration
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace asmr::policy
