#pragma once

// PPO over the element swarm: rollouts, mapped per-agent returns, advantage
// estimation, clipped updates and the outer training loop.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "asmr/env.hpp"
#include "asmr/policy.hpp"
#include "asmr/tasks.hpp"

namespace asmr::train {

enum class ReturnMix { HalfHalf, LocalOnly, GlobalOnly };
std::string to_string(ReturnMix m);
ReturnMix return_mix_from_string(const std::string& s);

enum class AdvantageMode { ReturnMinusValue, Gae };
std::string to_string(AdvantageMode m);
AdvantageMode advantage_mode_from_string(const std::string& s);

struct PpoConfig {
  int iterations = 400;
  int transitions_per_iteration = 256;
  int epochs = 5;
  int minibatch_size = 32;  // graphs per minibatch
  double learning_rate = 3e-4;
  double clip_range = 0.2;
  double value_clip_range = 0.2;
  double value_loss_coeff = 0.5;
  double grad_norm_clip = 0.5;
  double gae_lambda = 0.95;
  double gamma = 1.0;
  ReturnMix return_mix = ReturnMix::HalfHalf;
  AdvantageMode advantage = AdvantageMode::ReturnMinusValue;
  double adam_eps = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const PpoConfig& c);
void from_json(const nlohmann::json& j, PpoConfig& c);

struct TrainConfig {
  PpoConfig ppo;
  env::EnvConfig env;
  policy::MpnConfig mpn;
  std::uint64_t seed = 0;
  int workers = 1;
  int checkpoint_every = 10;

  void validate() const;
};

nlohmann::json to_json(const env::EnvConfig& c);
env::EnvConfig env_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------

/// One environment step as seen by the learner.
struct Transition {
  env::ObservationGraph raw;       // un-normalized observation
  env::ObservationGraph graph;     // observation fed to the network
  std::vector<bool> actions;
  Eigen::VectorXd log_probs;
  Eigen::VectorXd values;
  Eigen::VectorXd rewards;
  mesh::AgentMapping mapping;     // old agents x new agents
  bool done = false;
  env::StepInfo info;
};

struct Episode {
  std::vector<Transition> steps;
  int task_index = 0;
  double alpha = 0.0;
  double total_reward = 0.0;  // sum over steps and agents
  int initial_elements = 0;
  int final_elements = 0;
  double final_error = 0.0;   // sum of normalized element errors at the end
  env::Termination termination = env::Termination::None;
};

/// Frozen view of the learner used for rollouts.
struct PolicyView {
  const policy::Mpn* net = nullptr;
  std::span<const double> params;
  const policy::ObservationNormalizer* normalizer = nullptr;  // null: raw features
};

struct EpisodeOptions {
  std::optional<double> alpha;  // fixed alpha instead of sampling
  bool deterministic = false;
};

/// Plays one episode. The policy runs in eval mode (no edge dropout). The
/// final environment state is returned through `final_state` when given.
Episode collect_episode(const PolicyView& policy, const tasks::TaskPtr& task, int task_index,
                        const env::EnvConfig& config, Rng& rng, const EpisodeOptions& options = {},
                        env::EpisodeState* final_state = nullptr);

// ---------------------------------------------------------------------------

/// Per-step local returns J^t = r^t + gamma phi^t J^{t+1}.
std::vector<Eigen::VectorXd> local_returns(std::span<const Transition> steps, double gamma);
/// Per-step global returns sum_k gamma^(k-t) mean(r^k).
std::vector<double> global_returns(std::span<const Transition> steps, double gamma);
/// Mixed per-agent return targets.
std::vector<Eigen::VectorXd> mapped_returns(std::span<const Transition> steps, double gamma, ReturnMix mix);

/// Advantages before normalization. ReturnMinusValue uses the mixed return
/// minus the recorded values; Gae runs the mapped GAE recursion on the local
/// and global streams and mixes the results.
std::vector<Eigen::VectorXd> advantages(std::span<const Transition> steps, const std::vector<Eigen::VectorXd>& returns,
                                        const PpoConfig& config);

/// Per-step TD errors r^t + gamma phi^t V^{t+1} - V^t (no bootstrap after the last step).
std::vector<Eigen::VectorXd> td_errors(std::span<const Transition> steps, double gamma);

/// Zero mean, unit (population) std over all entries; leaves a constant batch centered.
void normalize_advantages(std::vector<Eigen::VectorXd>& adv);

// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  std::int64_t step = 0;

  nlohmann::json to_json() const;
  static AdamState from_json(const nlohmann::json& j);
};

/// Learning sample: a transition with its targets.
struct Sample {
  const env::ObservationGraph* graph = nullptr;
  const std::vector<bool>* actions = nullptr;
  Eigen::VectorXd old_log_probs;
  Eigen::VectorXd old_values;
  Eigen::VectorXd advantages;
  Eigen::VectorXd returns;
};

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;  // before clipping, averaged over minibatches
  int minibatches = 0;
  bool aborted = false;
  std::string message;
};

/// Clipped surrogate for one agent; returns the loss and writes d(loss)/d(log pi).
double clipped_surrogate(double ratio, double advantage, double clip, double* dloss_dlogp = nullptr);
/// Clipped squared value error for one agent; returns the loss and writes d(loss)/d(value).
double clipped_value_loss(double value, double old_value, double target, double clip, double* dloss_dv = nullptr);

/// Epochs of shuffled minibatch updates. On a non-finite loss the parameters
/// and optimizer state are restored and `aborted` is set.
UpdateStats ppo_update(const policy::Mpn& net, std::vector<double>& params, AdamState& adam,
                       std::span<const Sample> samples, const PpoConfig& config, Rng& rng);

// ---------------------------------------------------------------------------

struct IterationMetrics {
  int iteration = 0;
  int episodes = 0;
  int transitions = 0;
  double mean_return = 0.0;
  double mean_elements = 0.0;
  double mean_error = 0.0;
  UpdateStats update;
  double rollout_seconds = 0.0;
  double seconds = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const IterationMetrics& m);

struct TrainResult {
  policy::Checkpoint checkpoint;
  std::vector<IterationMetrics> metrics;
};

struct TrainOptions {
  std::string out_dir;                  // checkpoints and metrics.csv; empty: keep in memory
  std::optional<std::string> resume;    // checkpoint to continue from
  int stop_after = -1;                  // stop early after this iteration (>= 1), for interrupted runs
  bool verbose = false;
};

/// Alternates rollouts and PPO updates. Iteration i draws all randomness from
/// streams keyed by (seed, i), so results do not depend on the worker count
/// and a resumed run matches an uninterrupted one.
TrainResult train_loop(const std::vector<tasks::TaskPtr>& tasks, const TrainConfig& config,
                       const TrainOptions& options = {});

}  // namespace asmr::train
