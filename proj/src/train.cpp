#include "asmr/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace asmr::train {

using nlohmann::json;

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;     // "init"
constexpr std::uint64_t kNormStream = 0x6e6f726d;     // "norm"
constexpr std::uint64_t kRolloutStream = 0x726f6c6c;  // "roll"
constexpr std::uint64_t kUpdateStream = 0x75706474;   // "updt"

}  // namespace

std::string to_string(ReturnMix m) {
  switch (m) {
    case ReturnMix::HalfHalf: return "half_half";
    case ReturnMix::LocalOnly: return "local_only";
    case ReturnMix::GlobalOnly: return "global_only";
  }
  return "half_half";
}

ReturnMix return_mix_from_string(const std::string& s) {
  if (s == "half_half") return ReturnMix::HalfHalf;
  if (s == "local_only") return ReturnMix::LocalOnly;
  if (s == "global_only") return ReturnMix::GlobalOnly;
  throw std::invalid_argument("unknown return mix: " + s);
}

std::string to_string(AdvantageMode m) { return m == AdvantageMode::Gae ? "gae" : "return_minus_value"; }

AdvantageMode advantage_mode_from_string(const std::string& s) {
  if (s == "return_minus_value") return AdvantageMode::ReturnMinusValue;
  if (s == "gae") return AdvantageMode::Gae;
  throw std::invalid_argument("unknown advantage mode: " + s);
}

void PpoConfig::validate() const {
  if (iterations < 0 || transitions_per_iteration <= 0 || epochs <= 0 || minibatch_size <= 0) {
    throw std::invalid_argument("PpoConfig: counts must be positive");
  }
  if (!(learning_rate > 0) || !(value_loss_coeff >= 0) || !(grad_norm_clip > 0) || !(adam_eps > 0)) {
    throw std::invalid_argument("PpoConfig: learning rate, loss coefficient and clip norm must be positive");
  }
  if (!(clip_range > 0 && clip_range < 1) || !(value_clip_range > 0 && value_clip_range < 1)) {
    throw std::invalid_argument("PpoConfig: clip ranges must lie in (0, 1)");
  }
  if (!(gamma > 0 && gamma <= 1) || !(gae_lambda >= 0 && gae_lambda <= 1)) {
    throw std::invalid_argument("PpoConfig: gamma must lie in (0, 1] and lambda in [0, 1]");
  }
}

void to_json(json& j, const PpoConfig& c) {
  j = json{{"iterations", c.iterations},
           {"transitions_per_iteration", c.transitions_per_iteration},
           {"epochs", c.epochs},
           {"minibatch_size", c.minibatch_size},
           {"learning_rate", c.learning_rate},
           {"clip_range", c.clip_range},
           {"value_clip_range", c.value_clip_range},
           {"value_loss_coeff", c.value_loss_coeff},
           {"grad_norm_clip", c.grad_norm_clip},
           {"gae_lambda", c.gae_lambda},
           {"gamma", c.gamma},
           {"return_mix", to_string(c.return_mix)},
           {"advantage", to_string(c.advantage)},
           {"adam_eps", c.adam_eps}};
}

void from_json(const json& j, PpoConfig& c) {
  PpoConfig d;
  c.iterations = j.value("iterations", d.iterations);
  c.transitions_per_iteration = j.value("transitions_per_iteration", d.transitions_per_iteration);
  c.epochs = j.value("epochs", d.epochs);
  c.minibatch_size = j.value("minibatch_size", d.minibatch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.clip_range = j.value("clip_range", d.clip_range);
  c.value_clip_range = j.value("value_clip_range", d.value_clip_range);
  c.value_loss_coeff = j.value("value_loss_coeff", d.value_loss_coeff);
  c.grad_norm_clip = j.value("grad_norm_clip", d.grad_norm_clip);
  c.gae_lambda = j.value("gae_lambda", d.gae_lambda);
  c.gamma = j.value("gamma", d.gamma);
  c.return_mix = return_mix_from_string(j.value("return_mix", to_string(d.return_mix)));
  c.advantage = advantage_mode_from_string(j.value("advantage", to_string(d.advantage)));
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.validate();
}

void TrainConfig::validate() const {
  ppo.validate();
  mpn.validate();
  if (env.horizon <= 0) throw std::invalid_argument("TrainConfig: horizon must be positive");
  if (!(env.alpha_min > 0 && env.alpha_min <= env.alpha_max)) {
    throw std::invalid_argument("TrainConfig: need 0 < alpha_min <= alpha_max");
  }
  if (workers <= 0 || checkpoint_every <= 0) throw std::invalid_argument("TrainConfig: workers and checkpoint_every must be positive");
}

json to_json(const env::EnvConfig& c) {
  return json{{"horizon", c.horizon},
              {"alpha_min", c.alpha_min},
              {"alpha_max", c.alpha_max},
              {"reward", env::to_string(c.reward)},
              {"mapping", mesh::to_string(c.mapping)},
              {"reward_uses_normalized_phi", c.reward_uses_normalized_phi},
              {"element_cap", c.element_cap},
              {"cap_penalty", c.cap_penalty}};
}

env::EnvConfig env_config_from_json(const json& j) {
  env::EnvConfig c;
  c.horizon = j.value("horizon", c.horizon);
  c.alpha_min = j.value("alpha_min", c.alpha_min);
  c.alpha_max = j.value("alpha_max", c.alpha_max);
  c.reward = env::reward_variant_from_string(j.value("reward", env::to_string(c.reward)));
  c.mapping = mesh::mapping_variant_from_string(j.value("mapping", mesh::to_string(c.mapping)));
  c.reward_uses_normalized_phi = j.value("reward_uses_normalized_phi", c.reward_uses_normalized_phi);
  c.element_cap = j.value("element_cap", c.element_cap);
  c.cap_penalty = j.value("cap_penalty", c.cap_penalty);
  return c;
}

json to_json(const TrainConfig& c) {
  return json{{"ppo", c.ppo},
              {"env", to_json(c.env)},
              {"mpn", c.mpn},
              {"seed", c.seed},
              {"workers", c.workers},
              {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (j.contains("ppo")) c.ppo = j.at("ppo").get<PpoConfig>();
  if (j.contains("env")) c.env = env_config_from_json(j.at("env"));
  if (j.contains("mpn")) c.mpn = j.at("mpn").get<policy::MpnConfig>();
  c.seed = j.value("seed", c.seed);
  c.workers = j.value("workers", c.workers);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

// --- rollouts ---------------------------------------------------------------

Episode collect_episode(const PolicyView& policy, const tasks::TaskPtr& task, int task_index,
                        const env::EnvConfig& config, Rng& rng, const EpisodeOptions& options,
                        env::EpisodeState* final_state) {
  env::EpisodeState s = options.alpha ? env::reset_with_alpha(task, config, *options.alpha) : env::reset(task, config, rng);
  Episode ep;
  ep.task_index = task_index;
  ep.alpha = s.alpha;
  ep.initial_elements = static_cast<int>(s.mesh->num_elements());
  env::ObservationGraph obs = env::build_observation(s);
  while (!s.done) {
    Transition tr;
    tr.graph = policy.normalizer ? policy.normalizer->apply(obs) : obs;
    tr.raw = std::move(obs);
    const auto out = policy.net->forward(policy.params, tr.graph, policy::Mode::Eval);
    auto sample = policy::sample_actions(out.logits, rng, options.deterministic);
    auto outcome = env::step(s, sample.actions);
    tr.actions = std::move(sample.actions);
    tr.log_probs = std::move(sample.log_probs);
    tr.values = out.values;
    tr.rewards = std::move(outcome.rewards);
    tr.mapping = std::move(outcome.mapping);
    tr.done = outcome.done;
    tr.info = outcome.info;
    ep.total_reward += tr.rewards.sum();
    ep.termination = outcome.info.termination;
    ep.steps.push_back(std::move(tr));
    obs = std::move(outcome.next_observation);
  }
  ep.final_elements = static_cast<int>(s.mesh->num_elements());
  ep.final_error = 0.0;
  for (double e : s.errors.max) ep.final_error += e;
  if (final_state) *final_state = std::move(s);
  return ep;
}

// --- returns and advantages -------------------------------------------------

namespace {

void check_chain(std::span<const Transition> steps, std::size_t t) {
  const auto& tr = steps[t];
  if (tr.mapping.rows() != tr.rewards.size()) throw std::invalid_argument("mapped returns: mapping rows do not match the agent count");
  if (t + 1 < steps.size() && tr.mapping.cols() != steps[t + 1].rewards.size()) {
    throw std::invalid_argument("mapped returns: mapping columns do not match the next agent count");
  }
}

}  // namespace

std::vector<Eigen::VectorXd> local_returns(std::span<const Transition> steps, double gamma) {
  std::vector<Eigen::VectorXd> j(steps.size());
  for (std::size_t t = steps.size(); t-- > 0;) {
    check_chain(steps, t);
    j[t] = steps[t].rewards;
    if (t + 1 < steps.size()) j[t] += gamma * steps[t].mapping.apply(j[t + 1]);
  }
  return j;
}

std::vector<double> global_returns(std::span<const Transition> steps, double gamma) {
  std::vector<double> g(steps.size(), 0.0);
  for (std::size_t t = steps.size(); t-- > 0;) {
    g[t] = steps[t].rewards.mean();
    if (t + 1 < steps.size()) g[t] += gamma * g[t + 1];
  }
  return g;
}

std::vector<Eigen::VectorXd> mapped_returns(std::span<const Transition> steps, double gamma, ReturnMix mix) {
  auto local = local_returns(steps, gamma);
  const auto global = global_returns(steps, gamma);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    switch (mix) {
      case ReturnMix::HalfHalf: local[t] = 0.5 * local[t] + Eigen::VectorXd::Constant(local[t].size(), 0.5 * global[t]); break;
      case ReturnMix::LocalOnly: break;
      case ReturnMix::GlobalOnly: local[t].setConstant(global[t]); break;
    }
  }
  return local;
}

std::vector<Eigen::VectorXd> td_errors(std::span<const Transition> steps, double gamma) {
  std::vector<Eigen::VectorXd> d(steps.size());
  for (std::size_t t = 0; t < steps.size(); ++t) {
    check_chain(steps, t);
    d[t] = steps[t].rewards - steps[t].values;
    if (t + 1 < steps.size()) d[t] += gamma * steps[t].mapping.apply(steps[t + 1].values);
  }
  return d;
}

std::vector<Eigen::VectorXd> advantages(std::span<const Transition> steps, const std::vector<Eigen::VectorXd>& returns,
                                        const PpoConfig& config) {
  std::vector<Eigen::VectorXd> adv(steps.size());
  if (config.advantage == AdvantageMode::ReturnMinusValue) {
    for (std::size_t t = 0; t < steps.size(); ++t) adv[t] = returns[t] - steps[t].values;
    return adv;
  }
  const double gl = config.gamma * config.gae_lambda;
  const auto delta = td_errors(steps, config.gamma);
  std::vector<Eigen::VectorXd> local(steps.size()), global(steps.size());
  for (std::size_t t = steps.size(); t-- > 0;) {
    local[t] = delta[t];
    double dg = steps[t].rewards.mean();
    if (t + 1 < steps.size()) {
      local[t] += gl * steps[t].mapping.apply(local[t + 1]);
      dg += config.gamma * steps[t + 1].values.mean() + gl * global[t + 1].mean();
    }
    global[t] = Eigen::VectorXd::Constant(steps[t].values.size(), dg) - steps[t].values;
  }
  for (std::size_t t = 0; t < steps.size(); ++t) {
    switch (config.return_mix) {
      case ReturnMix::HalfHalf: adv[t] = 0.5 * (local[t] + global[t]); break;
      case ReturnMix::LocalOnly: adv[t] = local[t]; break;
      case ReturnMix::GlobalOnly: adv[t] = global[t]; break;
    }
  }
  return adv;
}

void normalize_advantages(std::vector<Eigen::VectorXd>& adv) {
  double n = 0.0, sum = 0.0;
  for (const auto& a : adv) {
    n += static_cast<double>(a.size());
    sum += a.sum();
  }
  if (n == 0.0) return;
  const double mean = sum / n;
  double ss = 0.0;
  for (const auto& a : adv) ss += (a.array() - mean).square().sum();
  const double sd = std::sqrt(ss / n);
  const double scale = sd > 1e-12 ? 1.0 / sd : 1.0;
  for (auto& a : adv) a = (a.array() - mean) * scale;
}

// --- optimization -----------------------------------------------------------

json AdamState::to_json() const { return json{{"m", m}, {"v", v}, {"step", step}}; }

AdamState AdamState::from_json(const json& j) {
  AdamState s;
  if (j.is_null() || j.empty()) return s;
  s.m = j.at("m").get<std::vector<double>>();
  s.v = j.at("v").get<std::vector<double>>();
  s.step = j.at("step").get<std::int64_t>();
  return s;
}

double clipped_surrogate(double ratio, double advantage, double clip, double* dloss_dlogp) {
  const double unclipped = ratio * advantage;
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip) * advantage;
  if (unclipped <= clipped) {
    if (dloss_dlogp) *dloss_dlogp = -unclipped;  // d(ratio)/d(log pi) = ratio
    return -unclipped;
  }
  if (dloss_dlogp) *dloss_dlogp = 0.0;
  return -clipped;
}

double clipped_value_loss(double value, double old_value, double target, double clip, double* dloss_dv) {
  const double delta = value - old_value;
  const double vc = old_value + std::clamp(delta, -clip, clip);
  const double l1 = (value - target) * (value - target);
  const double l2 = (vc - target) * (vc - target);
  if (l1 >= l2) {
    if (dloss_dv) *dloss_dv = 2.0 * (value - target);
    return l1;
  }
  if (dloss_dv) *dloss_dv = std::abs(delta) < clip ? 2.0 * (vc - target) : 0.0;
  return l2;
}

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

void adam_step(std::vector<double>& p, AdamState& s, const std::vector<double>& g, double lr, double eps) {
  constexpr double b1 = 0.9, b2 = 0.999;
  if (s.m.size() != p.size()) {
    s.m.assign(p.size(), 0.0);
    s.v.assign(p.size(), 0.0);
    s.step = 0;
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    s.m[i] = b1 * s.m[i] + (1 - b1) * g[i];
    s.v[i] = b2 * s.v[i] + (1 - b2) * g[i] * g[i];
    p[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
  }
}

}  // namespace

UpdateStats ppo_update(const policy::Mpn& net, std::vector<double>& params, AdamState& adam,
                       std::span<const Sample> samples, const PpoConfig& config, Rng& rng) {
  UpdateStats stats;
  if (samples.empty()) return stats;
  const std::vector<double> saved_params = params;
  const AdamState saved_adam = adam;
  const std::size_t n = samples.size();
  std::vector<std::size_t> order(n);
  std::vector<double> grad(params.size());
  double agents_total = 0.0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.minibatch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.minibatch_size));
      std::vector<const env::ObservationGraph*> graphs;
      for (std::size_t k = start; k < end; ++k) graphs.push_back(samples[order[k]].graph);
      std::vector<int> offsets;
      const auto batch = policy::batch_graphs(graphs, offsets);
      policy::ForwardCache cache;
      const auto out = net.forward(params, batch, policy::Mode::Train, &rng, &cache);

      Eigen::VectorXd dlogits = Eigen::VectorXd::Zero(out.logits.size());
      Eigen::VectorXd dvalues = Eigen::VectorXd::Zero(out.values.size());
      const double b = static_cast<double>(end - start);
      double pl = 0.0, vl = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = samples[order[k]];
        const int off = offsets[k - start];
        const int ng = offsets[k - start + 1] - off;
        const double w = 1.0 / (ng * b);
        for (int i = 0; i < ng; ++i) {
          const double x = out.logits(off + i);
          const bool a = (*s.actions)[static_cast<std::size_t>(i)];
          const double diff = policy::log_prob(x, a) - s.old_log_probs(i);
          const double ratio = std::exp(diff);
          double dlp = 0.0, dv = 0.0;
          pl += w * clipped_surrogate(ratio, s.advantages(i), config.clip_range, &dlp);
          vl += w * clipped_value_loss(out.values(off + i), s.old_values(i), s.returns(i), config.value_clip_range, &dv);
          dlogits(off + i) = w * dlp * ((a ? 1.0 : 0.0) - sigmoid(x));
          dvalues(off + i) = w * config.value_loss_coeff * dv;
          stats.approx_kl += (ratio - 1.0) - diff;
          stats.clip_fraction += std::abs(ratio - 1.0) > config.clip_range ? 1.0 : 0.0;
          agents_total += 1.0;
        }
      }
      const double loss = pl + config.value_loss_coeff * vl;
      std::fill(grad.begin(), grad.end(), 0.0);
      double norm = 0.0;
      if (std::isfinite(loss)) {
        net.backward(params, cache, dlogits, dvalues, grad);
        for (double g : grad) norm += g * g;
        norm = std::sqrt(norm);
      }
      if (!std::isfinite(loss) || !std::isfinite(norm)) {
        params = saved_params;
        adam = saved_adam;
        stats.aborted = true;
        std::ostringstream msg;
        msg << "non-finite " << (std::isfinite(loss) ? "gradient" : "loss") << " in epoch " << epoch
            << " (policy loss " << pl << ", value loss " << vl << "); parameters restored";
        stats.message = msg.str();
        return stats;
      }
      if (norm > config.grad_norm_clip) {
        const double scale = config.grad_norm_clip / norm;
        for (double& g : grad) g *= scale;
      }
      adam_step(params, adam, grad, config.learning_rate, config.adam_eps);
      stats.policy_loss += pl;
      stats.value_loss += vl;
      stats.grad_norm += norm;
      ++stats.minibatches;
    }
  }
  const double mb = std::max(1, stats.minibatches);
  stats.policy_loss /= mb;
  stats.value_loss /= mb;
  stats.grad_norm /= mb;
  stats.approx_kl /= std::max(1.0, agents_total);
  stats.clip_fraction /= std::max(1.0, agents_total);
  return stats;
}

// --- training loop ----------------------------------------------------------

std::string metrics_csv_header() {
  return "iteration,episodes,transitions,mean_return,mean_elements,mean_error,policy_loss,value_loss,approx_kl,"
         "clip_fraction,grad_norm,aborted,rollout_seconds,seconds";
}

std::string metrics_csv_row(const IterationMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%.3f,%.3f", m.iteration,
                m.episodes, m.transitions, m.mean_return, m.mean_elements, m.mean_error, m.update.policy_loss,
                m.update.value_loss, m.update.approx_kl, m.update.clip_fraction, m.update.grad_norm,
                m.update.aborted ? 1 : 0, m.rollout_seconds, m.seconds);
  return buf;
}

namespace {

std::string checkpoint_name(int iteration) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoint_%05d.json", iteration);
  return buf;
}

// Keeps header and rows up to `last_iteration` of an existing metrics file.
void truncate_metrics(const std::filesystem::path& path, int last_iteration) {
  std::vector<std::string> keep;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (keep.empty()) {
        keep.push_back(line);
        continue;
      }
      if (std::stoi(line.substr(0, line.find(','))) <= last_iteration) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (keep.empty()) keep.push_back(metrics_csv_header());
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

TrainResult train_loop(const std::vector<tasks::TaskPtr>& task_list, const TrainConfig& config,
                       const TrainOptions& options) {
  config.validate();
  if (task_list.empty()) throw std::invalid_argument("train_loop: no training tasks");
  const policy::Mpn net(config.mpn);
  TrainResult result;
  policy::Checkpoint& ck = result.checkpoint;
  ck.config = config.mpn;
  ck.training = to_json(config);
  AdamState adam;
  int start = 1;

  if (options.resume) {
    ck = policy::load_checkpoint(*options.resume);
    if (!(ck.config == config.mpn)) throw std::invalid_argument("resume: network config differs from the checkpoint");
    adam = AdamState::from_json(ck.optimizer);
    start = static_cast<int>(ck.iteration) + 1;
    ck.training = to_json(config);
  } else {
    Rng init = Rng::stream(config.seed, {kInitStream});
    ck.params = net.init_params(init);
    for (std::size_t i = 0; i < task_list.size(); ++i) {
      Rng r = Rng::stream(config.seed, {kNormStream, i});
      ck.normalizer.update(env::build_observation(env::reset(task_list[i], config.env, r)));
    }
  }

  std::filesystem::path out_dir;
  std::ofstream metrics_out;
  if (!options.out_dir.empty()) {
    out_dir = options.out_dir;
    std::filesystem::create_directories(out_dir);
    const auto mpath = out_dir / "metrics.csv";
    if (options.resume && std::filesystem::exists(mpath)) {
      truncate_metrics(mpath, start - 1);
      metrics_out.open(mpath, std::ios::app);
    } else {
      metrics_out.open(mpath, std::ios::trunc);
      metrics_out << metrics_csv_header() << '\n';
    }
    if (!metrics_out) throw std::runtime_error("cannot write " + mpath.string());
  }

  const int last = options.stop_after > 0 ? std::min(options.stop_after, config.ppo.iterations) : config.ppo.iterations;
  for (int it = start; it <= last; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const PolicyView view{&net, ck.params, &ck.normalizer};

    // Rollouts: waves of independent episodes until enough transitions exist.
    std::vector<Episode> episodes;
    int transitions = 0;
    while (transitions < config.ppo.transitions_per_iteration) {
      const int need = (config.ppo.transitions_per_iteration - transitions + config.env.horizon - 1) / config.env.horizon;
      const std::size_t base = episodes.size();
      std::vector<Episode> wave(static_cast<std::size_t>(need));
      std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1) num_threads(config.workers)
      for (int k = 0; k < need; ++k) {
        try {
          Rng r = Rng::stream(config.seed, {kRolloutStream, static_cast<std::uint64_t>(it), base + static_cast<std::size_t>(k)});
          const int task_index = static_cast<int>(r.below(task_list.size()));
          wave[static_cast<std::size_t>(k)] =
              collect_episode(view, task_list[static_cast<std::size_t>(task_index)], task_index, config.env, r);
        } catch (...) {
#pragma omp critical
          if (!error) error = std::current_exception();
        }
      }
      if (error) std::rethrow_exception(error);
      for (auto& e : wave) {
        transitions += static_cast<int>(e.steps.size());
        episodes.push_back(std::move(e));
      }
    }

    const double rollout_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    // Targets.
    std::vector<Sample> samples;
    std::vector<Eigen::VectorXd> all_adv;
    for (const auto& ep : episodes) {
      const auto ret = mapped_returns(ep.steps, config.ppo.gamma, config.ppo.return_mix);
      const auto adv = advantages(ep.steps, ret, config.ppo);
      for (std::size_t t = 0; t < ep.steps.size(); ++t) {
        const auto& tr = ep.steps[t];
        samples.push_back({&tr.graph, &tr.actions, tr.log_probs, tr.values, {}, ret[t]});
        all_adv.push_back(adv[t]);
      }
    }
    normalize_advantages(all_adv);
    for (std::size_t k = 0; k < samples.size(); ++k) samples[k].advantages = std::move(all_adv[k]);

    Rng urng = Rng::stream(config.seed, {kUpdateStream, static_cast<std::uint64_t>(it)});
    IterationMetrics m;
    m.update = ppo_update(net, ck.params, adam, samples, config.ppo, urng);
    for (const auto& ep : episodes) {
      for (const auto& tr : ep.steps) ck.normalizer.update(tr.raw);
    }

    m.iteration = it;
    m.episodes = static_cast<int>(episodes.size());
    m.transitions = transitions;
    for (const auto& ep : episodes) {
      m.mean_return += ep.total_reward;
      m.mean_elements += ep.final_elements;
      m.mean_error += ep.final_error;
    }
    m.mean_return /= m.episodes;
    m.mean_elements /= m.episodes;
    m.mean_error /= m.episodes;
    m.rollout_seconds = rollout_seconds;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ck.iteration = it;
    ck.optimizer = adam.to_json();
    result.metrics.push_back(m);

    if (options.verbose) {
      std::fprintf(stderr, "iter %4d  return %10.4f  elements %8.1f  error %8.4f  kl %8.5f  %s%.1fs (rollout %.1fs)\n", it,
                   m.mean_return, m.mean_elements, m.mean_error, m.update.approx_kl,
                   m.update.aborted ? "ABORTED " : "", m.seconds, m.rollout_seconds);
    }
    if (metrics_out.is_open()) metrics_out << metrics_csv_row(m) << '\n' << std::flush;
    if (!out_dir.empty() && (it % config.checkpoint_every == 0 || it == last)) {
      policy::save_checkpoint((out_dir / checkpoint_name(it)).string(), ck);
      policy::save_checkpoint((out_dir / "latest.json").string(), ck);
    }
  }
  return result;
}

}  // namespace asmr::train
