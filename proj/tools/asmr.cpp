// Command-line front end: task generation, training, Pareto evaluation,
// heuristic baselines, single rollouts and SVG rendering.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "asmr/baselines.hpp"
#include "asmr/eval.hpp"
#include "asmr/fem.hpp"
#include "asmr/tasks.hpp"
#include "asmr/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace asmr;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  int workers = 1;
  std::string config;
};

// Records what a command produced. Paths are relative to the run directory.
class RunDir {
 public:
  RunDir(const std::string& path, std::string command, const Globals& g, int argc, char** argv)
      : root_(path), command_(std::move(command)), globals_(g) {
    fs::create_directories(root_);
    for (int i = 0; i < argc; ++i) argv_.push_back(argv[i]);
  }

  std::string file(const std::string& name) {
    outputs_.push_back(name);
    return (root_ / name).string();
  }

  void finish(const json& settings) const {
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    json m;
    m["format"] = "asmr-run";
    m["command"] = command_;
    m["argv"] = argv_;
    m["seed"] = globals_.seed;
    m["workers"] = globals_.workers;
    m["config_file"] = globals_.config;
    m["settings"] = settings;
    m["outputs"] = outputs_;
    m["finished_at"] = stamp;
    std::ofstream out(root_ / "manifest.json");
    if (!out) throw std::runtime_error("cannot write " + (root_ / "manifest.json").string());
    out << m.dump(2) << '\n';
  }

 private:
  fs::path root_;
  std::string command_;
  Globals globals_;
  std::vector<std::string> argv_;
  std::vector<std::string> outputs_;
};

std::string scalar_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw std::runtime_error("config: unsupported value " + v.dump());
}

// Config keys are long option names without dashes; nested objects address
// subcommands. Values on the command line take precedence.
void apply_config(CLI::App& app, const json& j) {
  for (const auto& [key, value] : j.items()) {
    if (value.is_object()) {
      CLI::App* sub = app.get_subcommand_no_throw(key);
      if (!sub) throw std::runtime_error("config: unknown subcommand '" + key + "'");
      apply_config(*sub, value);
      continue;
    }
    CLI::Option* opt = app.get_option_no_throw("--" + key);
    if (!opt) throw std::runtime_error("config: unknown option '" + key + "' for " + app.get_name());
    if (key == "config" || opt->count() > 0) continue;
    if (value.is_array()) {
      for (const auto& v : value) opt->add_result(scalar_string(v));
    } else {
      opt->add_result(scalar_string(value));
    }
    opt->run_callback();
  }
}

std::vector<tasks::TaskPtr> load_tasks(const std::string& manifest, int workers) {
  if (manifest.empty()) throw std::runtime_error("--task-manifest is required");
  tasks::TaskSet set = tasks::read_manifest(manifest);
  if (!set.cache_dir.empty() && fs::path(set.cache_dir).is_relative()) {
    set.cache_dir = (fs::path(manifest).parent_path() / set.cache_dir).string();
  }
  return tasks::instantiate_all(set, workers);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw std::runtime_error(message);
}

// --- gen --------------------------------------------------------------------

struct GenArgs {
  std::string kind = "laplace";
  std::string split = "train";
  int count = 10;
  int depth = 4;
  double mesh_size = 0.25;
  bool no_instantiate = false;
  std::string out = "runs/gen";
};

void cmd_gen(const GenArgs& a, const Globals& g, RunDir& run) {
  tasks::TaskSet set;
  set.kind = tasks::task_kind_from_string(a.kind);
  set.master_seed = g.seed;
  set.split = tasks::split_from_string(a.split);
  set.refinement_depth = a.depth;
  set.mesh_size = a.mesh_size;
  set.cache_dir = "cache";
  set.specs = tasks::generate_specs(set.kind, set.master_seed, set.split, a.count);
  tasks::write_manifest(run.file("tasks.json"), set);
  if (!a.no_instantiate) {
    set.cache_dir = (fs::path(a.out) / "cache").string();
    const auto ts = tasks::instantiate_all(set, g.workers);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      std::printf("task %zu: %zu elements, reference %zu elements%s\n", i, ts[i]->initial_mesh->num_elements(),
                  ts[i]->reference_mesh()->num_elements(), ts[i]->from_cache ? " (cached)" : "");
    }
  }
  run.finish({{"kind", a.kind}, {"split", a.split}, {"count", a.count}, {"depth", a.depth},
              {"mesh_size", a.mesh_size}, {"instantiated", !a.no_instantiate}});
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  int horizon = 4;
  int iterations = 400;
  double alpha_min = 1e-3;
  double alpha_max = 1e-1;
  std::string reward = "max";
  std::string mapping = "normalized_sum";
  std::string return_mix = "half_half";
  std::string advantage = "return_minus_value";
  int latent_dim = 64;
  int transitions = 256;
  int epochs = 5;
  int minibatch = 32;
  double lr = 3e-4;
  int checkpoint_every = 10;
  std::string resume;
  bool quiet = false;
  std::string out = "runs/train";
};

void cmd_train(const TrainArgs& a, const Globals& g, RunDir& run) {
  const auto ts = load_tasks(a.manifest, g.workers);
  train::TrainConfig c;
  c.ppo.iterations = a.iterations;
  c.ppo.transitions_per_iteration = a.transitions;
  c.ppo.epochs = a.epochs;
  c.ppo.minibatch_size = a.minibatch;
  c.ppo.learning_rate = a.lr;
  c.ppo.return_mix = train::return_mix_from_string(a.return_mix);
  c.ppo.advantage = train::advantage_mode_from_string(a.advantage);
  c.env.horizon = a.horizon;
  c.env.alpha_min = a.alpha_min;
  c.env.alpha_max = a.alpha_max;
  c.env.reward = env::reward_variant_from_string(a.reward);
  c.env.mapping = mesh::mapping_variant_from_string(a.mapping);
  c.mpn.latent_dim = a.latent_dim;
  c.seed = g.seed;
  c.workers = g.workers;
  c.checkpoint_every = a.checkpoint_every;
  c.validate();

  train::TrainOptions o;
  o.out_dir = a.out;
  o.verbose = !a.quiet;
  if (!a.resume.empty()) o.resume = a.resume;
  {
    std::ofstream cfg(run.file("train_config.json"));
    cfg << train::to_json(c).dump(2) << '\n';
  }
  const auto res = train::train_loop(ts, c, o);
  run.file("metrics.csv");
  run.file("latest.json");
  if (!res.metrics.empty()) {
    const auto& last = res.metrics.back();
    std::printf("finished iteration %d: mean return %.4f, mean elements %.1f\n", last.iteration, last.mean_return,
                last.mean_elements);
  }
  run.finish({{"train_config", train::to_json(c)}, {"task_manifest", a.manifest}, {"resume", a.resume}});
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::vector<double> alpha_grid;
  double alpha_min = 1e-3;
  double alpha_max = 1e-1;
  int alpha_count = 5;
  int horizon = 0;
  int uniform_levels = -1;
  bool outlier_filter = false;
  std::string out = "runs/eval";
};

void cmd_eval(const EvalArgs& a, const Globals& g, RunDir& run) {
  require(!a.checkpoint.empty(), "--checkpoint is required");
  const auto ck = policy::load_checkpoint(a.checkpoint);
  const auto ts = load_tasks(a.manifest, g.workers);
  const auto alphas = a.alpha_grid.empty() ? eval::log_space(a.alpha_min, a.alpha_max, a.alpha_count) : a.alpha_grid;
  const auto envcfg = eval::env_config_for(ck, a.horizon);
  const eval::SweepOptions so{.workers = g.workers, .outlier_filter = a.outlier_filter, .seed = g.seed};
  const auto res = eval::pareto_sweep(ck, ts, envcfg, alphas, so);
  eval::write_pareto_csv(run.file("pareto.csv"), res.points);
  eval::write_runs_csv(run.file("runs.csv"), res.runs);
  for (const auto& p : res.points) {
    std::printf("alpha %-10.4g elements %9.1f  squared %.4g  mean %.4g  top %.4g\n", p.parameter, p.iqm_elements,
                p.iqm_squared, p.iqm_mean, p.iqm_top);
  }
  const int levels = a.uniform_levels >= 0 ? a.uniform_levels : (ts.empty() ? 0 : ts.front()->refinement_depth);
  const auto uni = eval::uniform_sweep(ts, levels, so);
  eval::write_pareto_csv(run.file("uniform.csv"), uni.points);
  run.finish({{"checkpoint", a.checkpoint}, {"task_manifest", a.manifest}, {"alphas", alphas},
              {"horizon", envcfg.horizon}, {"uniform_levels", levels}, {"outlier_filter", a.outlier_filter}});
}

// --- baseline ---------------------------------------------------------------

struct BaselineArgs {
  std::string kind = "oracle";
  double theta = 0.5;
  std::vector<double> theta_grid;
  int steps = 4;
  int initial_uniform = 2;
  int element_cap = 20000;
  std::string manifest;
  bool outlier_filter = false;
  std::string out = "runs/baseline";
};

void cmd_baseline(const BaselineArgs& a, const Globals& g, RunDir& run) {
  const auto ts = load_tasks(a.manifest, g.workers);
  baselines::HeuristicConfig hc{.kind = baselines::heuristic_kind_from_string(a.kind),
                                .theta = a.theta,
                                .steps = a.steps,
                                .initial_uniform_refinements = a.initial_uniform,
                                .element_cap = a.element_cap};
  hc.validate();
  const auto thetas = a.theta_grid.empty() ? std::vector<double>{a.theta} : a.theta_grid;
  const auto res = eval::baseline_sweep(ts, hc, thetas,
                                        {.workers = g.workers, .outlier_filter = a.outlier_filter, .seed = g.seed});
  eval::write_pareto_csv(run.file("pareto.csv"), res.points);
  eval::write_runs_csv(run.file("runs.csv"), res.runs);
  for (const auto& p : res.points) {
    std::printf("theta %-6.3g elements %9.1f  squared %.4g  mean %.4g  top %.4g\n", p.parameter, p.iqm_elements,
                p.iqm_squared, p.iqm_mean, p.iqm_top);
  }
  run.finish({{"kind", a.kind}, {"thetas", thetas}, {"steps", a.steps}, {"initial_uniform", a.initial_uniform},
              {"element_cap", a.element_cap}, {"task_manifest", a.manifest}});
}

// --- rollout ----------------------------------------------------------------

struct RolloutArgs {
  std::string checkpoint;
  std::string manifest;
  int task_index = 0;
  double alpha = 0.01;
  int horizon = 0;
  std::string out = "runs/rollout";
};

void cmd_rollout(const RolloutArgs& a, const Globals& g, RunDir& run) {
  require(!a.checkpoint.empty(), "--checkpoint is required");
  const auto ck = policy::load_checkpoint(a.checkpoint);
  const auto ts = load_tasks(a.manifest, g.workers);
  require(a.task_index >= 0 && a.task_index < static_cast<int>(ts.size()), "--task-index out of range");
  const auto& task = ts[static_cast<std::size_t>(a.task_index)];
  const auto envcfg = eval::env_config_for(ck, a.horizon);
  const auto r = eval::rollout_policy(ck, task, envcfg, a.alpha);

  env::write_trace_csv(run.file("trace.csv"), r.trace);
  const auto e0 = env::compute_element_errors(task->initial_solution, *task);
  eval::render_mesh_svg(*task->initial_mesh, e0.max, run.file("initial_mesh.svg"));
  eval::render_mesh_svg(*r.final_state.mesh, r.final_state.errors.max, run.file("final_mesh.svg"));
  eval::render_solution_svg(r.final_state.solution, run.file("final_solution.svg"));
  {
    std::ofstream out(run.file("final_mesh.txt"));
    fem::write_solution(out, r.final_state.solution);
  }
  std::printf("task %d alpha %g: %d -> %d elements, squared %.4g, mean %.4g, top %.4g, %s\n", a.task_index, a.alpha,
              r.episode.initial_elements, r.metrics.element_count, r.metrics.squared_error, r.metrics.mean_error,
              r.metrics.top_error, env::to_string(r.episode.termination).c_str());
  run.finish({{"checkpoint", a.checkpoint},
              {"task_manifest", a.manifest},
              {"task_index", a.task_index},
              {"alpha", a.alpha},
              {"horizon", envcfg.horizon},
              {"metrics",
               {{"elements", r.metrics.element_count},
                {"squared_error", r.metrics.squared_error},
                {"mean_error", r.metrics.mean_error},
                {"top_error", r.metrics.top_error}}}});
}

// --- render -----------------------------------------------------------------

struct RenderArgs {
  std::string mesh;
  std::string color = "auto";
  int width = 800;
  std::string out = "runs/render";
};

void cmd_render(const RenderArgs& a, const Globals&, RunDir& run) {
  require(!a.mesh.empty(), "--mesh is required");
  std::ifstream in(a.mesh);
  require(static_cast<bool>(in), "cannot open " + a.mesh);
  const auto mesh = std::make_shared<const mesh::TriMesh>(mesh::read_mesh(in));
  std::optional<fem::FemSolution> sol;
  std::string word;
  if (in >> word && word == "solution") {
    Eigen::Index n = 0;
    in >> n;
    require(n == static_cast<Eigen::Index>(mesh->num_vertices()), a.mesh + ": solution size mismatch");
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) require(static_cast<bool>(in >> v(i)), a.mesh + ": truncated solution");
    sol = fem::FemSolution{mesh, std::move(v)};
  }
  const std::string color = a.color == "auto" ? (sol ? "solution" : "volume") : a.color;
  const eval::SvgOptions opts{.width = a.width};
  const std::string name = fs::path(a.mesh).stem().string() + ".svg";
  if (color == "solution") {
    require(sol.has_value(), a.mesh + " has no solution block");
    eval::render_solution_svg(*sol, run.file(name), opts);
  } else if (color == "volume") {
    eval::render_mesh_svg(*mesh, mesh->element_volumes(), run.file(name), opts);
  } else {
    throw std::runtime_error("--color must be auto, solution or volume");
  }
  run.finish({{"mesh", a.mesh}, {"color", color}, {"width", a.width}});
}

std::string choices(std::initializer_list<const char*> names) {
  std::string s;
  for (const char* n : names) s += (s.empty() ? "" : ", ") + std::string(n);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive swarm mesh refinement: tasks, training, evaluation and baselines"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Master seed")->capture_default_str();
  app.add_option("--workers", g.workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "JSON file with option defaults (keys are long option names)");

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Generate a task set and fill its reference cache");
  c_gen->add_option("--kind", gen.kind, "laplace or poisson")->capture_default_str();
  c_gen->add_option("--split", gen.split, "train or eval")->capture_default_str();
  c_gen->add_option("--count", gen.count)->capture_default_str();
  c_gen->add_option("--depth", gen.depth, "Reference refinement depth R")->capture_default_str();
  c_gen->add_option("--mesh-size", gen.mesh_size, "Initial element size")->capture_default_str();
  c_gen->add_flag("--no-instantiate", gen.no_instantiate, "Only write the manifest");
  c_gen->add_option("--out", gen.out, "Run directory")->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a policy with PPO");
  c_train->add_option("--task-manifest", tr.manifest);
  c_train->add_option("--refine-steps", tr.horizon, "Episode length T")->capture_default_str();
  c_train->add_option("--iterations", tr.iterations)->capture_default_str();
  c_train->add_option("--alpha-min", tr.alpha_min)->capture_default_str();
  c_train->add_option("--alpha-max", tr.alpha_max)->capture_default_str();
  c_train->add_option("--reward-variant", tr.reward, choices({"max", "volume_scaled"}))->capture_default_str();
  c_train->add_option("--mapping-variant", tr.mapping,
                      choices({"normalized_sum", "unnormalized_sum", "normalized_mean", "unnormalized_mean"}))
      ->capture_default_str();
  c_train->add_option("--return-mix", tr.return_mix, choices({"half_half", "local_only", "global_only"}))
      ->capture_default_str();
  c_train->add_option("--advantage", tr.advantage, choices({"return_minus_value", "gae"}))->capture_default_str();
  c_train->add_option("--latent-dim", tr.latent_dim)->capture_default_str();
  c_train->add_option("--transitions", tr.transitions, "Transitions per iteration")->capture_default_str();
  c_train->add_option("--epochs", tr.epochs)->capture_default_str();
  c_train->add_option("--minibatch", tr.minibatch)->capture_default_str();
  c_train->add_option("--learning-rate", tr.lr)->capture_default_str();
  c_train->add_option("--checkpoint-every", tr.checkpoint_every)->capture_default_str();
  c_train->add_option("--resume", tr.resume, "Checkpoint to continue from");
  c_train->add_flag("--quiet", tr.quiet);
  c_train->add_option("--out", tr.out, "Run directory")->capture_default_str();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Pareto sweep of a checkpoint over alpha, plus the uniform front");
  c_eval->add_option("--checkpoint", ev.checkpoint);
  c_eval->add_option("--task-manifest", ev.manifest);
  c_eval->add_option("--alpha-grid", ev.alpha_grid, "Explicit alpha values");
  c_eval->add_option("--alpha-min", ev.alpha_min)->capture_default_str();
  c_eval->add_option("--alpha-max", ev.alpha_max)->capture_default_str();
  c_eval->add_option("--alpha-count", ev.alpha_count, "Log-spaced values when no grid is given")->capture_default_str();
  c_eval->add_option("--refine-steps", ev.horizon, "Override the checkpoint's T");
  c_eval->add_option("--uniform-levels", ev.uniform_levels, "Uniform front levels (default: R)");
  c_eval->add_flag("--outlier-filter", ev.outlier_filter, "Drop runs stopped by the element cap");
  c_eval->add_option("--out", ev.out, "Run directory")->capture_default_str();

  BaselineArgs bl;
  auto* c_base = app.add_subcommand("baseline", "Threshold-marking heuristics");
  c_base->add_option("--kind", bl.kind, choices({"uniform", "oracle", "max_oracle", "zz"}))->capture_default_str();
  c_base->add_option("--theta", bl.theta)->capture_default_str();
  c_base->add_option("--theta-grid", bl.theta_grid);
  c_base->add_option("--steps", bl.steps)->capture_default_str();
  c_base->add_option("--initial-uniform", bl.initial_uniform, "Uniform passes before ZZ")->capture_default_str();
  c_base->add_option("--element-cap", bl.element_cap)->capture_default_str();
  c_base->add_option("--task-manifest", bl.manifest);
  c_base->add_flag("--outlier-filter", bl.outlier_filter);
  c_base->add_option("--out", bl.out, "Run directory")->capture_default_str();

  RolloutArgs ro;
  auto* c_roll = app.add_subcommand("rollout", "One deterministic episode with trace and SVGs");
  c_roll->add_option("--checkpoint", ro.checkpoint);
  c_roll->add_option("--task-manifest", ro.manifest);
  c_roll->add_option("--task-index", ro.task_index)->capture_default_str();
  c_roll->add_option("--alpha", ro.alpha)->capture_default_str();
  c_roll->add_option("--refine-steps", ro.horizon, "Override the checkpoint's T");
  c_roll->add_option("--out", ro.out, "Run directory")->capture_default_str();

  RenderArgs rd;
  auto* c_render = app.add_subcommand("render", "Render a mesh file (optionally with solution) to SVG");
  c_render->add_option("--mesh", rd.mesh);
  c_render->add_option("--color", rd.color, "auto, solution or volume")->capture_default_str();
  c_render->add_option("--width", rd.width)->capture_default_str();
  c_render->add_option("--out", rd.out, "Run directory")->capture_default_str();

  try {
    app.parse(argc, argv);
    if (!g.config.empty()) {
      std::ifstream in(g.config);
      if (!in) throw std::runtime_error("cannot open config " + g.config);
      apply_config(app, json::parse(in));
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  try {
    const auto start = std::chrono::steady_clock::now();
    if (c_gen->parsed()) {
      RunDir run(gen.out, "gen", g, argc, argv);
      cmd_gen(gen, g, run);
    } else if (c_train->parsed()) {
      RunDir run(tr.out, "train", g, argc, argv);
      cmd_train(tr, g, run);
    } else if (c_eval->parsed()) {
      RunDir run(ev.out, "eval", g, argc, argv);
      cmd_eval(ev, g, run);
    } else if (c_base->parsed()) {
      RunDir run(bl.out, "baseline", g, argc, argv);
      cmd_baseline(bl, g, run);
    } else if (c_roll->parsed()) {
      RunDir run(ro.out, "rollout", g, argc, argv);
      cmd_rollout(ro, g, run);
    } else if (c_render->parsed()) {
      RunDir run(rd.out, "render", g, argc, argv);
      cmd_render(rd, g, run);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "done in %.1f s\n", secs);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
