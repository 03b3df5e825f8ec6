#include "arml/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "arml/rng.hpp"

namespace arml::exp {

namespace {

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "0" || value == "false") return false;
  if (value == "1" || value == "true") return true;
  throw ConfigError("config: field '" + key + "' expects 0/1, got '" + value +
                    "'");
}

std::vector<double> parse_alphas(const std::string& value) {
  std::istringstream in(value);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) out.push_back(io::parse_double(tok));
  if (out.empty()) throw ConfigError("config: field 'alphas' is empty");
  return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_kvdoc(const io::KvDoc& doc) {
  ExperimentConfig cfg;
  bool has_benchmark = false;
  for (const auto& [key, value] : doc.entries()) {
    try {
      if (key == "format") {
        if (value != "arml.config.v1")
          throw ConfigError("config: unknown format '" + value + "'");
      } else if (key == "benchmark") {
        cfg.benchmark = value;
        has_benchmark = true;
      } else if (key == "init") {
        cfg.init = value;
      } else if (key == "learner") {
        cfg.learner = value;
      } else if (key == "principle") {
        cfg.principle = value;
      } else if (key == "lambda") {
        cfg.lambda = io::parse_double(value);
      } else if (key == "gamma_inner") {
        cfg.gamma_inner = io::parse_double(value);
      } else if (key == "gamma_outer") {
        cfg.gamma_outer = io::parse_double(value);
      } else if (key == "gamma_follower") {
        cfg.gamma_follower = io::parse_double(value);
      } else if (key == "batch_size") {
        cfg.batch_size = static_cast<int>(doc.get_int(key));
      } else if (key == "update_frequency") {
        cfg.update_frequency = static_cast<int>(doc.get_int(key));
      } else if (key == "iterations") {
        cfg.iterations = doc.get_int(key);
      } else if (key == "seed") {
        cfg.seed = static_cast<std::uint64_t>(doc.get_int(key));
      } else if (key == "hidden") {
        cfg.hidden = static_cast<int>(doc.get_int(key));
      } else if (key == "hidden_layers") {
        cfg.hidden_layers = static_cast<int>(doc.get_int(key));
      } else if (key == "rep_dim") {
        cfg.rep_dim = static_cast<int>(doc.get_int(key));
      } else if (key == "inner_steps") {
        cfg.inner_steps = static_cast<int>(doc.get_int(key));
      } else if (key == "first_order") {
        cfg.first_order = parse_bool(key, value);
      } else if (key == "outer_sgd") {
        cfg.outer_sgd = parse_bool(key, value);
      } else if (key == "flow_layers") {
        cfg.flow_layers = static_cast<int>(doc.get_int(key));
      } else if (key == "follower_adam") {
        cfg.follower_adam = parse_bool(key, value);
      } else if (key == "follower_cosine") {
        cfg.follower_cosine = parse_bool(key, value);
      } else if (key == "clone_soft_boundary") {
        cfg.clone_soft_boundary = parse_bool(key, value);
      } else if (key == "dr_alpha") {
        cfg.dr_alpha = io::parse_double(value);
      } else if (key == "dro_step") {
        cfg.dro_step = io::parse_double(value);
      } else if (key == "delta_kl") {
        cfg.delta_kl = io::parse_double(value);
      } else if (key == "eval_n_tasks") {
        cfg.eval_n_tasks = static_cast<int>(doc.get_int(key));
      } else if (key == "alphas") {
        cfg.alphas = parse_alphas(value);
      } else if (key == "threads") {
        cfg.threads = static_cast<int>(doc.get_int(key));
      } else if (key == "checkpoint_every") {
        cfg.checkpoint_every = doc.get_int(key);
      } else if (key == "dump_tasks") {
        cfg.dump_tasks = parse_bool(key, value);
      } else {
        throw ConfigError("config: unknown key '" + key + "'");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("config: field '" + key + "': " + e.what());
    }
  }
  if (!has_benchmark)
    throw ConfigError("config: missing required field 'benchmark'");
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return from_kvdoc(io::KvDoc::parse(ss.str()));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

io::KvDoc ExperimentConfig::to_kvdoc() const {
  io::KvDoc doc;
  doc.set("format", "arml.config.v1");
  doc.set("benchmark", benchmark);
  doc.set("init", init);
  doc.set("learner", learner);
  doc.set("principle", principle);
  doc.set_double("lambda", lambda);
  doc.set_double("gamma_inner", gamma_inner);
  doc.set_double("gamma_outer", gamma_outer);
  doc.set_double("gamma_follower", gamma_follower);
  doc.set_int("batch_size", batch_size);
  doc.set_int("update_frequency", update_frequency);
  doc.set_int("iterations", iterations);
  doc.set_int("seed", static_cast<long long>(seed));
  doc.set_int("hidden", hidden);
  doc.set_int("hidden_layers", hidden_layers);
  doc.set_int("rep_dim", rep_dim);
  doc.set_int("inner_steps", inner_steps);
  doc.set_int("first_order", first_order ? 1 : 0);
  doc.set_int("outer_sgd", outer_sgd ? 1 : 0);
  doc.set_int("flow_layers", flow_layers);
  doc.set_int("follower_adam", follower_adam ? 1 : 0);
  doc.set_int("follower_cosine", follower_cosine ? 1 : 0);
  doc.set_int("clone_soft_boundary", clone_soft_boundary ? 1 : 0);
  doc.set_double("dr_alpha", dr_alpha);
  doc.set_double("dro_step", dro_step);
  doc.set_double("delta_kl", delta_kl);
  doc.set_int("eval_n_tasks", eval_n_tasks);
  std::string a;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (i) a += ' ';
    a += io::format_double(alphas[i]);
  }
  doc.set("alphas", a);
  doc.set_int("threads", threads);
  doc.set_int("checkpoint_every", checkpoint_every);
  doc.set_int("dump_tasks", dump_tasks ? 1 : 0);
  return doc;
}

void ExperimentConfig::validate() const {
  if (benchmark != "sinusoid" && benchmark != "pendulum" &&
      benchmark != "acrobot")
    throw ConfigError("config: unknown benchmark '" + benchmark + "'");
  if (init != "uniform" && init != "normal")
    throw ConfigError("config: init must be uniform or normal");
  if (learner != "maml" && learner != "cnp")
    throw ConfigError("config: learner must be maml or cnp");
  try {
    game::principle_from_string(principle);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (lambda < 0) throw ConfigError("config: lambda < 0");
  if (batch_size < 2) throw ConfigError("config: batch_size < 2");
  if (iterations < 1) throw ConfigError("config: iterations < 1");
  if (flow_layers < 0) throw ConfigError("config: flow_layers < 0");
  if (hidden < 1 || hidden_layers < 1 || rep_dim < 1)
    throw ConfigError("config: architecture sizes must be positive");
  if (eval_n_tasks < 1) throw ConfigError("config: eval_n_tasks < 1");
  for (double a : alphas)
    if (a < 0 || a >= 1) throw ConfigError("config: alpha outside [0, 1)");
  if (threads < 1) throw ConfigError("config: threads < 1");
}

task::BenchmarkSpec ExperimentConfig::benchmark_spec() const {
  return task::make_benchmark(benchmark, init == "uniform"
                                             ? task::InitKind::kUniform
                                             : task::InitKind::kNormal);
}

meta::MetaConfig ExperimentConfig::meta_config() const {
  meta::MetaConfig m;
  m.variant = learner == "maml" ? meta::Variant::kMaml : meta::Variant::kCnp;
  m.hidden = hidden;
  m.hidden_layers = hidden_layers;
  m.cnp_rep_dim = rep_dim;
  m.inner_lr = gamma_inner;
  m.inner_steps = inner_steps;
  m.first_order = first_order;
  return m;
}

game::GameConfig ExperimentConfig::game_config() const {
  game::GameConfig g;
  g.lambda = lambda;
  g.gamma_inner = gamma_inner;
  g.gamma_outer = gamma_outer;
  g.gamma_follower = gamma_follower;
  g.batch_size = batch_size;
  g.update_frequency = update_frequency;
  g.iterations = iterations;
  g.seed = seed;
  g.principle = game::principle_from_string(principle);
  g.dr_alpha = dr_alpha;
  g.dro_step = dro_step;
  g.follower_adam = follower_adam;
  g.follower_cosine = follower_cosine;
  g.outer_sgd = outer_sgd;
  g.clone_soft_boundary = clone_soft_boundary;
  g.delta_kl = delta_kl;
  g.threads = threads;
  return g;
}

TrainOutcome run_train(const ExperimentConfig& cfg,
                       const std::string& out_dir) {
  cfg.validate();
  TrainOutcome outcome;
  outcome.paths.dir = out_dir;
  std::filesystem::create_directories(out_dir);

  cfg.to_kvdoc().save(outcome.paths.manifest());

  task::BenchmarkSpec spec = cfg.benchmark_spec();
  meta::MetaLearner learner(spec, cfg.meta_config());
  ParamVector theta0 =
      learner.init_params(mix_seed(cfg.seed, stream::kMetaInit));
  flow::FlowStack stack0 =
      make_default_stack(spec.initial_distribution(), spec.box_low,
                         spec.box_high, cfg.flow_layers,
                         mix_seed(cfg.seed, stream::kFlowInit));

  game::CheckpointHook hook = nullptr;
  if (cfg.checkpoint_every > 0) {
    hook = [&](long long iter, const ParamVector& theta,
               const flow::FlowStack& stack) {
      flow::FlowStack snap = stack;
      if (snap.has_minmax())
        snap.freeze_reference_stats(10000,
                                    mix_seed(cfg.seed, stream::kFrozenStats));
      snap.save(out_dir + "/flow_" + std::to_string(iter) + ".txt");
      learner.save(out_dir + "/meta_" + std::to_string(iter) + ".txt", theta);
    };
  }

  auto start = std::chrono::steady_clock::now();
  game::TrainResult result =
      game::train(cfg.game_config(), learner, theta0, stack0, spec,
                  outcome.paths.trace(), hook, cfg.checkpoint_every);
  double seconds = std::chrono::duration<double>(
                       std::chrono::steady_clock::now() - start)
                       .count();

  // wall-clock lives outside the reproducible artifact set
  {
    std::ofstream timing(outcome.paths.timing(), std::ios::binary);
    timing << "total_seconds = " << seconds << "\n";
    timing << "iterations = " << result.trace.records.size() << "\n";
  }

  result.stack.save(outcome.paths.flow_checkpoint());
  learner.save(outcome.paths.meta_checkpoint(), result.theta);

  if (cfg.dump_tasks && !result.trace.records.empty()) {
    // one reference batch for cross-implementation diffing
    std::vector<task::TaskDataset> batch;
    auto smp = result.stack.sample(cfg.batch_size, mix_seed(cfg.seed, 0x7A),
                                   result.stack.frozen_or_null());
    for (int i = 0; i < cfg.batch_size; ++i) {
      Eigen::VectorXd tau = smp.tasks.row(i).transpose();
      for (Eigen::Index j = 0; j < tau.size(); ++j)
        tau[j] = std::clamp(tau[j], spec.box_low[j], spec.box_high[j]);
      batch.push_back(task::generate_task(
          spec, tau, mix_seed(cfg.seed, 0x7B, static_cast<std::uint64_t>(i))));
    }
    task::dump_task_batch(out_dir + "/tasks.txt", batch);
  }

  outcome.aborted = result.aborted;
  outcome.abort_reason = result.abort_reason;
  if (!result.trace.records.empty())
    outcome.final_mean_loss = result.trace.records.back().mean_loss;
  return outcome;
}

LoadedRun load_run(const std::string& run_dir) {
  RunPaths paths;
  paths.dir = run_dir;
  if (!std::filesystem::exists(paths.manifest()))
    throw std::runtime_error("run: missing manifest '" + paths.manifest() +
                             "'");
  LoadedRun run{ExperimentConfig::load(paths.manifest()),
                task::BenchmarkSpec{}, flow::FlowStack{}, ParamVector{}};
  run.spec = run.cfg.benchmark_spec();
  run.stack = flow::FlowStack::load(paths.flow_checkpoint());
  meta::MetaLearner learner(run.spec, run.cfg.meta_config());
  run.theta = learner.load(paths.meta_checkpoint());
  return run;
}

eval::EvalReport run_eval(const LoadedRun& run, const std::string& source,
                          int n_tasks, const std::vector<double>& alphas,
                          std::uint64_t seed) {
  if (source != "initial" && source != "adversarial")
    throw ConfigError("eval: source must be initial or adversarial");
  meta::MetaLearner learner(run.spec, run.cfg.meta_config());
  const flow::FlowStack* stack =
      source == "adversarial" ? &run.stack : nullptr;
  return eval::evaluate(learner, run.theta, stack, run.spec, n_tasks, alphas,
                        seed);
}

io::KvDoc TheoryTestbedSummary::to_kvdoc() const {
  io::KvDoc doc;
  doc.set("format", "arml.theory_testbed.v1");
  doc.set_int("games", games);
  doc.set_int("violations", violations);
  doc.set_int("complex_flags", complex_flags);
  doc.set_double("worst_step_margin", worst_margin);
  doc.set_double("worst_geo_margin", worst_geo_margin);
  doc.set_int("all_converged", all_converged ? 1 : 0);
  return doc;
}

TheoryTestbedSummary run_theory_testbed(int n_games, int steps,
                                        std::uint64_t seed) {
  TheoryTestbedSummary sum;
  Rng rng(mix_seed(seed, stream::kTheory));
  int attempts = 0;
  while (sum.games < n_games && attempts < 200 * n_games) {
    ++attempts;
    int d1 = 2 + static_cast<int>(rng.next_u64() % 4);
    int d2 = 2 + static_cast<int>(rng.next_u64() % 4);
    theory::QuadraticGame g = theory::random_game(rng, d1, d2, 0.3);
    double g1 = rng.uniform(0.7, 0.9);
    double g2 = rng.uniform(0.45, 0.6);
    theory::DeltaReport dr = theory::delta(g, g1, g2);
    if (dr.delta >= 0.5) continue;
    ++sum.games;
    Eigen::VectorXd z0(d1 + d2);
    for (Eigen::Index i = 0; i < z0.size(); ++i) z0[i] = rng.normal();
    theory::ContractionReport rep = theory::run_alt_gda(g, g1, g2, z0, steps);
    if (rep.theory_violation) ++sum.violations;
    if (rep.complex_spectrum) ++sum.complex_flags;
    if (!rep.converged) sum.all_converged = false;
    sum.worst_margin = std::max(
        sum.worst_margin, rep.worst_ratio - std::sqrt(2.0 * rep.delta_value));
    sum.worst_geo_margin = std::max(
        sum.worst_geo_margin, rep.geometric_mean_ratio - rep.sqrt_delta);
  }
  if (sum.games < n_games)
    throw std::runtime_error("theory testbed: could not find enough games");
  return sum;
}

}  // namespace arml::exp
