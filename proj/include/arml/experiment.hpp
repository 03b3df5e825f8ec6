#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "arml/eval.hpp"
#include "arml/flows.hpp"
#include "arml/game.hpp"
#include "arml/kvdoc.hpp"
#include "arml/metalearner.hpp"
#include "arml/tasks.hpp"
#include "arml/theory.hpp"

namespace arml::exp {

// Invalid or missing configuration; the CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key/value experiment description. Every field except `benchmark` has
// a documented default; unknown keys are rejected.
struct ExperimentConfig {
  std::string benchmark;              // required: sinusoid | pendulum | acrobot
  std::string init = "uniform";       // uniform | normal
  std::string learner = "maml";       // maml | cnp
  std::string principle = "ar";       // erm | tr | dr | dro | ar
  double lambda = 0.2;
  double gamma_inner = 1e-3;
  double gamma_outer = 1e-3;
  double gamma_follower = 0.003;
  int batch_size = 16;
  int update_frequency = 1;
  long long iterations = 2000;
  std::uint64_t seed = 1;
  int hidden = 128;
  int hidden_layers = 3;
  int rep_dim = 128;
  int inner_steps = 1;
  bool first_order = false;
  bool outer_sgd = false;
  int flow_layers = 2;
  bool follower_adam = false;   // plain ascent; adaptive moments behind a flag
  bool follower_cosine = true;  // cosine-decayed follower step
  bool clone_soft_boundary = true;
  double dr_alpha = 0.5;
  double dro_step = 0.01;
  double delta_kl = 0.0;  // recorded only
  int eval_n_tasks = 500;
  std::vector<double> alphas = {0.5};
  int threads = 1;
  long long checkpoint_every = 0;  // 0: final checkpoint only
  bool dump_tasks = false;

  static ExperimentConfig from_kvdoc(const io::KvDoc& doc);
  static ExperimentConfig load(const std::string& path);
  io::KvDoc to_kvdoc() const;
  void validate() const;

  task::BenchmarkSpec benchmark_spec() const;
  meta::MetaConfig meta_config() const;
  game::GameConfig game_config() const;
};

struct RunPaths {
  std::string dir;
  std::string manifest() const { return dir + "/manifest.txt"; }
  std::string trace() const { return dir + "/trace.txt"; }
  std::string timing() const { return dir + "/timing.txt"; }
  std::string flow_checkpoint() const { return dir + "/flow.txt"; }
  std::string meta_checkpoint() const { return dir + "/meta.txt"; }
};

struct TrainOutcome {
  RunPaths paths;
  bool aborted = false;
  std::string abort_reason;
  double final_mean_loss = 0.0;
};

// Runs one experiment into `out_dir`: manifest, trace, checkpoints, timing.
TrainOutcome run_train(const ExperimentConfig& cfg, const std::string& out_dir);

struct LoadedRun {
  ExperimentConfig cfg;
  task::BenchmarkSpec spec;
  flow::FlowStack stack;
  ParamVector theta;
};
LoadedRun load_run(const std::string& run_dir);

eval::EvalReport run_eval(const LoadedRun& run, const std::string& source,
                          int n_tasks, const std::vector<double>& alphas,
                          std::uint64_t seed);

struct TheoryTestbedSummary {
  int games = 0;
  int violations = 0;
  int complex_flags = 0;
  double worst_margin = -1e300;       // max over games of ratio - sqrt(2 delta)
  double worst_geo_margin = -1e300;   // max over games of geo - sqrt(delta)
  bool all_converged = true;

  io::KvDoc to_kvdoc() const;
};

// Samples random well-conditioned quadratic games, keeps those with
// delta < 1/2 and runs the alternating-GDA dynamics on each.
TheoryTestbedSummary run_theory_testbed(int n_games, int steps,
                                        std::uint64_t seed);

}  // namespace arml::exp
