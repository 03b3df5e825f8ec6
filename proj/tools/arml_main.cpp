// Experiment runner: train adversarially robust meta-learners, evaluate
// checkpoints, export density grids and entropy estimates, and run the
// convergence/weight-bound checks.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <CLI11.hpp>
#include <iostream>

#include "arml/experiment.hpp"

namespace {

int guarded(const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const arml::exp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarially robust meta-learning experiments"};
  app.require_subcommand(1);

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "train from a config file");
  std::string train_config, train_out = "run";
  long long train_seed = -1;
  int train_threads = -1;
  train_cmd->add_option("--config", train_config, "config file")->required();
  train_cmd->add_option("--out", train_out, "output run directory");
  train_cmd->add_option("--seed", train_seed, "override the config seed");
  train_cmd->add_option("--threads", train_threads,
                        "override the config thread count");

  // ---- eval ----
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained run");
  std::string eval_ckpt, eval_out = "eval.txt", eval_source = "adversarial";
  int eval_n_tasks = -1;
  long long eval_seed = 1;
  std::vector<double> eval_alphas;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "run directory")->required();
  eval_cmd->add_option("--out", eval_out, "report path");
  eval_cmd->add_option("--source", eval_source, "initial | adversarial");
  eval_cmd->add_option("--n-tasks", eval_n_tasks, "number of test tasks");
  eval_cmd->add_option("--alpha", eval_alphas, "CVaR level (repeatable)");
  eval_cmd->add_option("--seed", eval_seed, "evaluation seed");

  // ---- density ----
  auto* density_cmd =
      app.add_subcommand("density", "export a log-density grid");
  std::string dens_ckpt, dens_out = "density.txt";
  int dens_res = 200;
  density_cmd->add_option("--checkpoint", dens_ckpt, "run directory")
      ->required();
  density_cmd->add_option("--out", dens_out, "grid path");
  density_cmd->add_option("--resolution", dens_res, "cells per side");

  // ---- entropy ----
  auto* entropy_cmd =
      app.add_subcommand("entropy", "estimate distribution entropy");
  std::string ent_ckpt, ent_out, ent_benchmark, ent_init = "uniform";
  int ent_samples = 20000;
  long long ent_seed = 1;
  entropy_cmd->add_option("--checkpoint", ent_ckpt,
                          "run directory (adversarial distribution)");
  entropy_cmd->add_option("--benchmark", ent_benchmark,
                          "benchmark name (initial distribution)");
  entropy_cmd->add_option("--init", ent_init, "uniform | normal");
  entropy_cmd->add_option("--out", ent_out, "report path");
  entropy_cmd->add_option("--n-samples", ent_samples, "Monte Carlo samples");
  entropy_cmd->add_option("--seed", ent_seed, "sampling seed");

  // ---- theory ----
  auto* theory_cmd =
      app.add_subcommand("theory", "convergence and weight-bound checks");
  std::string th_out, th_ckpt;
  int th_games = 50, th_steps = 200, th_pairs = 10000;
  long long th_seed = 1;
  bool th_decoupled = false;
  theory_cmd->add_option("--games", th_games, "number of filtered games");
  theory_cmd->add_option("--steps", th_steps, "iterations per game");
  theory_cmd->add_option("--seed", th_seed, "testbed seed");
  theory_cmd->add_option("--out", th_out, "report path");
  theory_cmd->add_flag("--decoupled", th_decoupled,
                       "run the decoupled scalar example");
  theory_cmd->add_option("--checkpoint", th_ckpt,
                         "run directory for the importance-weight bound");
  theory_cmd->add_option("--weight-pairs", th_pairs,
                         "samples for the weight bound");

  CLI11_PARSE(app, argc, argv);

  using namespace arml;

  if (train_cmd->parsed()) {
    return guarded([&] {
      exp::ExperimentConfig cfg = exp::ExperimentConfig::load(train_config);
      if (train_seed >= 0) cfg.seed = static_cast<std::uint64_t>(train_seed);
      if (train_threads > 0) cfg.threads = train_threads;
      exp::TrainOutcome outcome = exp::run_train(cfg, train_out);
      if (outcome.aborted)
        throw std::runtime_error("training aborted: " + outcome.abort_reason);
      std::cout << "trained " << cfg.iterations << " iterations, final mean loss "
                << outcome.final_mean_loss << "\n"
                << "artifacts in " << train_out << "\n";
    });
  }

  if (eval_cmd->parsed()) {
    return guarded([&] {
      exp::LoadedRun run = exp::load_run(eval_ckpt);
      int n = eval_n_tasks > 0 ? eval_n_tasks : run.cfg.eval_n_tasks;
      std::vector<double> alphas =
          eval_alphas.empty() ? run.cfg.alphas : eval_alphas;
      eval::EvalReport rep = exp::run_eval(
          run, eval_source, n, alphas, static_cast<std::uint64_t>(eval_seed));
      rep.save(eval_out);
      std::cout << "source " << rep.source << ": mean " << rep.mean_loss;
      for (auto& [a, c] : rep.cvars) std::cout << ", cvar(" << a << ") " << c;
      std::cout << "\nreport written to " << eval_out << "\n";
    });
  }

  if (density_cmd->parsed()) {
    return guarded([&] {
      exp::LoadedRun run = exp::load_run(dens_ckpt);
      eval::DensityGrid grid = eval::density_grid(
          run.stack, run.spec.box_low, run.spec.box_high, dens_res);
      grid.save(dens_out);
      std::cout << "grid mass " << grid.mass() << ", written to " << dens_out
                << "\n";
    });
  }

  if (entropy_cmd->parsed()) {
    return guarded([&] {
      flow::FlowStack stack;
      if (!ent_ckpt.empty()) {
        stack = exp::load_run(ent_ckpt).stack;
      } else if (!ent_benchmark.empty()) {
        auto spec = task::make_benchmark(
            ent_benchmark, ent_init == "uniform" ? task::InitKind::kUniform
                                                 : task::InitKind::kNormal);
        stack = flow::FlowStack(spec.initial_distribution(), {});
      } else {
        throw exp::ConfigError(
            "entropy: provide --checkpoint or --benchmark");
      }
      eval::EntropyEstimate est = eval::entropy(
          stack, ent_samples, static_cast<std::uint64_t>(ent_seed));
      std::cout << "entropy " << est.estimate << " +/- " << est.std_error
                << "\n";
      if (!ent_out.empty()) {
        io::KvDoc doc;
        doc.set("format", "arml.entropy.v1");
        doc.set_double("entropy", est.estimate);
        doc.set_double("std_error", est.std_error);
        doc.set_int("n_samples", ent_samples);
        doc.save(ent_out);
      }
    });
  }

  if (theory_cmd->parsed()) {
    return guarded([&] {
      if (th_decoupled) {
        theory::QuadraticGame g;
        g.A = Eigen::MatrixXd::Identity(2, 2);
        g.B = Eigen::MatrixXd::Zero(2, 2);
        g.C = -Eigen::MatrixXd::Identity(2, 2);
        Eigen::VectorXd z0(4);
        z0 << 1, -1, 0.5, 2;
        theory::ContractionReport rep =
            theory::run_alt_gda(g, 0.5, 0.5, z0, 100);
        std::cout << "decoupled game: delta " << rep.delta_value
                  << ", per-step ratio " << rep.step_ratios.front() << "\n";
        if (!th_out.empty()) rep.to_kvdoc().save(th_out);
        return;
      }
      if (!th_ckpt.empty()) {
        exp::LoadedRun run = exp::load_run(th_ckpt);
        theory::WeightBoundReport rep = theory::importance_weight_bound(
            run.stack, th_pairs, static_cast<std::uint64_t>(th_seed));
        std::cout << "max importance weight " << rep.max_omega << ", bound "
                  << rep.bound << " (l_a " << rep.lipschitz_inverse
                  << "), mean " << rep.mean_omega << ", "
                  << (rep.bound_satisfied ? "bound satisfied"
                                          : "bound violated")
                  << "\n";
        if (!th_out.empty()) rep.to_kvdoc().save(th_out);
        if (!rep.bound_satisfied)
          throw std::runtime_error("importance-weight bound violated");
        return;
      }
      exp::TheoryTestbedSummary sum = exp::run_theory_testbed(
          th_games, th_steps, static_cast<std::uint64_t>(th_seed));
      std::cout << sum.games << " games with delta < 1/2: "
                << sum.violations << " violations, worst step margin "
                << sum.worst_margin << ", worst geometric margin "
                << sum.worst_geo_margin << "\n";
      if (!th_out.empty()) sum.to_kvdoc().save(th_out);
      if (sum.violations > 0)
        throw std::runtime_error("theory violation flagged");
    });
  }

  return 0;
}
