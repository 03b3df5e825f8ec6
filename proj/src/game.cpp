#include "arml/game.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "arml/numeric.hpp"
#include "arml/optim.hpp"
#include "arml/rng.hpp"

namespace arml::game {

RiskPrinciple principle_from_string(const std::string& s) {
  if (s == "erm") return RiskPrinciple::kErm;
  if (s == "tr") return RiskPrinciple::kTr;
  if (s == "dr") return RiskPrinciple::kDr;
  if (s == "dro") return RiskPrinciple::kDro;
  if (s == "ar") return RiskPrinciple::kAr;
  throw std::invalid_argument("unknown risk principle '" + s + "'");
}

std::string principle_to_string(RiskPrinciple p) {
  switch (p) {
    case RiskPrinciple::kErm: return "erm";
    case RiskPrinciple::kTr: return "tr";
    case RiskPrinciple::kDr: return "dr";
    case RiskPrinciple::kDro: return "dro";
    case RiskPrinciple::kAr: return "ar";
  }
  return "?";
}

void GameConfig::validate() const {
  if (lambda < 0) throw std::invalid_argument("config: lambda < 0");
  if (gamma_inner <= 0 || gamma_outer <= 0)
    throw std::invalid_argument("config: leader rates must be positive");
  if (gamma_follower < 0)
    throw std::invalid_argument("config: gamma_follower < 0");
  if (batch_size < 2) throw std::invalid_argument("config: batch_size < 2");
  if (update_frequency < 1)
    throw std::invalid_argument("config: update_frequency < 1");
  if (iterations < 1) throw std::invalid_argument("config: iterations < 1");
  if (dr_alpha < 0 || dr_alpha >= 1)
    throw std::invalid_argument("config: dr_alpha outside [0, 1)");
  if (threads < 1) throw std::invalid_argument("config: threads < 1");
}

std::string trace_line(const TraceRecord& r) {
  std::string s;
  s += "iter=" + std::to_string(r.iteration);
  s += " loss=" + io::format_double(r.mean_loss);
  s += " baseline=" + io::format_double(r.baseline);
  s += " score_norm=" + io::format_double(r.score_grad_norm);
  s += " clone_norm=" + io::format_double(r.clone_grad_norm);
  s += " clone_retained=" + std::to_string(r.clone_retained);
  s += " dtheta=" + io::format_double(r.theta_update_norm);
  s += " dphi=" + io::format_double(r.phi_update_norm);
  s += std::string(" follower=") + (r.follower_stepped ? "1" : "0");
  s += std::string(" stationary=") + (r.stationary ? "1" : "0");
  return s;
}

int dro_group_of(const Eigen::VectorXd& tau, const task::BenchmarkSpec& spec) {
  double mid0 = 0.5 * (spec.box_low[0] + spec.box_high[0]);
  double mid1 = 0.5 * (spec.box_low[1] + spec.box_high[1]);
  return (tau[0] >= mid0 ? 1 : 0) + 2 * (tau[1] >= mid1 ? 1 : 0);
}

std::vector<double> risk_principle_step(RiskPrinciple principle,
                                        const std::vector<double>& losses,
                                        const Eigen::MatrixXd& tasks,
                                        const task::BenchmarkSpec& spec,
                                        RiskPrincipleState& state,
                                        double dr_alpha, double dro_step) {
  const int k = static_cast<int>(losses.size());
  if (k == 0) throw std::invalid_argument("risk_principle_step: empty batch");
  std::vector<double> w(static_cast<std::size_t>(k), 0.0);

  switch (principle) {
    case RiskPrinciple::kErm:
    case RiskPrinciple::kAr: {
      std::fill(w.begin(), w.end(), 1.0 / k);
      break;
    }
    case RiskPrinciple::kTr: {
      int best = 0;  // ties broken by the lowest task index
      for (int i = 1; i < k; ++i)
        if (losses[static_cast<std::size_t>(i)] >
            losses[static_cast<std::size_t>(best)])
          best = i;
      w[static_cast<std::size_t>(best)] = 1.0;
      break;
    }
    case RiskPrinciple::kDr: {
      int m = static_cast<int>(std::ceil((1.0 - dr_alpha) * k));
      m = std::clamp(m, 1, k);
      std::vector<int> idx(static_cast<std::size_t>(k));
      std::iota(idx.begin(), idx.end(), 0);
      std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (losses[static_cast<std::size_t>(a)] !=
            losses[static_cast<std::size_t>(b)])
          return losses[static_cast<std::size_t>(a)] >
                 losses[static_cast<std::size_t>(b)];
        return a < b;
      });
      for (int i = 0; i < m; ++i)
        w[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] =
            1.0 / m;
      break;
    }
    case RiskPrinciple::kDro: {
      if (tasks.rows() != k)
        throw std::invalid_argument("risk_principle_step: tasks mismatch");
      std::array<std::vector<double>, 4> group_losses;
      std::array<int, 4> counts{0, 0, 0, 0};
      std::vector<int> group(static_cast<std::size_t>(k));
      for (int i = 0; i < k; ++i) {
        int g = dro_group_of(tasks.row(i).transpose(), spec);
        group[static_cast<std::size_t>(i)] = g;
        group_losses[static_cast<std::size_t>(g)].push_back(
            losses[static_cast<std::size_t>(i)]);
        ++counts[static_cast<std::size_t>(g)];
      }
      // multiplicative update on the sampled groups, then renormalize
      for (int g = 0; g < 4; ++g)
        if (counts[static_cast<std::size_t>(g)] > 0)
          state.dro_group_weights[g] *= std::exp(
              dro_step * stable_mean(group_losses[static_cast<std::size_t>(g)]));
      state.dro_group_weights /= state.dro_group_weights.sum();
      double present_mass = 0.0;
      for (int g = 0; g < 4; ++g)
        if (counts[static_cast<std::size_t>(g)] > 0)
          present_mass += state.dro_group_weights[g];
      for (int i = 0; i < k; ++i) {
        int g = group[static_cast<std::size_t>(i)];
        w[static_cast<std::size_t>(i)] =
            state.dro_group_weights[g] /
            (counts[static_cast<std::size_t>(g)] * present_mass);
      }
      break;
    }
  }
  return w;
}

namespace {

// Index-ordered parallel map; results land in preallocated slots so the
// reduction is identical for any thread count.
template <typename F>
void parallel_for(int n, int threads, F&& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  int workers = std::min(threads, n);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      for (;;) {
        int i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  for (auto& th : pool) th.join();
}

}  // namespace

TrainResult train(const GameConfig& cfg, const meta::MetaLearner& learner,
                  ParamVector theta0, flow::FlowStack stack0,
                  const task::BenchmarkSpec& spec,
                  const std::string& trace_path, const CheckpointHook& hook,
                  long long hook_every) {
  cfg.validate();
  TrainResult result;
  result.theta = std::move(theta0);
  result.stack = std::move(stack0);

  std::ofstream trace_out;
  if (!trace_path.empty()) {
    trace_out.open(trace_path, std::ios::binary);
    if (!trace_out)
      throw std::runtime_error("train: cannot write trace '" + trace_path +
                               "'");
  }
  auto emit = [&](const TraceRecord& rec) {
    result.trace.records.push_back(rec);
    if (trace_out.is_open()) trace_out << trace_line(rec) << '\n' << std::flush;
  };

  optim::Adam leader_adam(cfg.gamma_outer);
  optim::Sgd leader_sgd(cfg.gamma_outer);
  optim::Adam follower_adam(cfg.gamma_follower);
  RiskPrincipleState principle_state;

  const int k = cfg.batch_size;
  const bool adversarial = cfg.principle == RiskPrinciple::kAr;
  flow::BaseDistribution initial = spec.initial_distribution();
  const auto t_start = std::chrono::steady_clock::now();

  for (long long t = 1; t <= cfg.iterations; ++t) {
    TraceRecord rec;
    rec.iteration = t;
    try {
      // ---- sample this iteration's task batch ----
      Rng batch_rng(mix_seed(cfg.seed, stream::kTaskBatch,
                             static_cast<std::uint64_t>(t)));
      Eigen::MatrixXd base_points, tasks;
      if (adversarial) {
        base_points = result.stack.base.draw_batch(k, batch_rng);
        tasks = result.stack.forward(base_points).tasks;
      } else {
        tasks = initial.draw_batch(k, batch_rng);
      }
      for (Eigen::Index i = 0; i < tasks.rows(); ++i)
        for (Eigen::Index j = 0; j < tasks.cols(); ++j)
          tasks(i, j) =
              std::clamp(tasks(i, j), spec.box_low[j], spec.box_high[j]);

      std::vector<task::TaskDataset> datasets(static_cast<std::size_t>(k));
      for (int i = 0; i < k; ++i)
        datasets[static_cast<std::size_t>(i)] = task::generate_task(
            spec, tasks.row(i).transpose(),
            mix_seed(cfg.seed, stream::kDataset, static_cast<std::uint64_t>(t),
                     static_cast<std::uint64_t>(i)));

      // ---- leader: per-task losses and gradients at theta_t ----
      std::vector<double> losses(static_cast<std::size_t>(k));
      std::vector<Eigen::VectorXd> grads(static_cast<std::size_t>(k));
      parallel_for(k, cfg.threads, [&](int i) {
        auto tg =
            learner.task_gradient(result.theta, datasets[static_cast<std::size_t>(i)]);
        losses[static_cast<std::size_t>(i)] = tg.loss;
        grads[static_cast<std::size_t>(i)] = std::move(tg.grad.data);
      });
      for (int i = 0; i < k; ++i) {
        if (!std::isfinite(losses[static_cast<std::size_t>(i)]) ||
            !grads[static_cast<std::size_t>(i)].allFinite())
          throw std::runtime_error("non-finite leader gradient at task " +
                                   std::to_string(i));
      }
      rec.mean_loss = stable_mean(losses);

      std::vector<double> weights =
          risk_principle_step(cfg.principle, losses, tasks, spec,
                              principle_state, cfg.dr_alpha, cfg.dro_step);
      Eigen::VectorXd meta_grad = weighted_sum_vectors(grads, weights);

      ParamVector theta_next = result.theta;
      if (cfg.outer_sgd)
        leader_sgd.step(theta_next.data, meta_grad);
      else
        leader_adam.step(theta_next.data, meta_grad);
      rec.theta_update_norm = (theta_next.data - result.theta.data).norm();

      // ---- follower ascent at theta_{t+1} on the same batch ----
      if (adversarial && cfg.gamma_follower > 0.0 &&
          t % cfg.update_frequency == 0) {
        std::vector<double> losses_next(static_cast<std::size_t>(k));
        parallel_for(k, cfg.threads, [&](int i) {
          losses_next[static_cast<std::size_t>(i)] = learner.task_loss(
              theta_next, datasets[static_cast<std::size_t>(i)]);
        });
        Rng clone_rng(mix_seed(cfg.seed, stream::kCloneBatch,
                               static_cast<std::uint64_t>(t)));
        Eigen::MatrixXd clones = result.stack.base.draw_batch(k, clone_rng);
        adversary::AdversaryGradientReport rep = adversary::adversary_gradient(
            result.stack, base_points, tasks, losses_next, clones, true,
            nullptr,
            cfg.clone_soft_boundary ? adversary::CloneMode::kSoftBoundary
                                    : adversary::CloneMode::kFiltered);
        rec.baseline = rep.baseline;
        rec.score_grad_norm = rep.score_gradient.norm();
        rec.clone_grad_norm = rep.cloning_gradient.norm();
        rec.clone_retained = rep.cloning_retained;

        double gamma2 = cfg.follower_cosine
                            ? optim::cosine_lr(cfg.gamma_follower, t,
                                               cfg.iterations)
                            : cfg.gamma_follower;
        ParamVector before = result.stack.parameters();
        if (cfg.follower_adam) {
          ParamVector total = rep.total(cfg.lambda);
          Eigen::VectorXd masked =
              total.data.cwiseProduct(result.stack.trainable_mask());
          if (!masked.allFinite())
            throw std::runtime_error("non-finite follower update");
          follower_adam.lr = gamma2;
          ParamVector params = result.stack.parameters();
          Eigen::VectorXd descent = -masked;
          follower_adam.step(params.data, descent);
          flow::FlowStack next = result.stack;
          next.set_parameters(params);
          result.stack = next;
        } else {
          result.stack =
              adversary::adversary_step(result.stack, rep, gamma2, cfg.lambda);
        }
        rec.phi_update_norm =
            (result.stack.parameters().data - before.data).norm();
        rec.follower_stepped = true;
      }

      rec.stationary = rec.theta_update_norm < 1e-10 &&
                       rec.phi_update_norm < 1e-10;
      result.theta = std::move(theta_next);
    } catch (const std::exception& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      emit(rec);
      break;
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t_start)
                      .count();
    emit(rec);
    if (hook && hook_every > 0 && t % hook_every == 0)
      hook(t, result.theta, result.stack);
  }

  if (result.stack.has_minmax())
    result.stack.freeze_reference_stats(
        10000, mix_seed(cfg.seed, stream::kFrozenStats));
  return result;
}

}  // namespace arml::game
