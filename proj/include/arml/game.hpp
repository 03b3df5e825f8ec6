#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "arml/adversary.hpp"
#include "arml/flows.hpp"
#include "arml/metalearner.hpp"
#include "arml/tasks.hpp"

namespace arml::game {

enum class RiskPrinciple { kErm, kTr, kDr, kDro, kAr };

RiskPrinciple principle_from_string(const std::string& s);
std::string principle_to_string(RiskPrinciple p);

struct GameConfig {
  double lambda = 0.2;           // distribution-cloning weight
  double gamma_inner = 1e-3;     // leader inner rate (MAML)
  double gamma_outer = 1e-3;     // leader outer rate
  double gamma_follower = 0.003; // follower ascent rate
  int batch_size = 16;           // K
  int update_frequency = 1;      // u
  long long iterations = 2000;   // H
  std::uint64_t seed = 1;
  RiskPrinciple principle = RiskPrinciple::kAr;
  double dr_alpha = 0.5;    // tail fraction kept is ceil((1-alpha) K)
  double dro_step = 0.01;   // exponentiated-gradient step
  bool follower_adam = false;
  bool follower_cosine = false;
  bool outer_sgd = false;   // plain SGD instead of adaptive moments
  // soft-boundary cloning keeps the pull toward p0 active for uniform bases;
  // the filtered variant follows the hard-support semantics
  bool clone_soft_boundary = true;
  double delta_kl = 0.0;    // KL radius; recorded only, never used numerically
  int threads = 1;

  void validate() const;
};

struct TraceRecord {
  long long iteration = 0;
  double mean_loss = 0.0;  // leader objective estimate at theta_t
  double baseline = 0.0;
  double score_grad_norm = 0.0;
  double clone_grad_norm = 0.0;
  int clone_retained = 0;
  double theta_update_norm = 0.0;
  double phi_update_norm = 0.0;
  bool follower_stepped = false;
  bool stationary = false;
  double wall_ms = 0.0;  // not serialized; timing lives outside the trace
};

struct TrainTrace {
  std::vector<TraceRecord> records;
};

// One line per record with documented field names; excludes wall-clock so
// reruns are byte-identical.
std::string trace_line(const TraceRecord& r);

struct RiskPrincipleState {
  Eigen::VectorXd dro_group_weights;  // 4 quadrant groups
  RiskPrincipleState() : dro_group_weights(Eigen::VectorXd::Constant(4, 0.25)) {}
};

// Batch weighting for the leader step. Weights are non-negative and sum to
// one; DRO updates the persistent group weights multiplicatively first.
std::vector<double> risk_principle_step(RiskPrinciple principle,
                                        const std::vector<double>& losses,
                                        const Eigen::MatrixXd& tasks,
                                        const task::BenchmarkSpec& spec,
                                        RiskPrincipleState& state,
                                        double dr_alpha, double dro_step);

int dro_group_of(const Eigen::VectorXd& tau, const task::BenchmarkSpec& spec);

struct TrainResult {
  ParamVector theta;
  flow::FlowStack stack;
  TrainTrace trace;
  bool aborted = false;
  std::string abort_reason;
};

using CheckpointHook =
    std::function<void(long long, const ParamVector&, const flow::FlowStack&)>;

// Alternating descent/ascent: per iteration the leader samples K tasks from
// p_phi, adapts and updates theta; every u iterations the follower takes a
// score-plus-cloning ascent step evaluated at the updated theta on the same
// batch. Deterministic given the seed.
TrainResult train(const GameConfig& cfg, const meta::MetaLearner& learner,
                  ParamVector theta0, flow::FlowStack stack0,
                  const task::BenchmarkSpec& spec,
                  const std::string& trace_path = "",
                  const CheckpointHook& hook = nullptr,
                  long long hook_every = 0);

}  // namespace arml::game
