#pragma once

#include <Eigen/Dense>
#include <vector>

#include "arml/flows.hpp"
#include "arml/param_vector.hpp"

namespace arml::adversary {

// One follower update's worth of gradient information.
struct AdversaryGradientReport {
  ParamVector score_gradient;    // (1/K) sum (loss_k - V) d ln p(tau_k) / d phi
  ParamVector cloning_gradient;  // d/d phi of the mean base-sample log-likelihood
  double baseline = 0.0;         // V, arithmetic mean of the batch losses
  int cloning_retained = 0;      // samples kept by the support filter
  std::vector<double> batch_losses;

  ParamVector total(double lambda) const;
};

// Score-function gradient at fixed sampled tasks. The log-density is
// differentiated along the inverse path with tau_k held constant; minmax
// statistics are recomputed inside the graph from `base_points` (training
// mode) unless `frozen` overrides them.
ParamVector score_gradient(const flow::FlowStack& stack,
                           const std::vector<double>& losses,
                           const Eigen::MatrixXd& tasks,
                           const Eigen::MatrixXd& base_points,
                           bool use_baseline = true,
                           const flow::FrozenStats* frozen = nullptr);

// kFiltered drops samples whose inverse image leaves the base support from
// the average (all dropped gives the zero vector). kSoftBoundary keeps every
// sample and represents a uniform base with a stiff quadratic log-density
// well outside the box, which restores the coverage pull toward p0 that the
// hard filter deletes; it is the training default.
enum class CloneMode { kFiltered, kSoftBoundary };

struct CloningResult {
  ParamVector gradient;
  int retained = 0;  // samples whose inverse image stayed in the support
};
CloningResult cloning_gradient(const flow::FlowStack& stack,
                               const Eigen::MatrixXd& base_samples,
                               const Eigen::MatrixXd* stats_batch = nullptr,
                               const flow::FrozenStats* frozen = nullptr,
                               CloneMode mode = CloneMode::kFiltered);

// Both terms on a shared statistics definition, plus the baseline bookkeeping.
AdversaryGradientReport adversary_gradient(
    const flow::FlowStack& stack, const Eigen::MatrixXd& batch_base_points,
    const Eigen::MatrixXd& batch_tasks, const std::vector<double>& losses,
    const Eigen::MatrixXd& clone_base_samples, bool use_baseline = true,
    const flow::FrozenStats* frozen = nullptr,
    CloneMode mode = CloneMode::kSoftBoundary);

// phi <- phi + gamma2 * (score + lambda * cloning), masked to the trainable
// entries. Ascent direction; throws on a non-finite update.
flow::FlowStack adversary_step(const flow::FlowStack& stack,
                               const AdversaryGradientReport& report,
                               double gamma2, double lambda);

}  // namespace arml::adversary
