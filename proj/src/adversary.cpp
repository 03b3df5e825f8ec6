#include "arml/adversary.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "arml/numeric.hpp"

namespace arml::adversary {

using flow::FlowGraph;
using flow::FlowStack;
using flow::FrozenStats;
using flow::GraphStats;

ParamVector AdversaryGradientReport::total(double lambda) const {
  ParamVector t = score_gradient;
  if (cloning_gradient.data.size() == t.data.size() && t.data.size() > 0)
    t.data += lambda * cloning_gradient.data;
  return t;
}

namespace {

// Numeric minmax statistics consistent with what the graph will use.
FrozenStats numeric_stats(const FlowStack& stack,
                          const Eigen::MatrixXd* stats_batch,
                          const FrozenStats* frozen) {
  if (frozen) return *frozen;
  if (!stats_batch)
    throw std::invalid_argument(
        "adversary: minmax stack needs a statistics batch or frozen stats");
  auto traj = stack.forward_trajectory(*stats_batch);
  // statistics live at the minmax layer input
  std::size_t pre = 0;
  for (std::size_t i = 0; i < stack.layers.size(); ++i)
    if (stack.layers[i].kind == flow::FlowLayer::Kind::kMinMax) pre = i;
  FrozenStats st;
  st.min = traj[pre].colwise().minCoeff();
  st.max = traj[pre].colwise().maxCoeff();
  return st;
}

// Training-time statistics are differentiated through (they are part of the
// composite map), matching the published implementation; explicit frozen
// statistics enter as constants. The soft-boundary cloning objective relies
// on the differentiable ln(M - m) term: it is what cancels the contraction
// reward of the planar determinants for box-preserving rescalings.
GraphStats make_graph_stats(const FlowGraph& fg, const FlowStack& stack,
                            const Eigen::MatrixXd* stats_batch,
                            const FrozenStats* frozen) {
  if (frozen) return flow::graph_stats_const(*fg.g, *frozen);
  if (!stats_batch)
    throw std::invalid_argument(
        "adversary: minmax stack needs a statistics batch or frozen stats");
  return flow::graph_stats_from_batch(fg, stack, *stats_batch);
}

ParamVector zero_like_params(const FlowStack& stack) {
  return stack.parameters().zeros_like();
}

}  // namespace

ParamVector score_gradient(const FlowStack& stack,
                           const std::vector<double>& losses,
                           const Eigen::MatrixXd& tasks,
                           const Eigen::MatrixXd& base_points,
                           bool use_baseline,
                           const FrozenStats* frozen) {
  const int k = static_cast<int>(losses.size());
  if (k == 0) throw std::invalid_argument("score_gradient: empty batch");
  if (tasks.rows() != k)
    throw std::invalid_argument("score_gradient: losses/tasks mismatch");
  for (int i = 0; i < k; ++i)
    if (!std::isfinite(losses[i]))
      throw std::runtime_error("score_gradient: non-finite loss at task " +
                               std::to_string(i));
  if (stack.parameter_count() == 0) return zero_like_params(stack);

  // Leave-one-out baseline, written through the batch mean:
  // loss_k - mean(loss_{j != k}) = K/(K-1) * (loss_k - V). Excluding the
  // task's own loss from its baseline keeps the estimator exactly unbiased.
  const double baseline = use_baseline ? stable_mean(losses) : 0.0;
  const double scale =
      use_baseline ? (k > 1 ? static_cast<double>(k) / (k - 1) : 0.0) : 1.0;
  Eigen::MatrixXd weights(k, 1);
  for (int i = 0; i < k; ++i)
    weights(i, 0) = scale * (losses[static_cast<std::size_t>(i)] - baseline) /
                    static_cast<double>(k);

  ad::Graph g;
  FlowGraph fg = flow::make_flow_graph(g, stack);
  GraphStats stats;
  const GraphStats* stats_ptr = nullptr;
  if (stack.has_minmax()) {
    stats = make_graph_stats(fg, stack, &base_points, frozen);
    stats_ptr = &stats;
  }
  ad::Value lp = flow::graph_log_prob(fg, stack, stats_ptr, tasks);
  ad::Value objective = ad::sum_all(ad::mul(g.constant(weights), lp));
  return flow::collect_flow_gradient(fg, stack, objective);
}

CloningResult cloning_gradient(const FlowStack& stack,
                               const Eigen::MatrixXd& base_samples,
                               const Eigen::MatrixXd* stats_batch,
                               const FrozenStats* frozen, CloneMode mode) {
  CloningResult res;
  res.gradient = zero_like_params(stack);
  res.retained = 0;
  if (base_samples.rows() == 0) return res;
  if (stack.parameter_count() == 0) {
    res.retained = static_cast<int>(base_samples.rows());
    return res;
  }

  FrozenStats st;
  const FrozenStats* st_ptr = nullptr;
  if (stack.has_minmax()) {
    st = numeric_stats(stack, stats_batch, frozen);
    st_ptr = &st;
  }

  auto inv = stack.inverse(base_samples, st_ptr);
  std::vector<int> keep;
  for (int i = 0; i < base_samples.rows(); ++i)
    if (stack.base.in_support(inv.base_points.row(i).transpose()))
      keep.push_back(i);
  res.retained = static_cast<int>(keep.size());

  Eigen::MatrixXd graph_points;
  bool soft = mode == CloneMode::kSoftBoundary &&
              stack.base.kind == flow::BaseDistribution::Kind::kUniformBox;
  if (soft) {
    graph_points = base_samples;  // the soft base keeps every sample finite
  } else {
    if (keep.empty()) return res;
    graph_points.resize(res.retained, base_samples.cols());
    for (int i = 0; i < res.retained; ++i)
      graph_points.row(i) = base_samples.row(keep[static_cast<std::size_t>(i)]);
  }

  ad::Graph g;
  FlowGraph fg = flow::make_flow_graph(g, stack);
  GraphStats gstats;
  const GraphStats* gstats_ptr = nullptr;
  if (stack.has_minmax()) {
    // the soft objective needs the statistics inside the graph; the filtered
    // variant evaluates the fixed density defined by this batch
    gstats = soft ? make_graph_stats(fg, stack, stats_batch, frozen)
                  : flow::graph_stats_const(g, st);
    gstats_ptr = &gstats;
  }
  ad::Value lp = flow::graph_log_prob(fg, stack, gstats_ptr, graph_points, soft);
  ad::Value objective = ad::mul(
      ad::sum_all(lp),
      g.constant(1.0 / static_cast<double>(graph_points.rows())));
  res.gradient = flow::collect_flow_gradient(fg, stack, objective);
  return res;
}

AdversaryGradientReport adversary_gradient(
    const FlowStack& stack, const Eigen::MatrixXd& batch_base_points,
    const Eigen::MatrixXd& batch_tasks, const std::vector<double>& losses,
    const Eigen::MatrixXd& clone_base_samples, bool use_baseline,
    const FrozenStats* frozen, CloneMode mode) {
  AdversaryGradientReport rep;
  rep.batch_losses = losses;
  rep.baseline = losses.empty() ? 0.0 : stable_mean(losses);
  rep.score_gradient = score_gradient(stack, losses, batch_tasks,
                                      batch_base_points, use_baseline, frozen);
  CloningResult cr = cloning_gradient(stack, clone_base_samples,
                                      &batch_base_points, frozen, mode);
  rep.cloning_gradient = cr.gradient;
  rep.cloning_retained = cr.retained;
  return rep;
}

FlowStack adversary_step(const FlowStack& stack,
                         const AdversaryGradientReport& report,
                         double gamma2, double lambda) {
  if (stack.parameter_count() == 0) return stack;
  ParamVector total = report.total(lambda);
  if (!total.data.allFinite())
    throw std::runtime_error("adversary_step: non-finite update");
  ParamVector params = stack.parameters();
  params.data += gamma2 * total.data.cwiseProduct(stack.trainable_mask());
  if (!params.data.allFinite())
    throw std::runtime_error("adversary_step: non-finite parameters");
  FlowStack next = stack;
  next.set_parameters(params);
  return next;
}

}  // namespace arml::adversary
