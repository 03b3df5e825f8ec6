#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "arml/autodiff.hpp"
#include "arml/kvdoc.hpp"
#include "arml/param_vector.hpp"
#include "arml/rng.hpp"

namespace arml::flow {

// Base distribution over task identifiers: a uniform box or a diagonal
// normal, both with analytic entropy and exact log-density.
struct BaseDistribution {
  enum class Kind { kUniformBox, kDiagonalNormal };
  Kind kind = Kind::kUniformBox;
  Eigen::VectorXd low, high;     // uniform box
  Eigen::VectorXd mean, stddev;  // diagonal normal

  static BaseDistribution uniform_box(const Eigen::VectorXd& low,
                                      const Eigen::VectorXd& high);
  static BaseDistribution diagonal_normal(const Eigen::VectorXd& mean,
                                          const Eigen::VectorXd& stddev);

  int dim() const;
  bool in_support(const Eigen::VectorXd& x) const;
  double log_prob(const Eigen::VectorXd& x) const;  // -inf outside the box
  double entropy() const;
  Eigen::VectorXd draw(Rng& rng) const;
  Eigen::MatrixXd draw_batch(int n, Rng& rng) const;  // n x d
};

// Invertible planar map y = x + v_hat * leaky_relu(w.x + b). The stored v is
// free; v_hat is the standard reparameterization keeping w.v_hat > -1, which
// together with the monotone leaky-ReLU makes the layer globally invertible
// with a positive Jacobian determinant 1 + h'(s) * w.v_hat.
struct PlanarLayer {
  Eigen::VectorXd w, v;
  double b = 0.0;
  double slope = 0.01;

  Eigen::VectorXd effective_v() const;
  double w_dot_vhat() const;
};

// Affine squashing layer out = scale * (z - m) / (M - m) + offset, where
// (m, M) are per-dimension batch statistics of the layer input. Per-sample
// log-det is sum_i [ln scale_i - ln(M_i - m_i)]. scale/offset default to the
// identifier box so generated tasks land inside it; they are excluded from
// the trainable mask unless `trainable` is set.
struct MinMaxLayer {
  Eigen::VectorXd scale;   // > 0
  Eigen::VectorXd offset;
  bool trainable = false;
};

struct FlowLayer {
  enum class Kind { kPlanar, kMinMax };
  Kind kind = Kind::kPlanar;
  PlanarLayer planar;
  MinMaxLayer minmax;

  static FlowLayer make_planar(const PlanarLayer& p);
  static FlowLayer make_minmax(const MinMaxLayer& m);
};

// Min/max statistics for the (single) minmax layer. Training uses the
// statistics of the current batch; evaluation, densities and inversion use
// statistics frozen from a large reference batch so the density is a fixed
// function.
struct FrozenStats {
  Eigen::VectorXd min, max;
};

inline constexpr double kMinMaxDenomFloor = 1e-6;

class FlowStack {
 public:
  BaseDistribution base;
  std::vector<FlowLayer> layers;
  std::optional<FrozenStats> frozen;

  FlowStack() = default;
  FlowStack(BaseDistribution b, std::vector<FlowLayer> ls);

  int dim() const { return base.dim(); }
  bool has_minmax() const;
  int parameter_count() const;
  ParamVector parameters() const;
  void set_parameters(const ParamVector& pv);
  // 1 for trainable entries, 0 for frozen ones (minmax scale/offset by default)
  Eigen::VectorXd trainable_mask() const;

  struct ForwardResult {
    Eigen::MatrixXd tasks;        // n x d
    Eigen::VectorXd log_det;      // per-sample sum of forward log-dets
    std::optional<FrozenStats> stats_used;
  };
  // stats == nullptr: batch statistics (requires n >= 2 when minmax present).
  ForwardResult forward(const Eigen::MatrixXd& points,
                        const FrozenStats* stats = nullptr) const;

  // Intermediate points before/after every layer; trajectory[0] is the input,
  // trajectory[M] the output. Used for bi-Lipschitz estimation.
  std::vector<Eigen::MatrixXd> forward_trajectory(
      const Eigen::MatrixXd& points, const FrozenStats* stats = nullptr) const;

  struct InverseResult {
    Eigen::MatrixXd base_points;
    Eigen::VectorXd log_det_inverse;  // = -(forward log-det at matched points)
  };
  InverseResult inverse(const Eigen::MatrixXd& tasks,
                        const FrozenStats* stats = nullptr) const;

  // ln p(tau) via the inverse route; -inf when the inverse image leaves the
  // base support.
  Eigen::VectorXd log_prob(const Eigen::MatrixXd& tasks,
                           const FrozenStats* stats = nullptr) const;
  double log_prob_one(const Eigen::VectorXd& task,
                      const FrozenStats* stats = nullptr) const;

  struct SampleResult {
    Eigen::MatrixXd tasks;
    Eigen::MatrixXd base_points;
    Eigen::VectorXd log_det;
  };
  SampleResult sample(int count, std::uint64_t seed,
                      const FrozenStats* stats = nullptr) const;

  FrozenStats compute_reference_stats(int n, std::uint64_t seed) const;
  void freeze_reference_stats(int n, std::uint64_t seed);
  const FrozenStats* frozen_or_null() const {
    return frozen ? &*frozen : nullptr;
  }

  io::KvDoc to_kvdoc() const;
  static FlowStack from_kvdoc(const io::KvDoc& doc);
  void save(const std::string& path) const;
  static FlowStack load(const std::string& path);

 private:
  void validate() const;
};

// Default adversary: n_planar planar layers followed by one minmax layer
// pinned to the identifier box.
FlowStack make_default_stack(const BaseDistribution& base,
                             const Eigen::VectorXd& box_low,
                             const Eigen::VectorXd& box_high, int n_planar,
                             std::uint64_t seed);

// ---- expression-graph builders (adversary gradients) ----
//
// The adversary's score estimator needs d/d_phi ln p_phi(tau) at fixed tau,
// which runs the inverse pass as a differentiable graph over the flow
// parameters.

struct FlowGraph {
  ad::Graph* g = nullptr;
  // One Value per parameter tensor, ordered exactly like parameters().
  std::vector<ad::Value> param_leaves;
  // Cached per-planar-layer derived nodes.
  struct PlanarNodes {
    ad::Value w, v, b, v_hat, w_dot_vhat;
  };
  std::vector<int> planar_index;  // layer -> index into planar_nodes, or -1
  std::vector<PlanarNodes> planar_nodes;
  std::vector<ad::Value> minmax_scale;   // per layer (1xd) or invalid
  std::vector<ad::Value> minmax_offset;
};

FlowGraph make_flow_graph(ad::Graph& g, const FlowStack& stack);

struct GraphStats {
  ad::Value min, max;  // 1 x d
};

// Statistics recomputed inside the graph from a base batch (training mode;
// gradients flow through the arg-extremum samples).
GraphStats graph_stats_from_batch(const FlowGraph& fg, const FlowStack& stack,
                                  const Eigen::MatrixXd& base_batch);
GraphStats graph_stats_const(ad::Graph& g, const FrozenStats& stats);

// Log-density curvature applied outside a uniform base's box when the soft
// boundary is requested (cloning objective); inside the box the density is
// exact and the boundary term has zero value and zero gradient.
inline constexpr double kSoftBoundaryStiffness = 100.0;

// Per-sample ln p_phi at fixed task points (n x 1 Value). With
// soft_uniform_boundary, a uniform base contributes
// -ln(vol) - stiffness * sum_i relu(dist_i(z, box) / width_i)^2
// instead of the hard -inf wall, keeping the objective finite and
// differentiable for inverse images that leave the support.
ad::Value graph_log_prob(const FlowGraph& fg, const FlowStack& stack,
                         const GraphStats* stats, const Eigen::MatrixXd& tasks,
                         bool soft_uniform_boundary = false);

// Collect d(objective)/d(phi) into a flat ParamVector matching parameters().
ParamVector collect_flow_gradient(const FlowGraph& fg, const FlowStack& stack,
                                  ad::Value objective);

}  // namespace arml::flow
