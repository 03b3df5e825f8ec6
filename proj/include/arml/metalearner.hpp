#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "arml/autodiff.hpp"
#include "arml/kvdoc.hpp"
#include "arml/param_vector.hpp"
#include "arml/tasks.hpp"

namespace arml::meta {

enum class Variant { kMaml, kCnp };

struct MetaConfig {
  Variant variant = Variant::kMaml;
  int hidden = 128;
  int hidden_layers = 3;  // MAML trunk and CNP encoder depth
  int cnp_rep_dim = 128;
  double inner_lr = 1e-3;
  int inner_steps = 1;
  bool first_order = false;  // exact second-order by default
};

struct TaskLossRecord {
  Eigen::VectorXd identifier;
  double support_loss_before = 0.0;
  double query_loss = 0.0;         // the per-task risk
  double adapted_delta_norm = 0.0;  // ||theta_i - theta||, 0 for CNP
};

// MAML or CNP over the benchmark's input/output contract. Parameters are
// handled as flat ParamVectors; graphs are built per call.
class MetaLearner {
 public:
  MetaLearner(const task::BenchmarkSpec& spec, const MetaConfig& cfg);

  const MetaConfig& config() const { return cfg_; }
  Variant variant() const { return cfg_.variant; }
  int parameter_count() const { return n_params_; }
  const std::vector<std::pair<int, int>>& shapes() const { return shapes_; }

  ParamVector init_params(std::uint64_t seed) const;

  // MAML only: `steps` gradient steps on the support loss. Throws for CNP.
  ParamVector inner_adapt(const ParamVector& theta,
                          const Eigen::MatrixXd& support_x,
                          const Eigen::MatrixXd& support_y, double inner_lr,
                          int steps) const;

  // Per-task query risk (after adaptation for MAML).
  double task_loss(const ParamVector& theta, const task::TaskDataset& t) const;
  TaskLossRecord task_loss_record(const ParamVector& theta,
                                  const task::TaskDataset& t) const;

  struct TaskGradient {
    double loss = 0.0;
    ParamVector grad;
  };
  // d task_loss / d theta; flows through the inner step(s) unless the
  // first-order flag is set.
  TaskGradient task_gradient(const ParamVector& theta,
                             const task::TaskDataset& t) const;

  // (1/K) sum_k grad_k, pairwise-reduced in index order.
  ParamVector meta_gradient(const ParamVector& theta,
                            const std::vector<task::TaskDataset>& batch) const;

  io::KvDoc to_kvdoc(const ParamVector& theta) const;
  ParamVector params_from_kvdoc(const io::KvDoc& doc) const;
  void save(const std::string& path, const ParamVector& theta) const;
  ParamVector load(const std::string& path) const;

 private:
  struct BuiltLoss {
    ad::Value loss;
    std::vector<ad::Value> leaves;
    double support_loss_before = 0.0;
    double adapted_delta_norm = 0.0;
  };
  BuiltLoss build_task_loss(ad::Graph& g, const ParamVector& theta,
                            const task::TaskDataset& t) const;
  std::vector<ad::Value> make_leaves(ad::Graph& g,
                                     const ParamVector& theta) const;
  ad::Value forward_maml(ad::Graph& g, const std::vector<ad::Value>& params,
                         const Eigen::MatrixXd& X) const;
  ad::Value forward_cnp(ad::Graph& g, const std::vector<ad::Value>& params,
                        const Eigen::MatrixXd& support_x,
                        const Eigen::MatrixXd& support_y,
                        const Eigen::MatrixXd& query_x) const;
  ad::Value apply_head(ad::Graph& g, ad::Value raw) const;
  ad::Value mse(ad::Graph& g, ad::Value pred, const Eigen::MatrixXd& target) const;

  task::BenchmarkSpec spec_;
  MetaConfig cfg_;
  std::vector<std::pair<int, int>> shapes_;
  int n_params_ = 0;
};

}  // namespace arml::meta
