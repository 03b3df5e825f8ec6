#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "arml/flows.hpp"
#include "arml/kvdoc.hpp"
#include "arml/metalearner.hpp"
#include "arml/tasks.hpp"

namespace arml::eval {

// Mean of the ceil((1-alpha) n) largest losses; alpha = 0 is the plain mean.
double cvar(const std::vector<double>& losses, double alpha);

struct EntropyEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

// H[p0] (analytic) plus the Monte Carlo mean of the summed forward log-dets
// over n base samples. Requires frozen statistics when a minmax layer is
// present; identity stacks give the analytic base entropy with zero error.
EntropyEstimate entropy(const flow::FlowStack& stack, int n_samples,
                        std::uint64_t seed);

struct DensityGrid {
  Eigen::VectorXd xs, ys;          // cell centers
  Eigen::MatrixXd log_density;     // indexed [ix, iy]
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> valid;
  double cell_area = 0.0;

  double mass() const;  // Riemann sum of exp(log_density) over valid cells
  void save(const std::string& path) const;
};

DensityGrid density_grid(const flow::FlowStack& stack,
                         const Eigen::VectorXd& box_low,
                         const Eigen::VectorXd& box_high, int resolution);

struct EvalReport {
  std::string source;  // "initial" or "adversarial"
  int n_tasks = 0;
  double mean_loss = 0.0;
  std::vector<std::pair<double, double>> cvars;  // (alpha, value)
  std::vector<double> task_losses;
  EntropyEstimate distribution_entropy;

  io::KvDoc to_kvdoc() const;
  void save(const std::string& path) const;
};

// Samples n_tasks identifiers from the adversarial stack (frozen statistics)
// or from the benchmark's initial distribution when stack is null, generates
// one dataset per task and aggregates the per-task query risks.
EvalReport evaluate(const meta::MetaLearner& learner, const ParamVector& theta,
                    const flow::FlowStack* stack,
                    const task::BenchmarkSpec& spec, int n_tasks,
                    const std::vector<double>& alphas, std::uint64_t seed);

}  // namespace arml::eval
