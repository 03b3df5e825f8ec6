#include "arml/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "arml/numeric.hpp"
#include "arml/rng.hpp"

namespace arml::eval {

double cvar(const std::vector<double>& losses, double alpha) {
  if (losses.empty()) throw std::invalid_argument("cvar: empty losses");
  if (alpha < 0.0 || alpha >= 1.0)
    throw std::invalid_argument("cvar: alpha must lie in [0, 1)");
  const int n = static_cast<int>(losses.size());
  int m = static_cast<int>(
      std::ceil((1.0 - alpha) * static_cast<double>(n)));
  m = std::clamp(m, 1, n);
  std::vector<double> sorted = losses;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  sorted.resize(static_cast<std::size_t>(m));
  return stable_mean(sorted);
}

EntropyEstimate entropy(const flow::FlowStack& stack, int n_samples,
                        std::uint64_t seed) {
  if (n_samples < 1000)
    throw std::invalid_argument("entropy: need at least 1000 samples");
  if (stack.has_minmax() && !stack.frozen)
    throw std::invalid_argument("entropy: frozen statistics required");
  auto smp = stack.sample(n_samples, seed, stack.frozen_or_null());
  std::vector<double> lds(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i)
    lds[static_cast<std::size_t>(i)] = smp.log_det[i];
  EntropyEstimate est;
  double mean_ld = stable_mean(lds);
  est.estimate = stack.base.entropy() + mean_ld;
  double var = 0.0;
  for (double ld : lds) var += (ld - mean_ld) * (ld - mean_ld);
  var /= std::max(1, n_samples - 1);
  est.std_error = std::sqrt(var / n_samples);
  return est;
}

double DensityGrid::mass() const {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < log_density.rows(); ++i)
    for (Eigen::Index j = 0; j < log_density.cols(); ++j)
      if (valid(i, j) && std::isfinite(log_density(i, j)))
        acc += std::exp(log_density(i, j)) * cell_area;
  return acc;
}

void DensityGrid::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("density grid: cannot write '" + path + "'");
  out << "x y log_density\n";
  for (Eigen::Index i = 0; i < xs.size(); ++i)
    for (Eigen::Index j = 0; j < ys.size(); ++j) {
      out << io::format_double(xs[i]) << ' ' << io::format_double(ys[j])
          << ' ';
      if (valid(i, j))
        out << io::format_double(log_density(i, j));
      else
        out << "invalid";
      out << '\n';
    }
}

DensityGrid density_grid(const flow::FlowStack& stack,
                         const Eigen::VectorXd& box_low,
                         const Eigen::VectorXd& box_high, int resolution) {
  if (stack.dim() != 2)
    throw std::invalid_argument("density_grid: two-dimensional stacks only");
  if (resolution < 2)
    throw std::invalid_argument("density_grid: resolution < 2");
  if (stack.has_minmax() && !stack.frozen)
    throw std::invalid_argument("density_grid: frozen statistics required");

  DensityGrid grid;
  const int r = resolution;
  const double dx = (box_high[0] - box_low[0]) / r;
  const double dy = (box_high[1] - box_low[1]) / r;
  grid.cell_area = dx * dy;
  grid.xs.resize(r);
  grid.ys.resize(r);
  for (int i = 0; i < r; ++i) grid.xs[i] = box_low[0] + (i + 0.5) * dx;
  for (int j = 0; j < r; ++j) grid.ys[j] = box_low[1] + (j + 0.5) * dy;
  grid.log_density.resize(r, r);
  grid.valid.resize(r, r);
  grid.valid.setOnes();

  Eigen::MatrixXd cells(r * r, 2);
  int k = 0;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < r; ++j) {
      cells(k, 0) = grid.xs[i];
      cells(k, 1) = grid.ys[j];
      ++k;
    }
  try {
    Eigen::VectorXd lp = stack.log_prob(cells, stack.frozen_or_null());
    k = 0;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j) grid.log_density(i, j) = lp[k++];
  } catch (const std::exception&) {
    // fall back to per-cell evaluation, marking failures invalid
    k = 0;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j, ++k) {
        try {
          grid.log_density(i, j) =
              stack.log_prob_one(cells.row(k).transpose(),
                                 stack.frozen_or_null());
        } catch (const std::exception&) {
          grid.log_density(i, j) = std::numeric_limits<double>::quiet_NaN();
          grid.valid(i, j) = 0;
        }
      }
  }
  return grid;
}

io::KvDoc EvalReport::to_kvdoc() const {
  io::KvDoc doc;
  doc.set("format", "arml.eval.v1");
  doc.set("source", source);
  doc.set_int("n_tasks", n_tasks);
  doc.set_double("mean_loss", mean_loss);
  doc.set_int("n_alphas", static_cast<long long>(cvars.size()));
  for (std::size_t i = 0; i < cvars.size(); ++i) {
    doc.set_double("alpha." + std::to_string(i), cvars[i].first);
    doc.set_double("cvar." + std::to_string(i), cvars[i].second);
  }
  doc.set_double("entropy", distribution_entropy.estimate);
  doc.set_double("entropy_se", distribution_entropy.std_error);
  Eigen::VectorXd tl(static_cast<Eigen::Index>(task_losses.size()));
  for (std::size_t i = 0; i < task_losses.size(); ++i)
    tl[static_cast<Eigen::Index>(i)] = task_losses[i];
  doc.set_vector("task_losses", tl);
  return doc;
}

void EvalReport::save(const std::string& path) const { to_kvdoc().save(path); }

EvalReport evaluate(const meta::MetaLearner& learner, const ParamVector& theta,
                    const flow::FlowStack* stack,
                    const task::BenchmarkSpec& spec, int n_tasks,
                    const std::vector<double>& alphas, std::uint64_t seed) {
  if (n_tasks < 1) throw std::invalid_argument("evaluate: n_tasks < 1");
  EvalReport rep;
  rep.source = stack ? "adversarial" : "initial";
  rep.n_tasks = n_tasks;

  Eigen::MatrixXd tasks;
  if (stack) {
    if (stack->has_minmax() && !stack->frozen)
      throw std::invalid_argument("evaluate: frozen statistics required");
    tasks = stack->sample(n_tasks, mix_seed(seed, stream::kEvalTasks),
                          stack->frozen_or_null())
                .tasks;
    rep.distribution_entropy =
        entropy(*stack, 10000, mix_seed(seed, stream::kEntropy));
  } else {
    flow::BaseDistribution init = spec.initial_distribution();
    Rng rng(mix_seed(seed, stream::kEvalTasks));
    tasks = init.draw_batch(n_tasks, rng);
    rep.distribution_entropy = {init.entropy(), 0.0};
  }
  // identifiers are only meaningful inside the benchmark box
  for (Eigen::Index i = 0; i < tasks.rows(); ++i)
    for (Eigen::Index j = 0; j < tasks.cols(); ++j)
      tasks(i, j) = std::clamp(tasks(i, j), spec.box_low[j], spec.box_high[j]);

  rep.task_losses.resize(static_cast<std::size_t>(n_tasks));
  for (int i = 0; i < n_tasks; ++i) {
    auto dataset = task::generate_task(
        spec, tasks.row(i).transpose(),
        mix_seed(seed, stream::kEvalDataset, static_cast<std::uint64_t>(i)));
    rep.task_losses[static_cast<std::size_t>(i)] =
        learner.task_loss(theta, dataset);
  }
  rep.mean_loss = stable_mean(rep.task_losses);
  rep.cvars.reserve(alphas.size());
  for (double a : alphas) rep.cvars.emplace_back(a, cvar(rep.task_losses, a));
  return rep;
}

}  // namespace arml::eval
