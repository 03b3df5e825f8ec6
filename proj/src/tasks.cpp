#include "arml/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "arml/kvdoc.hpp"

namespace arml::task {

namespace {
constexpr double kPi = 3.14159265358979323846;

double wrap_pi(double x) {
  x = std::fmod(x + kPi, 2 * kPi);
  if (x < 0) x += 2 * kPi;
  return x - kPi;
}

Eigen::VectorXd vec2(double a, double b) {
  Eigen::VectorXd v(2);
  v << a, b;
  return v;
}
}  // namespace

flow::BaseDistribution BenchmarkSpec::initial_distribution() const {
  if (init_kind == InitKind::kUniform)
    return flow::BaseDistribution::uniform_box(box_low, box_high);
  return flow::BaseDistribution::diagonal_normal(init_mean, init_stddev);
}

bool BenchmarkSpec::in_box(const Eigen::VectorXd& tau, double tol) const {
  if (tau.size() != box_low.size()) return false;
  for (Eigen::Index i = 0; i < tau.size(); ++i)
    if (tau[i] < box_low[i] - tol || tau[i] > box_high[i] + tol) return false;
  return true;
}

BenchmarkSpec make_benchmark(const std::string& name, InitKind init) {
  BenchmarkSpec s;
  s.name = name;
  s.init_kind = init;
  if (name == "sinusoid") {
    s.benchmark = Benchmark::kSinusoid;
    s.box_low = vec2(0.1, 0.0);
    s.box_high = vec2(5.0, kPi);
    s.init_mean = vec2(2.5, 1.5);
    s.init_stddev = vec2(0.8, 0.5);
    s.shots = 5;
    s.points_per_task = 10;
    s.input_dim = 1;
    s.target_dim = 1;
    s.raw_output_dim = 1;
    s.head = OutputHead::kIdentity;
  } else if (name == "pendulum") {
    s.benchmark = Benchmark::kPendulum;
    s.box_low = vec2(0.4, 0.4);
    s.box_high = vec2(1.6, 1.6);
    s.init_mean = vec2(1.0, 1.0);
    s.init_stddev = vec2(0.2, 0.2);
    s.shots = 10;
    s.points_per_task = 200;
    s.input_dim = 4;   // observation (3) + torque
    s.target_dim = 3;  // next observation
    s.raw_output_dim = 2;
    s.head = OutputHead::kPendulum;
  } else if (name == "acrobot") {
    s.benchmark = Benchmark::kAcrobot;
    s.box_low = vec2(0.4, 0.4);
    s.box_high = vec2(1.6, 1.6);
    s.init_mean = vec2(1.0, 1.0);
    s.init_stddev = vec2(0.2, 0.2);
    s.shots = 10;
    s.points_per_task = 200;
    s.input_dim = 7;   // observation (6) + torque
    s.target_dim = 6;
    s.raw_output_dim = 4;
    s.head = OutputHead::kAcrobot;
  } else {
    throw std::invalid_argument("unknown benchmark '" + name + "'");
  }
  return s;
}

double sinusoid_target(const Eigen::VectorXd& tau, double x) {
  return tau[0] * std::sin(x - tau[1]);
}

PendulumState pendulum_step(const Eigen::VectorXd& tau,
                            const PendulumState& s, double u) {
  using namespace constants;
  const double m = tau[0], l = tau[1];
  double acc = 3.0 * kPendulumGravity / (2.0 * l) * std::sin(s.theta) +
               3.0 / (m * l * l) * u;
  PendulumState next;
  next.omega = s.omega + acc * kPendulumDt;
  next.omega = std::clamp(next.omega, -kPendulumMaxSpeed, kPendulumMaxSpeed);
  next.theta = s.theta + next.omega * kPendulumDt;
  return next;
}

Eigen::Vector3d pendulum_observe(const PendulumState& s) {
  return {std::cos(s.theta), std::sin(s.theta), s.omega};
}

namespace {

// Two-link dynamics in the book formulation; state [th1, om1, th2, om2].
Eigen::Vector4d acrobot_deriv(double m1, double m2, const Eigen::Vector4d& s,
                              double torque) {
  using namespace constants;
  const double l1 = kAcrobotLink, lc1 = kAcrobotCom, lc2 = kAcrobotCom;
  const double i1 = kAcrobotInertia, i2 = kAcrobotInertia;
  const double g = kAcrobotGravity;
  const double th1 = s[0], om1 = s[1], th2 = s[2], om2 = s[3];

  double d1 = m1 * lc1 * lc1 +
              m2 * (l1 * l1 + lc2 * lc2 + 2 * l1 * lc2 * std::cos(th2)) + i1 +
              i2;
  double d2 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(th2)) + i2;
  double phi2 = m2 * lc2 * g * std::cos(th1 + th2 - kPi / 2);
  double phi1 = -m2 * l1 * lc2 * om2 * om2 * std::sin(th2) -
                2 * m2 * l1 * lc2 * om2 * om1 * std::sin(th2) +
                (m1 * lc1 + m2 * l1) * g * std::cos(th1 - kPi / 2) + phi2;
  double acc2 = (torque + d2 / d1 * phi1 -
                 m2 * l1 * lc2 * om1 * om1 * std::sin(th2) - phi2) /
                (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
  double acc1 = -(d2 * acc2 + phi1) / d1;
  return {om1, acc1, om2, acc2};
}

}  // namespace

Eigen::Vector4d acrobot_step(const Eigen::VectorXd& tau,
                             const Eigen::Vector4d& s, double torque) {
  using namespace constants;
  const double m1 = tau[0], m2 = tau[1];
  const double dt = kAcrobotDt;
  // fourth-order Runge-Kutta with the torque held constant over the step
  Eigen::Vector4d k1 = acrobot_deriv(m1, m2, s, torque);
  Eigen::Vector4d k2 = acrobot_deriv(m1, m2, s + 0.5 * dt * k1, torque);
  Eigen::Vector4d k3 = acrobot_deriv(m1, m2, s + 0.5 * dt * k2, torque);
  Eigen::Vector4d k4 = acrobot_deriv(m1, m2, s + dt * k3, torque);
  Eigen::Vector4d next = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  next[0] = wrap_pi(next[0]);
  next[2] = wrap_pi(next[2]);
  next[1] = std::clamp(next[1], -kAcrobotMaxVel1, kAcrobotMaxVel1);
  next[3] = std::clamp(next[3], -kAcrobotMaxVel2, kAcrobotMaxVel2);
  return next;
}

Eigen::VectorXd acrobot_observe(const Eigen::Vector4d& s) {
  Eigen::VectorXd obs(6);
  obs << std::cos(s[0]), std::sin(s[0]), std::cos(s[2]), std::sin(s[2]), s[1],
      s[3];
  return obs;
}

namespace {

void split_support_query(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                         int shots, Rng& rng, TaskDataset& out) {
  const int n = static_cast<int>(X.rows());
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = n - 1; i > 0; --i) {
    int j = rng.uniform_int(0, i);
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(j)]);
  }
  out.support_x.resize(shots, X.cols());
  out.support_y.resize(shots, Y.cols());
  out.query_x.resize(n - shots, X.cols());
  out.query_y.resize(n - shots, Y.cols());
  for (int i = 0; i < shots; ++i) {
    out.support_x.row(i) = X.row(idx[static_cast<std::size_t>(i)]);
    out.support_y.row(i) = Y.row(idx[static_cast<std::size_t>(i)]);
  }
  for (int i = shots; i < n; ++i) {
    out.query_x.row(i - shots) = X.row(idx[static_cast<std::size_t>(i)]);
    out.query_y.row(i - shots) = Y.row(idx[static_cast<std::size_t>(i)]);
  }
}

}  // namespace

TaskDataset generate_task(const BenchmarkSpec& spec,
                          const Eigen::VectorXd& tau, std::uint64_t seed) {
  if (!spec.in_box(tau))
    throw std::invalid_argument("generate_task: identifier outside the box");
  Eigen::VectorXd t = tau;
  for (Eigen::Index i = 0; i < t.size(); ++i)
    t[i] = std::clamp(t[i], spec.box_low[i], spec.box_high[i]);

  Rng rng(seed);
  TaskDataset out;
  out.identifier = t;
  const int n = spec.points_per_task;
  Eigen::MatrixXd X(n, spec.input_dim), Y(n, spec.target_dim);

  if (spec.benchmark == Benchmark::kSinusoid) {
    for (int i = 0; i < n; ++i) {
      double x = rng.uniform(-5.0, 5.0);
      X(i, 0) = x;
      Y(i, 0) = sinusoid_target(t, x);
    }
  } else if (spec.benchmark == Benchmark::kPendulum) {
    PendulumState s{rng.uniform(-kPi, kPi), rng.uniform(-1.0, 1.0)};
    for (int i = 0; i < n; ++i) {
      double u = rng.uniform(-constants::kPendulumMaxTorque,
                             constants::kPendulumMaxTorque);
      Eigen::Vector3d obs = pendulum_observe(s);
      PendulumState next = pendulum_step(t, s, u);
      Eigen::Vector3d obs_next = pendulum_observe(next);
      X.row(i) << obs[0], obs[1], obs[2], u;
      Y.row(i) = obs_next.transpose();
      s = next;
    }
  } else {
    Eigen::Vector4d s;
    for (int i = 0; i < 4; ++i) s[i] = rng.uniform(-0.1, 0.1);
    for (int i = 0; i < n; ++i) {
      double torque = static_cast<double>(rng.uniform_int(-1, 1));
      Eigen::VectorXd obs = acrobot_observe(s);
      Eigen::Vector4d next = acrobot_step(t, s, torque);
      Eigen::VectorXd obs_next = acrobot_observe(next);
      X.row(i).head(6) = obs.transpose();
      X(i, 6) = torque;
      Y.row(i) = obs_next.transpose();
      s = next;
    }
  }

  split_support_query(X, Y, spec.shots, rng, out);
  return out;
}

TaskDataset inject_support_noise(const TaskDataset& task, double sigma,
                                 std::uint64_t seed) {
  if (sigma < 0)
    throw std::invalid_argument("inject_support_noise: sigma < 0");
  TaskDataset out = task;
  if (sigma == 0.0) return out;
  Rng rng(seed);
  for (Eigen::Index i = 0; i < out.support_y.rows(); ++i)
    for (Eigen::Index j = 0; j < out.support_y.cols(); ++j)
      out.support_y(i, j) += rng.normal(0.0, sigma);
  return out;
}

void dump_task_batch(const std::string& path,
                     const std::vector<TaskDataset>& batch) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("dump_task_batch: cannot write '" + path + "'");
  if (batch.empty()) return;
  const auto& first = batch.front();
  out << "task set";
  for (Eigen::Index j = 0; j < first.identifier.size(); ++j)
    out << " id" << j;
  for (Eigen::Index j = 0; j < first.support_x.cols(); ++j) out << " x" << j;
  for (Eigen::Index j = 0; j < first.support_y.cols(); ++j) out << " y" << j;
  out << '\n';
  auto emit = [&](std::size_t ti, int set, const Eigen::MatrixXd& X,
                  const Eigen::MatrixXd& Y) {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      out << ti << ' ' << set;
      for (Eigen::Index j = 0; j < batch[ti].identifier.size(); ++j)
        out << ' ' << io::format_double(batch[ti].identifier[j]);
      for (Eigen::Index j = 0; j < X.cols(); ++j)
        out << ' ' << io::format_double(X(i, j));
      for (Eigen::Index j = 0; j < Y.cols(); ++j)
        out << ' ' << io::format_double(Y(i, j));
      out << '\n';
    }
  };
  for (std::size_t ti = 0; ti < batch.size(); ++ti) {
    emit(ti, 0, batch[ti].support_x, batch[ti].support_y);
    emit(ti, 1, batch[ti].query_x, batch[ti].query_y);
  }
}

}  // namespace arml::task
