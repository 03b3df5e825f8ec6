#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "arml/flows.hpp"
#include "arml/rng.hpp"

namespace arml::task {

// Support/query example sets drawn from one task.
struct TaskDataset {
  Eigen::VectorXd identifier;
  Eigen::MatrixXd support_x, support_y;  // n_S x in / n_S x out
  Eigen::MatrixXd query_x, query_y;      // n_Q x in / n_Q x out
};

enum class Benchmark { kSinusoid, kPendulum, kAcrobot };
enum class InitKind { kUniform, kNormal };
enum class OutputHead { kIdentity, kPendulum, kAcrobot };

struct BenchmarkSpec {
  Benchmark benchmark = Benchmark::kSinusoid;
  std::string name;
  Eigen::VectorXd box_low, box_high;  // identifier box
  InitKind init_kind = InitKind::kUniform;
  Eigen::VectorXd init_mean, init_stddev;  // normal initial distribution
  int shots = 5;
  int points_per_task = 10;
  int input_dim = 1;
  int target_dim = 1;
  int raw_output_dim = 1;  // network outputs before the head mapping
  OutputHead head = OutputHead::kIdentity;

  flow::BaseDistribution initial_distribution() const;
  bool in_box(const Eigen::VectorXd& tau, double tol = 1e-9) const;
};

// name: sinusoid | pendulum | acrobot
BenchmarkSpec make_benchmark(const std::string& name, InitKind init);

// Deterministic task sampler: sinusoid points are exact function values;
// the dynamical systems roll one episode under a uniformly random policy.
TaskDataset generate_task(const BenchmarkSpec& spec,
                          const Eigen::VectorXd& tau, std::uint64_t seed);

// Gaussian noise on the support outputs only.
TaskDataset inject_support_noise(const TaskDataset& task, double sigma,
                                 std::uint64_t seed);

// Columnar text dump of a task batch, for cross-implementation diffing.
void dump_task_batch(const std::string& path,
                     const std::vector<TaskDataset>& batch);

// ---- raw dynamics, exposed for oracles ----

double sinusoid_target(const Eigen::VectorXd& tau, double x);

struct PendulumState {
  double theta, omega;
};
// tau = (mass, length); returns the next state under torque u
PendulumState pendulum_step(const Eigen::VectorXd& tau,
                            const PendulumState& s, double u);
Eigen::Vector3d pendulum_observe(const PendulumState& s);

// tau = (m1, m2); state = [theta1, omega1, theta2, omega2]
Eigen::Vector4d acrobot_step(const Eigen::VectorXd& tau,
                             const Eigen::Vector4d& s, double torque);
Eigen::VectorXd acrobot_observe(const Eigen::Vector4d& s);

namespace constants {
inline constexpr double kPendulumGravity = 10.0;
inline constexpr double kPendulumDt = 0.05;
inline constexpr double kPendulumMaxTorque = 2.0;
inline constexpr double kPendulumMaxSpeed = 8.0;
inline constexpr double kAcrobotGravity = 9.8;
inline constexpr double kAcrobotDt = 0.2;
inline constexpr double kAcrobotLink = 1.0;      // lengths l1 = l2
inline constexpr double kAcrobotCom = 0.5;       // centers of mass
inline constexpr double kAcrobotInertia = 1.0;   // I1 = I2
inline constexpr double kAcrobotMaxVel1 = 4.0 * 3.14159265358979323846;
inline constexpr double kAcrobotMaxVel2 = 9.0 * 3.14159265358979323846;
}  // namespace constants

}  // namespace arml::task
