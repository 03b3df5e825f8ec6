#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "arml/tasks.hpp"

using namespace arml;
using namespace arml::task;

namespace {
const double kPi = 3.14159265358979323846;

Eigen::VectorXd vec2(double a, double b) {
  Eigen::VectorXd v(2);
  v << a, b;
  return v;
}

// Independent mechanical-energy oracle for the two-link system.
double acrobot_energy(double m1, double m2, const Eigen::Vector4d& s) {
  using namespace constants;
  const double l1 = kAcrobotLink, lc1 = kAcrobotCom, lc2 = kAcrobotCom;
  const double i1 = kAcrobotInertia, i2 = kAcrobotInertia;
  const double g = kAcrobotGravity;
  const double th1 = s[0], om1 = s[1], th2 = s[2], om2 = s[3];
  double d1 = m1 * lc1 * lc1 +
              m2 * (l1 * l1 + lc2 * lc2 + 2 * l1 * lc2 * std::cos(th2)) + i1 +
              i2;
  double d2 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(th2)) + i2;
  double ke = 0.5 * d1 * om1 * om1 + d2 * om1 * om2 +
              0.5 * (m2 * lc2 * lc2 + i2) * om2 * om2;
  double pe = -g * ((m1 * lc1 + m2 * l1) * std::cos(th1) +
                    m2 * lc2 * std::cos(th1 + th2));
  return ke + pe;
}
}  // namespace

TEST_CASE("benchmark specs carry the documented boxes and shapes") {
  auto sin = make_benchmark("sinusoid", InitKind::kUniform);
  CHECK(sin.box_low == vec2(0.1, 0.0));
  CHECK(sin.box_high[0] == 5.0);
  CHECK(sin.box_high[1] == doctest::Approx(kPi));
  CHECK(sin.shots == 5);
  CHECK(sin.points_per_task == 10);

  auto pen = make_benchmark("pendulum", InitKind::kNormal);
  CHECK(pen.box_low == vec2(0.4, 0.4));
  CHECK(pen.shots == 10);
  CHECK(pen.points_per_task == 200);
  CHECK(pen.input_dim == 4);
  CHECK(pen.target_dim == 3);

  auto acr = make_benchmark("acrobot", InitKind::kUniform);
  CHECK(acr.input_dim == 7);
  CHECK(acr.target_dim == 6);

  CHECK_THROWS(make_benchmark("point-robot", InitKind::kUniform));
}

TEST_CASE("sinusoid: exact target values and amplitude bound") {
  CHECK(sinusoid_target(vec2(1.0, 0.0), kPi / 2) ==
        doctest::Approx(1.0).epsilon(1e-15));

  auto spec = make_benchmark("sinusoid", InitKind::kUniform);
  Eigen::VectorXd tau = vec2(3.7, 1.2);
  TaskDataset d = generate_task(spec, tau, 42);
  CHECK(d.support_x.rows() == 5);
  CHECK(d.query_x.rows() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(d.support_y(i, 0) == sinusoid_target(tau, d.support_x(i, 0)));
    CHECK(d.query_y(i, 0) == sinusoid_target(tau, d.query_x(i, 0)));
    CHECK(std::abs(d.support_y(i, 0)) <= tau[0]);
    CHECK(std::abs(d.query_y(i, 0)) <= tau[0]);
    CHECK(d.support_x(i, 0) >= -5.0);
    CHECK(d.support_x(i, 0) <= 5.0);
  }
}

TEST_CASE("generate_task rejects identifiers outside the box") {
  auto spec = make_benchmark("sinusoid", InitKind::kUniform);
  CHECK_THROWS(generate_task(spec, vec2(5.5, 1.0), 1));
  CHECK_THROWS(generate_task(spec, vec2(1.0, -0.5), 1));
  CHECK_NOTHROW(generate_task(spec, vec2(5.0, kPi), 1));  // boundary is legal
}

TEST_CASE("task generation is bit-reproducible") {
  for (const char* name : {"sinusoid", "pendulum", "acrobot"}) {
    auto spec = make_benchmark(name, InitKind::kUniform);
    Eigen::VectorXd tau = vec2(1.1, 0.9);
    TaskDataset a = generate_task(spec, tau, 777);
    TaskDataset b = generate_task(spec, tau, 777);
    CHECK(a.support_x == b.support_x);
    CHECK(a.support_y == b.support_y);
    CHECK(a.query_x == b.query_x);
    CHECK(a.query_y == b.query_y);
    TaskDataset c = generate_task(spec, tau, 778);
    CHECK(a.support_x != c.support_x);
  }
}

TEST_CASE("pendulum: stable equilibrium is a fixed point") {
  Eigen::VectorXd tau = vec2(1.0, 1.0);
  PendulumState rest{kPi, 0.0};
  PendulumState next = pendulum_step(tau, rest, 0.0);
  CHECK(std::abs(next.theta - kPi) <= 1e-9);
  CHECK(std::abs(next.omega) <= 1e-9);

  // hanging down with zero torque: angular acceleration is gravity-only
  PendulumState up{0.5, 0.0};
  PendulumState n2 = pendulum_step(tau, up, 0.0);
  double expect_omega =
      3.0 * constants::kPendulumGravity / 2.0 * std::sin(0.5) *
      constants::kPendulumDt;
  CHECK(n2.omega == doctest::Approx(expect_omega).epsilon(1e-12));
}

TEST_CASE("pendulum: observations normalized, velocity clipped") {
  auto spec = make_benchmark("pendulum", InitKind::kUniform);
  Eigen::VectorXd tau = vec2(0.5, 0.6);
  TaskDataset d = generate_task(spec, tau, 9);
  CHECK(d.support_x.rows() == 10);
  CHECK(d.query_x.rows() == 190);
  auto check_rows = [&](const Eigen::MatrixXd& X, int c0, int s0) {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      double c = X(i, c0), s = X(i, s0);
      CHECK(std::abs(c * c + s * s - 1.0) <= 1e-12);
    }
  };
  check_rows(d.support_x, 0, 1);
  check_rows(d.query_x, 0, 1);
  for (Eigen::Index i = 0; i < d.query_y.rows(); ++i) {
    CHECK(std::abs(d.query_y(i, 2)) <= constants::kPendulumMaxSpeed);
    CHECK(std::abs(d.query_x(i, 3)) <= constants::kPendulumMaxTorque);
  }
}

TEST_CASE("acrobot: energy drift under zero torque below 1%") {
  Eigen::VectorXd tau = vec2(1.0, 1.0);
  Eigen::Vector4d s(0.4, 0.0, -0.3, 0.0);  // moderate swing, no clipping
  double e0 = acrobot_energy(1.0, 1.0, s);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    s = acrobot_step(tau, s, 0.0);
    worst = std::max(worst, std::abs(acrobot_energy(1.0, 1.0, s) - e0));
  }
  CHECK(worst / std::abs(e0) < 0.01);
}

TEST_CASE("acrobot: observations and dataset shapes") {
  auto spec = make_benchmark("acrobot", InitKind::kUniform);
  Eigen::VectorXd tau = vec2(1.3, 0.7);
  TaskDataset d = generate_task(spec, tau, 4);
  CHECK(d.support_x.rows() == 10);
  CHECK(d.query_x.rows() == 190);
  for (Eigen::Index i = 0; i < d.query_x.rows(); ++i) {
    CHECK(std::abs(d.query_x(i, 0) * d.query_x(i, 0) +
                   d.query_x(i, 1) * d.query_x(i, 1) - 1.0) <= 1e-12);
    double torque = d.query_x(i, 6);
    CHECK((torque == -1.0 || torque == 0.0 || torque == 1.0));
  }
}

TEST_CASE("support noise: zero sigma is the identity") {
  auto spec = make_benchmark("sinusoid", InitKind::kUniform);
  TaskDataset d = generate_task(spec, vec2(2.0, 1.0), 5);
  TaskDataset n = inject_support_noise(d, 0.0, 123);
  CHECK(n.support_y == d.support_y);
  CHECK(n.query_y == d.query_y);
  CHECK_THROWS(inject_support_noise(d, -0.1, 1));
}

TEST_CASE("support noise: empirical sigma near 0.1, query untouched") {
  auto spec = make_benchmark("sinusoid", InitKind::kUniform);
  TaskDataset d = generate_task(spec, vec2(2.0, 1.0), 5);
  double sum2 = 0.0;
  int count = 0;
  for (int rep = 0; rep < 2000; ++rep) {
    TaskDataset n = inject_support_noise(d, 0.1, 1000 + rep);
    CHECK(n.query_y == d.query_y);
    Eigen::MatrixXd delta = n.support_y - d.support_y;
    sum2 += delta.array().square().sum();
    count += static_cast<int>(delta.size());
  }
  double sd = std::sqrt(sum2 / count);
  CHECK(sd >= 0.097);
  CHECK(sd <= 0.103);
}

TEST_CASE("task batch dump is valid columnar text") {
  auto spec = make_benchmark("sinusoid", InitKind::kUniform);
  std::vector<TaskDataset> batch;
  batch.push_back(generate_task(spec, vec2(1.0, 0.5), 1));
  batch.push_back(generate_task(spec, vec2(2.0, 1.5), 2));
  std::string path = "task_dump_test.txt";
  dump_task_batch(path, batch);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "task set id0 id1 x0 y0");
  int lines = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 2 * 10);
  in.close();
  std::filesystem::remove(path);
}
