#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "arml/eval.hpp"
#include "arml/numeric.hpp"

using namespace arml;
using namespace arml::eval;
using Vec = Eigen::VectorXd;

namespace {
const double kPi = 3.14159265358979323846;

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}
}  // namespace

TEST_CASE("cvar anchors") {
  std::vector<double> losses = {1, 2, 3, 4};
  CHECK(cvar(losses, 0.0) == 2.5);          // plain mean
  CHECK(cvar(losses, 0.5) == 3.5);          // worst half
  CHECK(cvar(losses, 0.7) == 3.5);          // ceil(0.3*4) = 2 worst
  CHECK(cvar(losses, 0.9) == 4.0);          // single worst
  CHECK_THROWS(cvar(losses, 1.0));
  CHECK_THROWS(cvar(losses, -0.1));
  CHECK_THROWS(cvar({}, 0.5));
}

TEST_CASE("cvar dominates the mean and is monotone in alpha") {
  Rng r(3);
  for (int rep = 0; rep < 50; ++rep) {
    int n = r.uniform_int(1, 40);
    std::vector<double> losses(static_cast<std::size_t>(n));
    for (double& x : losses) x = r.normal(1.0, 2.0);
    double mean = stable_mean(losses);
    double prev = -1e300;
    for (double a : {0.0, 0.1, 0.3, 0.5, 0.7, 0.9}) {
      double c = cvar(losses, a);
      CHECK(c >= mean - 1e-12);
      CHECK(c >= prev - 1e-12);
      prev = c;
    }
  }
}

TEST_CASE("cvar is exactly permutation invariant") {
  Rng r(5);
  std::vector<double> losses(17);
  for (double& x : losses) x = r.normal();
  double base = cvar(losses, 0.4);
  for (int rep = 0; rep < 10; ++rep) {
    for (int i = 16; i > 0; --i)
      std::swap(losses[static_cast<std::size_t>(i)],
                losses[static_cast<std::size_t>(r.uniform_int(0, i))]);
    CHECK(cvar(losses, 0.4) == base);
  }
}

TEST_CASE("entropy anchors from the initial distributions") {
  flow::FlowStack u(
      flow::BaseDistribution::uniform_box(vec2(0.1, 0.0), vec2(5.0, kPi)), {});
  EntropyEstimate eu = entropy(u, 2000, 7);
  CHECK(eu.estimate == u.base.entropy());  // exact: log-dets are zero
  CHECK(eu.std_error == 0.0);
  CHECK(std::abs(eu.estimate - 2.734) < 5e-4);

  flow::FlowStack n(
      flow::BaseDistribution::diagonal_normal(vec2(2.5, 1.5), vec2(0.8, 0.5)),
      {});
  EntropyEstimate en = entropy(n, 2000, 8);
  CHECK(en.std_error == 0.0);
  CHECK(std::abs(en.estimate - 1.922) < 5e-4);

  CHECK_THROWS(entropy(u, 500, 9));  // contract: at least 1000 samples
}

TEST_CASE("pure scaling layer shifts entropy by 2 ln 2") {
  flow::MinMaxLayer mm;
  mm.scale = vec2(2.0, 2.0);
  mm.offset = vec2(0.0, 0.0);
  flow::FlowStack s(
      flow::BaseDistribution::uniform_box(vec2(0.0, 0.0), vec2(1.0, 1.0)),
      {flow::FlowLayer::make_minmax(mm)});
  s.frozen = flow::FrozenStats{vec2(0, 0), vec2(1, 1)};
  EntropyEstimate e = entropy(s, 1500, 10);
  CHECK(e.estimate ==
        doctest::Approx(0.0 + 2.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(e.std_error == 0.0);
}

TEST_CASE("density grid: identity stack is flat at -ln(4.9 pi)") {
  flow::FlowStack s(
      flow::BaseDistribution::uniform_box(vec2(0.1, 0.0), vec2(5.0, kPi)), {});
  DensityGrid g = density_grid(s, vec2(0.1, 0.0), vec2(5.0, kPi), 50);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 50; ++j)
      CHECK(g.log_density(i, j) ==
            doctest::Approx(-std::log(4.9 * kPi)).epsilon(1e-12));
  CHECK(g.mass() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("density grid mass stays near one for random stacks") {
  for (std::uint64_t seed : {101u, 102u, 103u}) {
    flow::FlowStack s = flow::make_default_stack(
        flow::BaseDistribution::uniform_box(vec2(0.1, 0.0), vec2(5.0, kPi)),
        vec2(0.1, 0.0), vec2(5.0, kPi), 2, seed);
    s.freeze_reference_stats(10000, mix_seed(seed, 1));
    DensityGrid g = density_grid(s, vec2(0.1, 0.0), vec2(5.0, kPi), 200);
    CHECK(g.mass() >= 0.98);
    CHECK(g.mass() <= 1.02);
  }
}

TEST_CASE("density grid inherits the box's reflection symmetry") {
  // normal base centered on the box: reflecting both identifiers about the
  // center leaves the density invariant
  Vec lo = vec2(-1.0, -2.0), hi = vec2(1.0, 2.0);
  flow::FlowStack s(
      flow::BaseDistribution::diagonal_normal(vec2(0.0, 0.0), vec2(0.5, 0.9)),
      {});
  DensityGrid g = density_grid(s, lo, hi, 64);
  double worst = 0.0;
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j)
      worst = std::max(worst, std::abs(g.log_density(i, j) -
                                       g.log_density(63 - i, 63 - j)));
  CHECK(worst <= 1e-8);
}

TEST_CASE("density grid writes the documented columnar format") {
  flow::FlowStack s(
      flow::BaseDistribution::uniform_box(vec2(0.1, 0.0), vec2(5.0, kPi)), {});
  DensityGrid g = density_grid(s, vec2(0.1, 0.0), vec2(5.0, kPi), 4);
  std::string path = "grid_test.txt";
  g.save(path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "x y log_density");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 16);
  in.close();
  std::filesystem::remove(path);
}

TEST_CASE("evaluate: single task makes mean equal to every cvar") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  meta::MetaConfig cfg;
  cfg.hidden = 8;
  cfg.hidden_layers = 2;
  meta::MetaLearner ml(spec, cfg);
  ParamVector theta = ml.init_params(3);
  EvalReport rep =
      evaluate(ml, theta, nullptr, spec, 1, {0.0, 0.3, 0.5, 0.9}, 11);
  for (auto& [a, c] : rep.cvars) CHECK(c == rep.mean_loss);
}

TEST_CASE("evaluate: deterministic given the seed, cvars non-decreasing") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  meta::MetaConfig cfg;
  cfg.hidden = 8;
  cfg.hidden_layers = 2;
  meta::MetaLearner ml(spec, cfg);
  ParamVector theta = ml.init_params(5);

  flow::FlowStack s = flow::make_default_stack(
      spec.initial_distribution(), spec.box_low, spec.box_high, 2, 6);
  s.freeze_reference_stats(10000, 7);

  EvalReport a = evaluate(ml, theta, &s, spec, 40, {0.3, 0.5, 0.7, 0.9}, 13);
  EvalReport b = evaluate(ml, theta, &s, spec, 40, {0.3, 0.5, 0.7, 0.9}, 13);
  CHECK(a.task_losses == b.task_losses);
  CHECK(a.mean_loss == b.mean_loss);
  CHECK(a.source == "adversarial");
  double prev = -1e300;
  for (auto& [alpha, c] : a.cvars) {
    CHECK(c >= a.mean_loss - 1e-12);
    CHECK(c >= prev - 1e-12);
    prev = c;
  }

  EvalReport init = evaluate(ml, theta, nullptr, spec, 40, {0.5}, 13);
  CHECK(init.source == "initial");
  CHECK(init.distribution_entropy.estimate ==
        spec.initial_distribution().entropy());

  io::KvDoc doc = a.to_kvdoc();
  CHECK(doc.get("format") == "arml.eval.v1");
  CHECK(doc.get_int("n_tasks") == 40);
  CHECK(doc.get_vector("task_losses").size() == 40);
}
