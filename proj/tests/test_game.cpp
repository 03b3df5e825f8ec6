#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "arml/eval.hpp"
#include "arml/game.hpp"
#include "arml/numeric.hpp"
#include "arml/optim.hpp"

using namespace arml;
using namespace arml::game;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace {
const double kPi = 3.14159265358979323846;

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

meta::MetaLearner small_learner(const task::BenchmarkSpec& spec,
                                meta::Variant variant = meta::Variant::kMaml) {
  meta::MetaConfig cfg;
  cfg.variant = variant;
  cfg.hidden = 16;
  cfg.hidden_layers = variant == meta::Variant::kMaml ? 2 : 3;
  cfg.cnp_rep_dim = 8;
  return meta::MetaLearner(spec, cfg);
}
}  // namespace

TEST_CASE("risk principle weights: anchors") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  RiskPrincipleState state;
  Mat tasks = Mat::Zero(4, 2);
  std::vector<double> losses = {1, 2, 3, 4};

  auto erm = risk_principle_step(RiskPrinciple::kErm, losses, tasks, spec,
                                 state, 0.5, 0.01);
  for (double w : erm) CHECK(w == 0.25);

  auto tr = risk_principle_step(RiskPrinciple::kTr, losses, tasks, spec, state,
                                0.5, 0.01);
  CHECK(tr == std::vector<double>{0, 0, 0, 1});

  auto dr = risk_principle_step(RiskPrinciple::kDr, losses, tasks, spec, state,
                                0.5, 0.01);
  CHECK(dr == std::vector<double>{0, 0, 0.5, 0.5});

  // ties in TR go to the lowest task index
  std::vector<double> tied = {4, 4, 1, 4};
  auto tr_tied = risk_principle_step(RiskPrinciple::kTr, tied, tasks, spec,
                                     state, 0.5, 0.01);
  CHECK(tr_tied == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("risk principle weights match sorting/grouping oracles") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  Rng rng(3);
  RiskPrincipleState dro_state;
  Eigen::VectorXd oracle_q = Eigen::VectorXd::Constant(4, 0.25);

  for (int rep = 0; rep < 200; ++rep) {
    int k = 2 * rng.uniform_int(1, 12);  // even batch sizes
    std::vector<double> losses(static_cast<std::size_t>(k));
    for (double& x : losses) x = rng.uniform(0.0, 4.0);
    Mat tasks(k, 2);
    for (int i = 0; i < k; ++i)
      tasks.row(i) = vec2(rng.uniform(0.1, 5.0), rng.uniform(0.0, kPi))
                         .transpose();
    double alpha = rng.uniform(0.0, 0.95);

    RiskPrincipleState state = dro_state;  // keep DRO state in sync below
    for (auto principle : {RiskPrinciple::kErm, RiskPrinciple::kTr,
                           RiskPrinciple::kDr, RiskPrinciple::kDro}) {
      auto w = risk_principle_step(principle, losses, tasks, spec,
                                   principle == RiskPrinciple::kDro
                                       ? dro_state
                                       : state,
                                   alpha, 0.01);
      double sum = 0;
      for (double x : w) {
        CHECK(x >= 0.0);
        sum += x;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));

      if (principle == RiskPrinciple::kTr) {
        int best = static_cast<int>(std::distance(
            losses.begin(), std::max_element(losses.begin(), losses.end())));
        CHECK(w[static_cast<std::size_t>(best)] == 1.0);
      }
      if (principle == RiskPrinciple::kDr) {
        int m = static_cast<int>(std::ceil((1.0 - alpha) * k));
        std::vector<double> sorted = losses;
        std::sort(sorted.begin(), sorted.end(), std::greater<double>());
        double threshold = sorted[static_cast<std::size_t>(m - 1)];
        for (int i = 0; i < k; ++i) {
          if (losses[static_cast<std::size_t>(i)] > threshold)
            CHECK(w[static_cast<std::size_t>(i)] == 1.0 / m);
          if (losses[static_cast<std::size_t>(i)] < threshold)
            CHECK(w[static_cast<std::size_t>(i)] == 0.0);
        }
      }
      if (principle == RiskPrinciple::kDro) {
        // oracle: replicate the multiplicative update
        std::array<std::vector<double>, 4> gl;
        std::array<int, 4> counts{0, 0, 0, 0};
        for (int i = 0; i < k; ++i) {
          int g = dro_group_of(tasks.row(i).transpose(), spec);
          gl[static_cast<std::size_t>(g)].push_back(
              losses[static_cast<std::size_t>(i)]);
          ++counts[static_cast<std::size_t>(g)];
        }
        for (int g = 0; g < 4; ++g)
          if (counts[static_cast<std::size_t>(g)] > 0)
            oracle_q[g] *=
                std::exp(0.01 * stable_mean(gl[static_cast<std::size_t>(g)]));
        oracle_q /= oracle_q.sum();
        CHECK(dro_state.dro_group_weights == oracle_q);
        CHECK(dro_state.dro_group_weights.minCoeff() >= 0.0);
        CHECK(dro_state.dro_group_weights.sum() ==
              doctest::Approx(1.0).epsilon(1e-12));
        double mass = 0;
        for (int g = 0; g < 4; ++g)
          if (counts[static_cast<std::size_t>(g)] > 0)
            mass += oracle_q[g];
        for (int i = 0; i < k; ++i) {
          int g = dro_group_of(tasks.row(i).transpose(), spec);
          CHECK(w[static_cast<std::size_t>(i)] ==
                oracle_q[g] / (counts[static_cast<std::size_t>(g)] * mass));
        }
      }
    }
  }
}

TEST_CASE("frozen follower on an identity stack reproduces plain training") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  auto learner = small_learner(spec);
  ParamVector theta0 = learner.init_params(11);

  GameConfig cfg;
  cfg.principle = RiskPrinciple::kAr;
  cfg.gamma_follower = 0.0;  // follower never moves
  cfg.iterations = 25;
  cfg.batch_size = 4;
  cfg.seed = 42;

  flow::FlowStack identity(spec.initial_distribution(), {});
  TrainResult ar = train(cfg, learner, theta0, identity, spec);
  REQUIRE_FALSE(ar.aborted);
  CHECK(ar.stack.parameters().data.size() == 0);  // p_phi stayed p0

  GameConfig erm_cfg = cfg;
  erm_cfg.principle = RiskPrinciple::kErm;
  TrainResult erm = train(erm_cfg, learner, theta0, identity, spec);
  CHECK(ar.theta.data == erm.theta.data);

  // follower-free reference loop, written independently of train()
  ParamVector theta = theta0;
  optim::Adam adam(cfg.gamma_outer);
  flow::BaseDistribution init = spec.initial_distribution();
  for (long long t = 1; t <= cfg.iterations; ++t) {
    Rng rng(mix_seed(cfg.seed, stream::kTaskBatch,
                     static_cast<std::uint64_t>(t)));
    Mat tasks = init.draw_batch(cfg.batch_size, rng);
    std::vector<Eigen::VectorXd> grads;
    for (int i = 0; i < cfg.batch_size; ++i) {
      auto dataset = task::generate_task(
          spec, tasks.row(i).transpose(),
          mix_seed(cfg.seed, stream::kDataset, static_cast<std::uint64_t>(t),
                   static_cast<std::uint64_t>(i)));
      grads.push_back(learner.task_gradient(theta, dataset).grad.data);
    }
    Eigen::VectorXd g = mean_vectors(grads);
    adam.step(theta.data, g);
  }
  CHECK(ar.theta.data == theta.data);

  // per-iteration leader records also agree
  REQUIRE(ar.trace.records.size() == erm.trace.records.size());
  for (std::size_t i = 0; i < ar.trace.records.size(); ++i) {
    CHECK(ar.trace.records[i].mean_loss == erm.trace.records[i].mean_loss);
    CHECK(ar.trace.records[i].theta_update_norm ==
          erm.trace.records[i].theta_update_norm);
  }
}

TEST_CASE("update frequency: leader-only iterations match until follower acts") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  auto learner = small_learner(spec);
  ParamVector theta0 = learner.init_params(21);
  flow::FlowStack stack = flow::make_default_stack(
      spec.initial_distribution(), spec.box_low, spec.box_high, 2, 22);

  GameConfig u1;
  u1.iterations = 6;
  u1.batch_size = 4;
  u1.seed = 7;
  u1.update_frequency = 1;
  u1.gamma_follower = 0.05;
  GameConfig u5 = u1;
  u5.update_frequency = 5;

  TrainResult r1 = train(u1, learner, theta0, stack, spec);
  TrainResult r5 = train(u5, learner, theta0, stack, spec);
  REQUIRE_FALSE(r1.aborted);
  REQUIRE_FALSE(r5.aborted);

  // iteration 1: identical leader step, follower only in the u=1 run
  CHECK(r1.trace.records[0].mean_loss == r5.trace.records[0].mean_loss);
  CHECK(r1.trace.records[0].theta_update_norm ==
        r5.trace.records[0].theta_update_norm);
  CHECK(r1.trace.records[0].follower_stepped);
  CHECK(r1.trace.records[0].phi_update_norm > 0.0);
  CHECK_FALSE(r5.trace.records[0].follower_stepped);
  CHECK(r5.trace.records[0].phi_update_norm == 0.0);
  for (int t = 0; t < 4; ++t)
    CHECK_FALSE(r5.trace.records[static_cast<std::size_t>(t)].follower_stepped);
  CHECK(r5.trace.records[4].follower_stepped);
}

TEST_CASE("large lambda pins the generated distribution to the initial one") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  auto learner = small_learner(spec);
  ParamVector theta0 = learner.init_params(31);
  flow::FlowStack stack = flow::make_default_stack(
      spec.initial_distribution(), spec.box_low, spec.box_high, 2, 32);

  GameConfig cfg;
  cfg.principle = RiskPrinciple::kAr;
  cfg.lambda = 1000.0;
  cfg.gamma_follower = 2e-4;
  cfg.iterations = 300;
  cfg.batch_size = 16;
  cfg.seed = 33;

  TrainResult r = train(cfg, learner, theta0, stack, spec);
  REQUIRE_FALSE(r.aborted);
  eval::DensityGrid grid =
      eval::density_grid(r.stack, spec.box_low, spec.box_high, 100);
  double p0 = 1.0 / (4.9 * kPi);
  double tv = 0.0;
  for (int i = 0; i < 100; ++i)
    for (int j = 0; j < 100; ++j) {
      double p = grid.valid(i, j) && std::isfinite(grid.log_density(i, j))
                     ? std::exp(grid.log_density(i, j))
                     : 0.0;
      tv += 0.5 * std::abs(p - p0) * grid.cell_area;
    }
  CHECK(tv <= 0.05);
}

TEST_CASE("stationarity flag fires when both updates stall") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  auto learner = small_learner(spec);
  ParamVector theta0 = learner.init_params(41);
  flow::FlowStack identity(spec.initial_distribution(), {});

  GameConfig cfg;
  cfg.gamma_outer = 1e-300;  // leader step collapses below the threshold
  cfg.gamma_follower = 0.0;
  cfg.iterations = 2;
  cfg.batch_size = 2;
  cfg.seed = 5;
  TrainResult r = train(cfg, learner, theta0, identity, spec);
  REQUIRE_FALSE(r.aborted);
  CHECK(r.trace.records[0].stationary);
}

TEST_CASE("non-finite parameters abort with the trace flushed") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  auto learner = small_learner(spec);
  ParamVector bad = learner.init_params(51);
  bad.data[0] = std::nan("");
  flow::FlowStack identity(spec.initial_distribution(), {});

  GameConfig cfg;
  cfg.iterations = 10;
  cfg.batch_size = 2;
  std::string path = "abort_trace_test.txt";
  TrainResult r = train(cfg, learner, bad, identity, spec, path);
  CHECK(r.aborted);
  CHECK(r.abort_reason.find("non-finite") != std::string::npos);
  CHECK(std::filesystem::exists(path));
  std::ifstream in(path);
  std::string line;
  CHECK(std::getline(in, line));
  CHECK(line.find("iter=1") != std::string::npos);
  in.close();
  std::filesystem::remove(path);
}

TEST_CASE("trace lines carry the documented fields") {
  TraceRecord rec;
  rec.iteration = 7;
  rec.mean_loss = 0.5;
  rec.baseline = 0.25;
  rec.follower_stepped = true;
  std::string line = trace_line(rec);
  CHECK(line.find("iter=7") != std::string::npos);
  CHECK(line.find("loss=0.5") != std::string::npos);
  CHECK(line.find("baseline=0.25") != std::string::npos);
  CHECK(line.find("follower=1") != std::string::npos);
  CHECK(line.find("wall") == std::string::npos);  // timing is kept out
}

TEST_CASE("training is reproducible and thread count does not change results") {
  auto spec = task::make_benchmark("sinusoid", task::InitKind::kUniform);
  auto learner = small_learner(spec);
  ParamVector theta0 = learner.init_params(61);
  flow::FlowStack stack = flow::make_default_stack(
      spec.initial_distribution(), spec.box_low, spec.box_high, 2, 62);

  GameConfig cfg;
  cfg.iterations = 8;
  cfg.batch_size = 4;
  cfg.seed = 63;
  cfg.gamma_follower = 0.01;

  TrainResult a = train(cfg, learner, theta0, stack, spec);
  TrainResult b = train(cfg, learner, theta0, stack, spec);
  CHECK(a.theta.data == b.theta.data);
  CHECK(a.stack.parameters().data == b.stack.parameters().data);

  GameConfig threaded = cfg;
  threaded.threads = 3;
  TrainResult c = train(threaded, learner, theta0, stack, spec);
  CHECK(a.theta.data == c.theta.data);
  CHECK(a.stack.parameters().data == c.stack.parameters().data);
}
