#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "arml/flows.hpp"

using namespace arml;
using namespace arml::flow;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace {

const double kPi = 3.14159265358979323846;

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

BaseDistribution sinusoid_uniform() {
  return BaseDistribution::uniform_box(vec2(0.1, 0.0), vec2(5.0, kPi));
}

FlowStack random_stack(std::uint64_t seed, int n_planar = 2) {
  FlowStack s = make_default_stack(sinusoid_uniform(), vec2(0.1, 0.0),
                                   vec2(5.0, kPi), n_planar, seed);
  s.freeze_reference_stats(10000, mix_seed(seed, stream::kFrozenStats));
  return s;
}

// Numerical Jacobian determinant of the full forward map (frozen stats).
double numeric_jacobian_logdet(const FlowStack& s, const Vec& x, double h) {
  const int d = s.dim();
  Mat J(d, d);
  for (int j = 0; j < d; ++j) {
    Vec xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    Mat pts(2, d);
    pts.row(0) = xp.transpose();
    pts.row(1) = xm.transpose();
    auto res = s.forward(pts, s.frozen_or_null());
    J.col(j) = (res.tasks.row(0) - res.tasks.row(1)).transpose() / (2 * h);
  }
  return std::log(std::abs(J.determinant()));
}

}  // namespace

TEST_CASE("base distribution anchors") {
  BaseDistribution u = sinusoid_uniform();
  CHECK(u.entropy() == doctest::Approx(std::log(4.9 * kPi)).epsilon(1e-14));
  CHECK(u.log_prob(vec2(1.0, 1.0)) ==
        doctest::Approx(-std::log(4.9 * kPi)).epsilon(1e-14));
  CHECK(u.log_prob(vec2(6.0, 1.0)) == -std::numeric_limits<double>::infinity());

  BaseDistribution n =
      BaseDistribution::diagonal_normal(vec2(2.5, 1.5), vec2(0.8, 0.5));
  CHECK(n.log_prob(vec2(2.5, 1.5)) ==
        doctest::Approx(-std::log(2 * kPi * 0.8 * 0.5)).epsilon(1e-12));
  CHECK(n.entropy() ==
        doctest::Approx(1.0 + std::log(2 * kPi) + std::log(0.8) +
                        std::log(0.5))
            .epsilon(1e-14));

  CHECK_THROWS(BaseDistribution::uniform_box(vec2(1, 0), vec2(0, 1)));
  CHECK_THROWS(BaseDistribution::diagonal_normal(vec2(0, 0), vec2(1, 0)));
}

TEST_CASE("identity stack is the identity with zero log-det") {
  FlowStack s(sinusoid_uniform(), {});
  Rng r(3);
  Mat pts = s.base.draw_batch(20, r);
  auto fwd = s.forward(pts);
  CHECK(fwd.tasks == pts);
  CHECK(fwd.log_det == Vec::Zero(20));
  auto inv = s.inverse(fwd.tasks);
  CHECK(inv.base_points == pts);
  CHECK(inv.log_det_inverse == Vec::Zero(20));
}

TEST_CASE("minmax layer log-det anchor: a=(2,2), unit batch span") {
  // batch mins (0,0), maxes (1,1) -> per-sample log-det = 2 ln 2
  MinMaxLayer mm;
  mm.scale = vec2(2.0, 2.0);
  mm.offset = vec2(0.0, 0.0);
  FlowStack s(BaseDistribution::uniform_box(vec2(0.0, 0.0), vec2(1.0, 1.0)),
              {FlowLayer::make_minmax(mm)});
  Mat pts(2, 2);
  pts << 0.0, 0.0, 1.0, 1.0;
  auto fwd = s.forward(pts);
  CHECK(fwd.log_det[0] == doctest::Approx(2 * std::log(2.0)).epsilon(1e-15));
  CHECK(fwd.log_det[1] == doctest::Approx(2 * std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("minmax layer requires batches of at least two samples") {
  FlowStack s = random_stack(5);
  Mat one(1, 2);
  one << 1.0, 1.0;
  CHECK_THROWS(s.forward(one));              // batch statistics undefined
  CHECK_NOTHROW(s.forward(one, s.frozen_or_null()));
}

TEST_CASE("planar log-det matches a numerically differentiated Jacobian") {
  FlowStack s = random_stack(7, 1);
  Rng r(8);
  Mat pts = s.base.draw_batch(50, r);
  auto fwd = s.forward(pts, s.frozen_or_null());
  for (int i = 0; i < 50; ++i) {
    double num = numeric_jacobian_logdet(s, pts.row(i).transpose(), 1e-6);
    CHECK(std::abs(fwd.log_det[i] - num) <=
          1e-5 * std::max(1.0, std::abs(num)));
  }
}

TEST_CASE("round-trip inverse(forward(x)) = x on a random 2-layer stack") {
  FlowStack s = random_stack(11);
  Rng r(12);
  Mat pts = s.base.draw_batch(100, r);
  auto fwd = s.forward(pts, s.frozen_or_null());
  auto inv = s.inverse(fwd.tasks, s.frozen_or_null());
  CHECK((inv.base_points - pts).cwiseAbs().maxCoeff() <= 1e-8);
  CHECK((inv.log_det_inverse + fwd.log_det).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("affine-only stack inverse is the closed-form affine inverse") {
  MinMaxLayer mm;
  mm.scale = vec2(3.0, 0.5);
  mm.offset = vec2(-1.0, 2.0);
  FlowStack s(BaseDistribution::uniform_box(vec2(0, 0), vec2(1, 1)),
              {FlowLayer::make_minmax(mm)});
  FrozenStats st{vec2(0.0, 0.0), vec2(1.0, 1.0)};
  s.frozen = st;
  Mat pts(3, 2);
  pts << 0.1, 0.9, 0.5, 0.5, 0.77, 0.13;
  auto fwd = s.forward(pts, &st);
  // y = scale*x + offset with unit stats; invert by hand
  for (int i = 0; i < 3; ++i) {
    CHECK(fwd.tasks(i, 0) == doctest::Approx(3.0 * pts(i, 0) - 1.0));
    CHECK(fwd.tasks(i, 1) == doctest::Approx(0.5 * pts(i, 1) + 2.0));
  }
  auto inv = s.inverse(fwd.tasks, &st);
  CHECK((inv.base_points - pts).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("inverse error names the non-invertible layer") {
  // A degenerate w together with a large negative v defeats the
  // reparameterization floor, so the scalar solve has no positive slope.
  PlanarLayer p;
  p.w = vec2(1e-12, 0.0);
  p.v = vec2(-4e12, 0.0);
  FlowStack s(sinusoid_uniform(), {FlowLayer::make_planar(p)});
  Mat pts(1, 2);
  pts << 1.0, 1.0;
  try {
    s.inverse(pts);
    FAIL("expected throw");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
  }

  // a well-formed layer always inverts
  PlanarLayer ok;
  ok.w = vec2(0.7, -0.3);
  ok.v = vec2(1.4, 0.8);
  FlowStack good(sinusoid_uniform(), {FlowLayer::make_planar(ok)});
  CHECK_NOTHROW(good.inverse(pts));
}

TEST_CASE("log_prob anchors on identity stacks") {
  FlowStack u(sinusoid_uniform(), {});
  CHECK(u.log_prob_one(vec2(1.0, 1.0)) ==
        doctest::Approx(-std::log(4.9 * kPi)).epsilon(1e-14));
  CHECK(u.log_prob_one(vec2(5.5, 1.0)) ==
        -std::numeric_limits<double>::infinity());

  FlowStack n(BaseDistribution::diagonal_normal(vec2(2.5, 1.5), vec2(0.8, 0.5)),
              {});
  CHECK(n.log_prob_one(vec2(2.5, 1.5)) ==
        doctest::Approx(-std::log(2 * kPi * 0.8 * 0.5)).epsilon(1e-12));
}

TEST_CASE("change-of-variables consistency between the two routes") {
  FlowStack s = random_stack(13);
  Rng r(14);
  Mat tasks = s.sample(64, 77, s.frozen_or_null()).tasks;
  auto inv = s.inverse(tasks, s.frozen_or_null());
  Vec lp_inverse = s.log_prob(tasks, s.frozen_or_null());
  auto fwd = s.forward(inv.base_points, s.frozen_or_null());
  for (int i = 0; i < tasks.rows(); ++i) {
    double base_lp = s.base.log_prob(inv.base_points.row(i).transpose());
    double lp_forward = base_lp - fwd.log_det[i];
    CHECK(std::abs(lp_inverse[i] - lp_forward) <= 1e-8);
  }
}

TEST_CASE("density normalizes to one on the identifier box") {
  // numerically integrate exp(log_prob) on a 400x400 grid
  FlowStack s = random_stack(15);
  const int R = 400;
  const double ax = 0.1, bx = 5.0, ay = 0.0, by = kPi;
  const double dx = (bx - ax) / R, dy = (by - ay) / R;
  Mat cells(R * R, 2);
  int k = 0;
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < R; ++j)
      cells.row(k++) = vec2(ax + (i + 0.5) * dx, ay + (j + 0.5) * dy)
                           .transpose();
  Vec lp = s.log_prob(cells, s.frozen_or_null());
  double mass = 0;
  for (int i = 0; i < lp.size(); ++i)
    if (std::isfinite(lp[i])) mass += std::exp(lp[i]) * dx * dy;
  CHECK(mass >= 0.98);
  CHECK(mass <= 1.02);
}

TEST_CASE("sampling: seeded determinism and base-mean convergence") {
  FlowStack s(sinusoid_uniform(), {});
  auto a = s.sample(10000, 321);
  auto b = s.sample(10000, 321);
  CHECK(a.tasks == b.tasks);

  // empirical per-dimension means within 3 standard errors of box centers
  Vec mean = a.tasks.colwise().mean();
  double se0 = (5.0 - 0.1) / std::sqrt(12.0) / std::sqrt(10000.0);
  double se1 = kPi / std::sqrt(12.0) / std::sqrt(10000.0);
  CHECK(std::abs(mean[0] - (0.1 + 5.0) / 2) <= 3 * se0);
  CHECK(std::abs(mean[1] - kPi / 2) <= 3 * se1);
}

TEST_CASE("sample log-dets are the negated inverse log-dets") {
  FlowStack s = random_stack(17);
  auto smp = s.sample(128, 55, s.frozen_or_null());
  auto inv = s.inverse(smp.tasks, s.frozen_or_null());
  CHECK((smp.log_det + inv.log_det_inverse).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("bi-Lipschitz witnesses are finite on random stacks") {
  FlowStack s = random_stack(19);
  Rng r(20);
  Mat pts = s.base.draw_batch(1000, r);
  auto traj = s.forward_trajectory(pts, s.frozen_or_null());
  double la = 0, lb = 0;
  for (std::size_t l = 0; l + 1 < traj.size(); ++l) {
    for (int i = 0; i + 1 < pts.rows(); i += 2) {
      double din = (traj[l].row(i) - traj[l].row(i + 1)).norm();
      double dout = (traj[l + 1].row(i) - traj[l + 1].row(i + 1)).norm();
      if (din > 0 && dout > 0) {
        lb = std::max(lb, dout / din);   // forward expansion
        la = std::max(la, din / dout);   // inverse expansion
      }
    }
  }
  CHECK(std::isfinite(la));
  CHECK(std::isfinite(lb));
  CHECK(la > 0);
  CHECK(lb > 0);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  FlowStack s = random_stack(23);
  std::string path = "flow_ckpt_test.txt";
  s.save(path);
  FlowStack t = FlowStack::load(path);
  CHECK(t.parameters().data == s.parameters().data);
  REQUIRE(t.frozen.has_value());
  CHECK(t.frozen->min == s.frozen->min);
  CHECK(t.frozen->max == s.frozen->max);
  CHECK(t.base.low == s.base.low);
  // serialized text is itself stable
  CHECK(t.to_kvdoc().serialize() == s.to_kvdoc().serialize());
  std::filesystem::remove(path);
}

TEST_CASE("parameters/set_parameters round-trip and trainable mask") {
  FlowStack s = random_stack(29);
  ParamVector pv = s.parameters();
  CHECK(pv.size() == s.parameter_count());
  FlowStack t = s;
  ParamVector modified = pv;
  modified.data[0] += 0.25;
  t.set_parameters(modified);
  CHECK(t.parameters().data == modified.data);

  Vec mask = s.trainable_mask();
  // two planar layers trainable (2d+1 each), minmax frozen (2d)
  CHECK(mask.sum() == 2 * (2 * 2 + 1));
  CHECK(mask.tail(4).sum() == 0.0);
}

TEST_CASE("graph log_prob agrees with the numeric route") {
  FlowStack s = random_stack(31);
  Mat tasks = s.sample(16, 99, s.frozen_or_null()).tasks;
  Vec numeric = s.log_prob(tasks, s.frozen_or_null());

  ad::Graph g;
  FlowGraph fg = make_flow_graph(g, s);
  GraphStats st = graph_stats_const(g, *s.frozen);
  ad::Value lp = graph_log_prob(fg, s, &st, tasks);
  Mat got = g.evaluate(lp);
  for (int i = 0; i < 16; ++i)
    CHECK(got(i, 0) == doctest::Approx(numeric[i]).epsilon(1e-12));
}

TEST_CASE("graph batch statistics match the numeric trajectory") {
  FlowStack s = random_stack(37);
  Rng r(38);
  Mat batch = s.base.draw_batch(32, r);
  auto traj = s.forward_trajectory(batch);  // batch statistics mode
  Mat pre_minmax = traj[traj.size() - 2];

  ad::Graph g;
  FlowGraph fg = make_flow_graph(g, s);
  GraphStats st = graph_stats_from_batch(fg, s, batch);
  CHECK((g.evaluate(st.min) -
         Mat(pre_minmax.colwise().minCoeff()))
            .cwiseAbs()
            .maxCoeff() <= 1e-12);
  CHECK((g.evaluate(st.max) -
         Mat(pre_minmax.colwise().maxCoeff()))
            .cwiseAbs()
            .maxCoeff() <= 1e-12);
}
