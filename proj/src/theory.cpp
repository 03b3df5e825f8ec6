#include "arml/theory.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <stdexcept>

namespace arml::theory {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

void QuadraticGame::validate() const {
  if (A.rows() != A.cols() || C.rows() != C.cols() || B.rows() != A.rows() ||
      B.cols() != C.cols())
    throw std::invalid_argument("QuadraticGame: inconsistent block shapes");
  if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-10 ||
      (C - C.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    throw std::invalid_argument("QuadraticGame: A and C must be symmetric");
}

namespace {

// Power iteration with a Rayleigh-quotient estimate and residual stopping on
// a symmetric positive semidefinite matrix; returns its largest eigenvalue.
double psd_max_eigenvalue(const Mat& s, double tol) {
  Vec v = Vec::Ones(s.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += 1e-3 * (i + 1);
  v.normalize();
  double lambda = 0.0;
  double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
  double stop = std::max(tol, 1e-14) * scale;
  for (int it = 0; it < 200000; ++it) {
    Vec w = s * v;
    lambda = v.dot(w);
    double residual = (w - lambda * v).norm();
    if (residual <= stop) break;
    double n = w.norm();
    if (n == 0.0) return 0.0;
    v = w / n;
  }
  return lambda;
}

}  // namespace

double spectral_norm(const Mat& m, double tol) {
  if (m.size() == 0 || m.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  double lambda = psd_max_eigenvalue(m.transpose() * m, tol * tol);
  return std::sqrt(std::max(0.0, lambda));
}

double symmetric_min_eigenvalue(const Mat& m, double tol) {
  // largest eigenvalue of (c I - m) shifted back, c = ||m||
  double c = spectral_norm(m, tol);
  if (c == 0.0) return 0.0;
  Mat shifted = (c * Mat::Identity(m.rows(), m.cols()) - m);
  // shifted is symmetric PSD by construction
  return c - psd_max_eigenvalue(shifted, tol);
}

DeltaReport delta(const QuadraticGame& game, double gamma1, double gamma2) {
  game.validate();
  DeltaReport rep;
  rep.sigma_min_a = symmetric_min_eigenvalue(game.A);
  rep.l_max = std::max({spectral_norm(game.A), spectral_norm(game.B),
                        spectral_norm(game.C)});
  Mat q = Mat::Identity(game.d2(), game.d2()) + gamma2 * game.C;
  rep.q_norm = spectral_norm(q);

  Mat btbc = game.B.transpose() * game.B * game.C;
  if (btbc.cwiseAbs().maxCoeff() == 0.0) {
    rep.sigma_min_btbc = 0.0;
  } else {
    Eigen::EigenSolver<Mat> es(btbc);
    double min_real = std::numeric_limits<double>::infinity();
    double max_imag = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
      min_real = std::min(min_real, es.eigenvalues()[i].real());
      max_imag = std::max(max_imag, std::abs(es.eigenvalues()[i].imag()));
    }
    rep.sigma_min_btbc = min_real;
    rep.complex_spectrum =
        max_imag > 1e-8 * std::max(1.0, btbc.cwiseAbs().maxCoeff());
  }

  rep.branch_theta = (1.0 - gamma1 * rep.sigma_min_a) *
                     (1.0 - gamma1 * rep.sigma_min_a) *
                     (1.0 + gamma2 * gamma2 * rep.l_max * rep.l_max);
  double inner = std::abs(gamma1 * gamma1 - 2.0 * gamma1 * gamma2 +
                          gamma1 * gamma1 * gamma2 * gamma2 * rep.l_max *
                              rep.l_max) *
                     rep.l_max * rep.l_max +
                 rep.q_norm * rep.q_norm -
                 2.0 * gamma1 * gamma2 * gamma2 * rep.sigma_min_btbc;
  rep.branch_phi = std::abs(inner);
  rep.delta = std::max(rep.branch_theta, rep.branch_phi);
  return rep;
}

ContractionReport run_alt_gda(const QuadraticGame& game, double gamma1,
                              double gamma2, const Vec& z0, int steps) {
  game.validate();
  if (steps < 1) throw std::invalid_argument("run_alt_gda: steps < 1");
  if (z0.size() != game.d1() + game.d2())
    throw std::invalid_argument("run_alt_gda: z0 dimension mismatch");

  DeltaReport dr = delta(game, gamma1, gamma2);
  ContractionReport rep;
  rep.delta_value = dr.delta;
  rep.sqrt_delta = std::sqrt(dr.delta);
  rep.delta_below_half = dr.delta < 0.5;
  rep.complex_spectrum = dr.complex_spectrum;

  Vec theta = z0.head(game.d1());
  Vec phi = z0.tail(game.d2());
  double z0_norm = z0.norm();
  if (z0_norm == 0.0) {
    rep.converged = true;
    rep.worst_ratio = 0.0;
    rep.geometric_mean_ratio = 0.0;
    return rep;
  }

  double prev_norm = z0_norm;
  double log_ratio_sum = 0.0;
  int ratio_count = 0;
  for (int t = 0; t < steps; ++t) {
    Vec theta_next = theta - gamma1 * (game.A * theta + game.B * phi);
    Vec phi_next =
        phi + gamma2 * (game.B.transpose() * theta_next + game.C * phi);
    theta = theta_next;
    phi = phi_next;
    double cur = std::sqrt(theta.squaredNorm() + phi.squaredNorm());
    if (prev_norm > 0.0) {
      double ratio = cur / prev_norm;
      rep.step_ratios.push_back(ratio);
      rep.worst_ratio = std::max(rep.worst_ratio, ratio);
      if (ratio > 0.0) {
        log_ratio_sum += std::log(ratio);
        ++ratio_count;
      }
    }
    prev_norm = cur;
    if (cur == 0.0) break;
  }
  rep.geometric_mean_ratio =
      ratio_count > 0 ? std::exp(log_ratio_sum / ratio_count) : 0.0;
  rep.converged = prev_norm <= 1e-8 * z0_norm || prev_norm == 0.0 ||
                  (rep.geometric_mean_ratio < 1.0 && prev_norm < z0_norm);
  rep.theory_violation = rep.delta_below_half && rep.worst_ratio > 10.0;
  return rep;
}

io::KvDoc ContractionReport::to_kvdoc() const {
  io::KvDoc doc;
  doc.set("format", "arml.contraction.v1");
  doc.set_double("delta", delta_value);
  doc.set_double("sqrt_delta", sqrt_delta);
  doc.set_int("delta_below_half", delta_below_half ? 1 : 0);
  doc.set_double("worst_ratio", worst_ratio);
  doc.set_double("geometric_mean_ratio", geometric_mean_ratio);
  doc.set_int("converged", converged ? 1 : 0);
  doc.set_int("theory_violation", theory_violation ? 1 : 0);
  doc.set_int("complex_spectrum", complex_spectrum ? 1 : 0);
  doc.set_int("steps", static_cast<long long>(step_ratios.size()));
  Eigen::VectorXd ratios(static_cast<Eigen::Index>(step_ratios.size()));
  for (std::size_t i = 0; i < step_ratios.size(); ++i)
    ratios[static_cast<Eigen::Index>(i)] = step_ratios[i];
  doc.set_vector("step_ratios", ratios);
  return doc;
}

io::KvDoc WeightBoundReport::to_kvdoc() const {
  io::KvDoc doc;
  doc.set("format", "arml.weight_bound.v1");
  doc.set_double("max_omega", max_omega);
  doc.set_double("mean_omega", mean_omega);
  doc.set_double("lipschitz_inverse", lipschitz_inverse);
  doc.set_double("bound", bound);
  doc.set_int("layers", layer_count);
  doc.set_int("skipped", skipped);
  doc.set_int("bound_satisfied", bound_satisfied ? 1 : 0);
  return doc;
}

WeightBoundReport importance_weight_bound(const flow::FlowStack& stack,
                                          int n_pairs, std::uint64_t seed,
                                          double tolerance) {
  if (stack.base.kind != flow::BaseDistribution::Kind::kUniformBox)
    throw std::invalid_argument(
        "importance_weight_bound: uniform base required");
  if (n_pairs < 1)
    throw std::invalid_argument("importance_weight_bound: n_pairs < 1");

  WeightBoundReport rep;
  rep.layer_count = static_cast<int>(stack.layers.size());
  const int d = stack.dim();
  const flow::FrozenStats* stats = stack.frozen_or_null();
  if (stack.has_minmax() && !stats)
    throw std::invalid_argument(
        "importance_weight_bound: frozen statistics required");

  Rng rng(seed);
  Mat pts = stack.base.draw_batch(n_pairs, rng);

  // finite-difference l_a: worst per-layer inverse expansion across pairs
  const double eps = 1e-4;
  Mat perturbed = pts;
  for (int i = 0; i < n_pairs; ++i) {
    Vec u(d);
    for (int j = 0; j < d; ++j) u[j] = rng.normal();
    u.normalize();
    perturbed.row(i) += eps * u.transpose();
  }
  double la = stack.layers.empty() ? 1.0 : 0.0;
  if (!stack.layers.empty()) {
    auto ta = stack.forward_trajectory(pts, stats);
    auto tb = stack.forward_trajectory(perturbed, stats);
    for (std::size_t l = 0; l + 1 < ta.size(); ++l) {
      for (int i = 0; i < n_pairs; ++i) {
        double din = (ta[l].row(i) - tb[l].row(i)).norm();
        double dout = (ta[l + 1].row(i) - tb[l + 1].row(i)).norm();
        if (dout > 0.0 && din > 0.0) la = std::max(la, din / dout);
      }
    }
  }
  rep.lipschitz_inverse = la;
  rep.bound = std::pow(la, static_cast<double>(rep.layer_count * d));

  // omega at base samples; p0 is constant over the box
  double log_p0 = stack.base.log_prob(
      Vec((stack.base.low + stack.base.high) / 2.0));
  double sum = 0.0;
  int valid = 0;
  for (int i = 0; i < n_pairs; ++i) {
    double lp;
    try {
      lp = stack.log_prob_one(pts.row(i).transpose(), stats);
    } catch (const std::exception&) {
      ++rep.skipped;
      continue;
    }
    double omega = std::isfinite(lp) ? std::exp(lp - log_p0) : 0.0;
    rep.max_omega = std::max(rep.max_omega, omega);
    sum += omega;
    ++valid;
  }
  rep.mean_omega = valid > 0 ? sum / valid : 0.0;
  rep.bound_satisfied = rep.max_omega <= rep.bound * (1.0 + tolerance);
  return rep;
}

QuadraticGame random_game(Rng& rng, int d1, int d2, double b_scale) {
  auto random_orthogonal = [&](int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) m(i, j) = rng.normal();
    Eigen::HouseholderQR<Mat> qr(m);
    Mat q = qr.householderQ();
    return q;
  };
  auto spd = [&](int n, double lo, double hi) {
    Mat q = random_orthogonal(n);
    Vec eigs(n);
    for (int i = 0; i < n; ++i) eigs[i] = rng.uniform(lo, hi);
    return Mat(q * eigs.asDiagonal() * q.transpose());
  };
  QuadraticGame g;
  g.A = spd(d1, 0.8, 1.2);
  g.A = 0.5 * (g.A + g.A.transpose());
  g.C = -spd(d2, 0.8, 1.2);
  g.C = 0.5 * (g.C + g.C.transpose());
  g.B.resize(d1, d2);
  for (int i = 0; i < d1; ++i)
    for (int j = 0; j < d2; ++j) g.B(i, j) = rng.normal();
  double bn = spectral_norm(g.B);
  if (bn > 0.0) g.B *= b_scale / bn;
  return g;
}

}  // namespace arml::theory
