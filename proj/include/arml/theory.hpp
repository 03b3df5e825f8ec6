#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "arml/flows.hpp"
#include "arml/kvdoc.hpp"
#include "arml/rng.hpp"

namespace arml::theory {

// Local quadratic model of the game around the equilibrium (0, 0):
// J(theta, phi) = 1/2 theta'A theta + theta'B phi + 1/2 phi'C phi.
struct QuadraticGame {
  Eigen::MatrixXd A;  // symmetric positive definite
  Eigen::MatrixXd B;
  Eigen::MatrixXd C;  // symmetric negative semidefinite

  int d1() const { return static_cast<int>(A.rows()); }
  int d2() const { return static_cast<int>(C.rows()); }
  void validate() const;
};

struct DeltaReport {
  double delta = 0.0;
  double branch_theta = 0.0;  // (1 - g1 smin(A))^2 (1 + g2^2 Lmax^2)
  double branch_phi = 0.0;
  double sigma_min_a = 0.0;
  double l_max = 0.0;
  double q_norm = 0.0;            // ||I + g2 C||
  double sigma_min_btbc = 0.0;    // smallest real part of eig(B'BC)
  bool complex_spectrum = false;  // B'BC eigenvalues left the real axis
};

// Contraction factor of the alternating-GDA dynamics. The phi branch uses
// the exact ||I + g2 C|| in place of the loose (1 + g2 Lmax)^2 envelope,
// which is what makes delta < 1/2 reachable at all.
DeltaReport delta(const QuadraticGame& game, double gamma1, double gamma2);

struct ContractionReport {
  double delta_value = 0.0;
  double sqrt_delta = 0.0;
  bool delta_below_half = false;
  std::vector<double> step_ratios;  // ||z_{t+1}|| / ||z_t||
  double worst_ratio = 0.0;
  double geometric_mean_ratio = 0.0;
  bool converged = false;
  bool theory_violation = false;  // divergence despite delta < 1/2
  bool complex_spectrum = false;

  io::KvDoc to_kvdoc() const;
};

// Exact linearized alternating-GDA iteration:
//   theta' = theta - g1 (A theta + B phi)
//   phi'   = phi + g2 (B' theta' + C phi)
ContractionReport run_alt_gda(const QuadraticGame& game, double gamma1,
                              double gamma2, const Eigen::VectorXd& z0,
                              int steps);

struct WeightBoundReport {
  double max_omega = 0.0;
  double mean_omega = 0.0;
  double lipschitz_inverse = 1.0;  // finite-difference estimate of l_a
  double bound = 1.0;              // l_a^{M d}
  int layer_count = 0;
  int skipped = 0;
  bool bound_satisfied = false;

  io::KvDoc to_kvdoc() const;
};

// Empirical check of omega(tau) = p_phi(tau)/p0(tau) <= l_a^{M d} over base
// samples; requires a uniform base distribution.
WeightBoundReport importance_weight_bound(const flow::FlowStack& stack,
                                          int n_pairs, std::uint64_t seed,
                                          double tolerance = 0.01);

// Well-conditioned random games for the convergence testbed.
QuadraticGame random_game(Rng& rng, int d1, int d2, double b_scale);

// Power-iteration spectral norm (largest singular value).
double spectral_norm(const Eigen::MatrixXd& m, double tol = 1e-10);
// Smallest eigenvalue of a symmetric matrix via shifted power iteration.
double symmetric_min_eigenvalue(const Eigen::MatrixXd& m, double tol = 1e-10);

}  // namespace arml::theory
