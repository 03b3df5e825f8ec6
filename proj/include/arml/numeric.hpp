#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace arml {

// Pairwise (tree) summation. Besides the usual accuracy gain, summing 2^k
// equal values is exact, which several contracts rely on (e.g. a batch of
// identical task gradients must average to the single-task gradient).
inline double pairwise_sum(std::span<const double> xs) {
  const std::size_t n = xs.size();
  if (n == 0) return 0.0;
  if (n <= 8) {
    double s = xs[0];
    for (std::size_t i = 1; i < n; ++i) s += xs[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(xs.subspan(0, half)) + pairwise_sum(xs.subspan(half));
}

// Order-canonical mean: sorts the addends before the pairwise sum, so any
// permutation of the inputs produces a bit-identical result. Constant input
// short-circuits to the constant (exact for every n).
inline double stable_mean(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("stable_mean: empty input");
  std::vector<double> sorted(xs.begin(), xs.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back()) return sorted.front();
  return pairwise_sum(sorted) / static_cast<double>(sorted.size());
}

inline double stable_mean(const std::vector<double>& xs) {
  return stable_mean(std::span<const double>(xs.data(), xs.size()));
}

// Pairwise sum of vectors in index order (no sorting across coordinates).
inline Eigen::VectorXd pairwise_sum_vectors(
    const std::vector<Eigen::VectorXd>& vs, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return vs[lo];
  const std::size_t mid = lo + (hi - lo) / 2;
  return pairwise_sum_vectors(vs, lo, mid) + pairwise_sum_vectors(vs, mid, hi);
}

inline Eigen::VectorXd mean_vectors(const std::vector<Eigen::VectorXd>& vs) {
  if (vs.empty()) throw std::invalid_argument("mean_vectors: empty input");
  return pairwise_sum_vectors(vs, 0, vs.size()) /
         static_cast<double>(vs.size());
}

inline Eigen::VectorXd weighted_sum_vectors(
    const std::vector<Eigen::VectorXd>& vs, const std::vector<double>& ws) {
  if (vs.size() != ws.size() || vs.empty())
    throw std::invalid_argument("weighted_sum_vectors: size mismatch");
  std::vector<Eigen::VectorXd> scaled(vs.size());
  for (std::size_t i = 0; i < vs.size(); ++i) scaled[i] = ws[i] * vs[i];
  return pairwise_sum_vectors(scaled, 0, scaled.size());
}

}  // namespace arml
