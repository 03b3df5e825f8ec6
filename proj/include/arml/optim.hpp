#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace arml::optim {

// lr0 * 0.5 * (1 + cos(pi * t / T)), the usual cosine decay to zero.
inline double cosine_lr(double lr0, long long t, long long total) {
  if (total <= 0) return lr0;
  double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(total));
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

struct Sgd {
  double lr;
  explicit Sgd(double lr_in) : lr(lr_in) {}
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    params -= lr * grad;
  }
};

struct Adam {
  double lr;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Eigen::VectorXd m, v;
  long long t = 0;

  explicit Adam(double lr_in) : lr(lr_in) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    if (m.size() == 0) {
      m = Eigen::VectorXd::Zero(params.size());
      v = Eigen::VectorXd::Zero(params.size());
    }
    if (grad.size() != params.size())
      throw std::invalid_argument("Adam: gradient size mismatch");
    ++t;
    m = beta1 * m + (1 - beta1) * grad;
    v = beta2 * v + (1 - beta2) * grad.cwiseProduct(grad);
    double bc1 = 1 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1 - std::pow(beta2, static_cast<double>(t));
    Eigen::VectorXd mhat = m / bc1;
    Eigen::VectorXd vhat = v / bc2;
    params -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
  }
};

}  // namespace arml::optim
