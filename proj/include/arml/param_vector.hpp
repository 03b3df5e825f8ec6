#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

namespace arml {

// Flat view of a list of parameter tensors plus their shapes. Optimizers and
// gradient reports operate on the flat array; models unflatten on demand.
struct ParamVector {
  Eigen::VectorXd data;
  std::vector<std::pair<int, int>> shapes;

  static ParamVector flatten(const std::vector<Eigen::MatrixXd>& tensors) {
    ParamVector pv;
    Eigen::Index total = 0;
    for (const auto& t : tensors) total += t.size();
    pv.data.resize(total);
    pv.shapes.reserve(tensors.size());
    Eigen::Index off = 0;
    for (const auto& t : tensors) {
      pv.shapes.emplace_back(static_cast<int>(t.rows()),
                             static_cast<int>(t.cols()));
      for (Eigen::Index j = 0; j < t.cols(); ++j)
        for (Eigen::Index i = 0; i < t.rows(); ++i) pv.data[off++] = t(i, j);
    }
    return pv;
  }

  std::vector<Eigen::MatrixXd> unflatten() const {
    std::vector<Eigen::MatrixXd> out;
    out.reserve(shapes.size());
    Eigen::Index off = 0;
    for (const auto& [r, c] : shapes) {
      Eigen::MatrixXd m(r, c);
      for (int j = 0; j < c; ++j)
        for (int i = 0; i < r; ++i) m(i, j) = data[off++];
      out.push_back(std::move(m));
    }
    if (off != data.size())
      throw std::runtime_error("ParamVector: shape metadata out of sync");
    return out;
  }

  Eigen::Index size() const { return data.size(); }
  double norm() const { return data.norm(); }

  ParamVector zeros_like() const {
    ParamVector pv;
    pv.data = Eigen::VectorXd::Zero(data.size());
    pv.shapes = shapes;
    return pv;
  }
};

}  // namespace arml
