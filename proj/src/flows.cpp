#include "arml/flows.hpp"

#include <cmath>
#include <iostream>
#include <limits>

namespace arml::flow {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kWNormFloor = 1e-24;
// keeps w.v_hat = -1 + max(softplus, gate) strictly above -1 so the layer
// determinant stays bounded away from zero under adversarial ascent
constexpr double kPlanarGateFloor = 1e-6;

double softplus_s(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double floored(double diff) {
  if (diff >= kMinMaxDenomFloor) return diff;
  std::cerr << "arml: minmax denominator " << diff << " floored to "
            << kMinMaxDenomFloor << "\n";
  return kMinMaxDenomFloor;
}
}  // namespace

// ---- BaseDistribution ----

BaseDistribution BaseDistribution::uniform_box(const Eigen::VectorXd& low,
                                               const Eigen::VectorXd& high) {
  if (low.size() != high.size() || low.size() == 0)
    throw std::invalid_argument("uniform_box: bad bounds");
  for (Eigen::Index i = 0; i < low.size(); ++i)
    if (!(low[i] < high[i]))
      throw std::invalid_argument("uniform_box: lower >= upper");
  BaseDistribution b;
  b.kind = Kind::kUniformBox;
  b.low = low;
  b.high = high;
  return b;
}

BaseDistribution BaseDistribution::diagonal_normal(
    const Eigen::VectorXd& mean, const Eigen::VectorXd& stddev) {
  if (mean.size() != stddev.size() || mean.size() == 0)
    throw std::invalid_argument("diagonal_normal: bad parameters");
  for (Eigen::Index i = 0; i < stddev.size(); ++i)
    if (!(stddev[i] > 0))
      throw std::invalid_argument("diagonal_normal: stddev <= 0");
  BaseDistribution b;
  b.kind = Kind::kDiagonalNormal;
  b.mean = mean;
  b.stddev = stddev;
  return b;
}

int BaseDistribution::dim() const {
  return static_cast<int>(kind == Kind::kUniformBox ? low.size()
                                                    : mean.size());
}

bool BaseDistribution::in_support(const Eigen::VectorXd& x) const {
  if (kind == Kind::kDiagonalNormal) return true;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (x[i] < low[i] || x[i] > high[i]) return false;
  return true;
}

double BaseDistribution::log_prob(const Eigen::VectorXd& x) const {
  if (kind == Kind::kUniformBox) {
    if (!in_support(x)) return -kInf;
    double log_vol = 0.0;
    for (Eigen::Index i = 0; i < low.size(); ++i)
      log_vol += std::log(high[i] - low[i]);
    return -log_vol;
  }
  double lp = 0.0;
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    double z = (x[i] - mean[i]) / stddev[i];
    lp += -0.5 * z * z - std::log(stddev[i]);
  }
  lp -= 0.5 * static_cast<double>(mean.size()) *
        std::log(2.0 * 3.14159265358979323846);
  return lp;
}

double BaseDistribution::entropy() const {
  if (kind == Kind::kUniformBox) {
    double log_vol = 0.0;
    for (Eigen::Index i = 0; i < low.size(); ++i)
      log_vol += std::log(high[i] - low[i]);
    return log_vol;
  }
  double h = 0.5 * static_cast<double>(mean.size()) *
             (1.0 + std::log(2.0 * 3.14159265358979323846));
  for (Eigen::Index i = 0; i < stddev.size(); ++i) h += std::log(stddev[i]);
  return h;
}

Eigen::VectorXd BaseDistribution::draw(Rng& rng) const {
  Eigen::VectorXd x(dim());
  if (kind == Kind::kUniformBox) {
    for (Eigen::Index i = 0; i < x.size(); ++i)
      x[i] = rng.uniform(low[i], high[i]);
  } else {
    for (Eigen::Index i = 0; i < x.size(); ++i)
      x[i] = rng.normal(mean[i], stddev[i]);
  }
  return x;
}

Eigen::MatrixXd BaseDistribution::draw_batch(int n, Rng& rng) const {
  Eigen::MatrixXd out(n, dim());
  for (int i = 0; i < n; ++i) out.row(i) = draw(rng).transpose();
  return out;
}

// ---- layers ----

Eigen::VectorXd PlanarLayer::effective_v() const {
  double wv = w.dot(v);
  // additive floor: the determinant stays >= gate while the gradient through
  // softplus never vanishes, so ascent can always back out of a contraction
  double target = -1.0 + kPlanarGateFloor + softplus_s(wv);
  double wn = w.squaredNorm() + kWNormFloor;
  return v + (target - wv) / wn * w;
}

double PlanarLayer::w_dot_vhat() const { return w.dot(effective_v()); }

FlowLayer FlowLayer::make_planar(const PlanarLayer& p) {
  FlowLayer l;
  l.kind = Kind::kPlanar;
  l.planar = p;
  return l;
}

FlowLayer FlowLayer::make_minmax(const MinMaxLayer& m) {
  for (Eigen::Index i = 0; i < m.scale.size(); ++i)
    if (!(m.scale[i] > 0))
      throw std::invalid_argument("minmax layer: scale must be positive");
  FlowLayer l;
  l.kind = Kind::kMinMax;
  l.minmax = m;
  return l;
}

// ---- FlowStack ----

FlowStack::FlowStack(BaseDistribution b, std::vector<FlowLayer> ls)
    : base(std::move(b)), layers(std::move(ls)) {
  validate();
}

void FlowStack::validate() const {
  int n_minmax = 0;
  for (const auto& l : layers)
    if (l.kind == FlowLayer::Kind::kMinMax) ++n_minmax;
  if (n_minmax > 1)
    throw std::invalid_argument("FlowStack: at most one minmax layer");
  for (const auto& l : layers) {
    if (l.kind == FlowLayer::Kind::kPlanar) {
      if (l.planar.w.size() != dim() || l.planar.v.size() != dim())
        throw std::invalid_argument("FlowStack: planar dim mismatch");
    } else if (l.minmax.scale.size() != dim() ||
               l.minmax.offset.size() != dim()) {
      throw std::invalid_argument("FlowStack: minmax dim mismatch");
    }
  }
}

bool FlowStack::has_minmax() const {
  for (const auto& l : layers)
    if (l.kind == FlowLayer::Kind::kMinMax) return true;
  return false;
}

int FlowStack::parameter_count() const {
  int n = 0;
  for (const auto& l : layers)
    n += l.kind == FlowLayer::Kind::kPlanar ? 2 * dim() + 1 : 2 * dim();
  return n;
}

ParamVector FlowStack::parameters() const {
  std::vector<Eigen::MatrixXd> ts;
  for (const auto& l : layers) {
    if (l.kind == FlowLayer::Kind::kPlanar) {
      ts.push_back(l.planar.w);
      ts.push_back(l.planar.v);
      ts.push_back(Eigen::MatrixXd::Constant(1, 1, l.planar.b));
    } else {
      ts.push_back(l.minmax.scale.transpose());
      ts.push_back(l.minmax.offset.transpose());
    }
  }
  return ParamVector::flatten(ts);
}

void FlowStack::set_parameters(const ParamVector& pv) {
  auto ts = pv.unflatten();
  std::size_t k = 0;
  for (auto& l : layers) {
    if (l.kind == FlowLayer::Kind::kPlanar) {
      l.planar.w = ts.at(k++);
      l.planar.v = ts.at(k++);
      l.planar.b = ts.at(k++)(0, 0);
    } else {
      l.minmax.scale = ts.at(k++).transpose();
      l.minmax.offset = ts.at(k++).transpose();
      for (Eigen::Index i = 0; i < l.minmax.scale.size(); ++i)
        if (!(l.minmax.scale[i] > 0))
          throw std::invalid_argument(
              "FlowStack: minmax scale must stay positive");
    }
  }
  if (k != ts.size())
    throw std::invalid_argument("FlowStack: parameter tensor count mismatch");
}

Eigen::VectorXd FlowStack::trainable_mask() const {
  Eigen::VectorXd mask(parameter_count());
  Eigen::Index off = 0;
  for (const auto& l : layers) {
    if (l.kind == FlowLayer::Kind::kPlanar) {
      mask.segment(off, 2 * dim() + 1).setOnes();
      off += 2 * dim() + 1;
    } else {
      mask.segment(off, 2 * dim()).setConstant(l.minmax.trainable ? 1.0 : 0.0);
      off += 2 * dim();
    }
  }
  return mask;
}

std::vector<Eigen::MatrixXd> FlowStack::forward_trajectory(
    const Eigen::MatrixXd& points, const FrozenStats* stats) const {
  const int n = static_cast<int>(points.rows());
  std::vector<Eigen::MatrixXd> traj;
  traj.push_back(points);
  Eigen::MatrixXd x = points;
  for (const auto& l : layers) {
    if (l.kind == FlowLayer::Kind::kPlanar) {
      const auto& p = l.planar;
      Eigen::VectorXd vhat = p.effective_v();
      Eigen::VectorXd s = x * p.w;
      s.array() += p.b;
      Eigen::VectorXd hs = s.unaryExpr(
          [&](double t) { return t > 0.0 ? t : p.slope * t; });
      x = x + hs * vhat.transpose();
    } else {
      Eigen::VectorXd m, M;
      if (stats) {
        m = stats->min;
        M = stats->max;
      } else {
        if (n < 2)
          throw std::runtime_error(
              "flow forward: batch of size < 2 with minmax layer");
        m = x.colwise().minCoeff();
        M = x.colwise().maxCoeff();
      }
      for (int i = 0; i < x.cols(); ++i) {
        double d = floored(M[i] - m[i]);
        x.col(i) = ((x.col(i).array() - m[i]) / d) * l.minmax.scale[i] +
                   l.minmax.offset[i];
      }
    }
    traj.push_back(x);
  }
  return traj;
}

FlowStack::ForwardResult FlowStack::forward(const Eigen::MatrixXd& points,
                                            const FrozenStats* stats) const {
  const int n = static_cast<int>(points.rows());
  ForwardResult res;
  res.log_det = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd x = points;
  for (const auto& l : layers) {
    if (l.kind == FlowLayer::Kind::kPlanar) {
      const auto& p = l.planar;
      Eigen::VectorXd vhat = p.effective_v();
      double wv = p.w.dot(vhat);
      Eigen::VectorXd s = x * p.w;
      s.array() += p.b;
      for (int i = 0; i < n; ++i) {
        double hp = s[i] > 0.0 ? 1.0 : p.slope;
        res.log_det[i] += std::log(1.0 + hp * wv);
      }
      Eigen::VectorXd hs = s.unaryExpr(
          [&](double t) { return t > 0.0 ? t : p.slope * t; });
      x = x + hs * vhat.transpose();
    } else {
      Eigen::VectorXd m, M;
      if (stats) {
        m = stats->min;
        M = stats->max;
      } else {
        if (n < 2)
          throw std::runtime_error(
              "flow forward: batch of size < 2 with minmax layer");
        m = x.colwise().minCoeff();
        M = x.colwise().maxCoeff();
      }
      double ld = 0.0;
      for (int i = 0; i < x.cols(); ++i) {
        double d = floored(M[i] - m[i]);
        ld += std::log(l.minmax.scale[i]) - std::log(d);
        x.col(i) = ((x.col(i).array() - m[i]) / d) * l.minmax.scale[i] +
                   l.minmax.offset[i];
      }
      res.log_det.array() += ld;
      res.stats_used = FrozenStats{m, M};
    }
  }
  res.tasks = std::move(x);
  return res;
}

FlowStack::InverseResult FlowStack::inverse(const Eigen::MatrixXd& tasks,
                                            const FrozenStats* stats) const {
  const int n = static_cast<int>(tasks.rows());
  InverseResult res;
  res.log_det_inverse = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd y = tasks;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& l = layers[li];
    if (l.kind == FlowLayer::Kind::kMinMax) {
      if (!stats)
        throw std::runtime_error(
            "flow inverse: minmax layer requires frozen statistics");
      double ld = 0.0;
      for (int i = 0; i < y.cols(); ++i) {
        double d = floored(stats->max[i] - stats->min[i]);
        ld += std::log(d) - std::log(l.minmax.scale[i]);
        y.col(i) = stats->min[i] + (y.col(i).array() - l.minmax.offset[i]) /
                                       l.minmax.scale[i] * d;
      }
      res.log_det_inverse.array() += ld;
    } else {
      const auto& p = l.planar;
      Eigen::VectorXd vhat = p.effective_v();
      double wv = p.w.dot(vhat);
      double den_pos = 1.0 + wv;
      double den_neg = 1.0 + p.slope * wv;
      // the piecewise-linear scalar equation s + h(s) w.vhat = u has a unique
      // root when both branch slopes are positive
      if (den_pos <= 1e-12 || den_neg <= 1e-12)
        throw std::runtime_error("flow inverse: layer " + std::to_string(li) +
                                 " is not invertible");
      Eigen::VectorXd u = y * p.w;
      u.array() += p.b;
      for (int i = 0; i < n; ++i) {
        double s = u[i] >= 0.0 ? u[i] / den_pos : u[i] / den_neg;
        double hs = s > 0.0 ? s : p.slope * s;
        double hp = s > 0.0 ? 1.0 : p.slope;
        y.row(i) -= hs * vhat.transpose();
        res.log_det_inverse[i] -= std::log(1.0 + hp * wv);
      }
    }
  }
  res.base_points = std::move(y);
  return res;
}

Eigen::VectorXd FlowStack::log_prob(const Eigen::MatrixXd& tasks,
                                    const FrozenStats* stats) const {
  InverseResult inv = inverse(tasks, stats);
  Eigen::VectorXd lp(tasks.rows());
  for (Eigen::Index i = 0; i < tasks.rows(); ++i) {
    Eigen::VectorXd x0 = inv.base_points.row(i).transpose();
    double base_lp = base.log_prob(x0);
    lp[i] = std::isinf(base_lp) ? -kInf : base_lp + inv.log_det_inverse[i];
  }
  return lp;
}

double FlowStack::log_prob_one(const Eigen::VectorXd& task,
                               const FrozenStats* stats) const {
  Eigen::MatrixXd t(1, task.size());
  t.row(0) = task.transpose();
  return log_prob(t, stats)[0];
}

FlowStack::SampleResult FlowStack::sample(int count, std::uint64_t seed,
                                          const FrozenStats* stats) const {
  if (count < 1) throw std::invalid_argument("flow sample: count < 1");
  Rng rng(seed);
  SampleResult res;
  res.base_points = base.draw_batch(count, rng);
  ForwardResult fwd = forward(res.base_points, stats);
  res.tasks = std::move(fwd.tasks);
  res.log_det = std::move(fwd.log_det);
  return res;
}

FrozenStats FlowStack::compute_reference_stats(int n,
                                               std::uint64_t seed) const {
  Rng rng(seed);
  Eigen::MatrixXd pts = base.draw_batch(n, rng);
  // statistics are taken at the minmax layer input
  Eigen::MatrixXd x = pts;
  for (const auto& l : layers) {
    if (l.kind == FlowLayer::Kind::kMinMax) break;
    const auto& p = l.planar;
    Eigen::VectorXd vhat = p.effective_v();
    Eigen::VectorXd s = x * p.w;
    s.array() += p.b;
    Eigen::VectorXd hs =
        s.unaryExpr([&](double t) { return t > 0.0 ? t : p.slope * t; });
    x = x + hs * vhat.transpose();
  }
  FrozenStats st;
  st.min = x.colwise().minCoeff();
  st.max = x.colwise().maxCoeff();
  return st;
}

void FlowStack::freeze_reference_stats(int n, std::uint64_t seed) {
  frozen = compute_reference_stats(n, seed);
}

io::KvDoc FlowStack::to_kvdoc() const {
  io::KvDoc doc;
  doc.set("format", "arml.flow.v1");
  doc.set_int("dim", dim());
  if (base.kind == BaseDistribution::Kind::kUniformBox) {
    doc.set("base.kind", "uniform");
    doc.set_vector("base.low", base.low);
    doc.set_vector("base.high", base.high);
  } else {
    doc.set("base.kind", "normal");
    doc.set_vector("base.mean", base.mean);
    doc.set_vector("base.stddev", base.stddev);
  }
  doc.set_int("layers", static_cast<long long>(layers.size()));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    std::string pre = "layer." + std::to_string(i) + ".";
    const auto& l = layers[i];
    if (l.kind == FlowLayer::Kind::kPlanar) {
      doc.set(pre + "kind", "planar");
      doc.set_vector(pre + "w", l.planar.w);
      doc.set_vector(pre + "v", l.planar.v);
      doc.set_double(pre + "b", l.planar.b);
      doc.set_double(pre + "slope", l.planar.slope);
    } else {
      doc.set(pre + "kind", "minmax");
      doc.set_vector(pre + "scale", l.minmax.scale);
      doc.set_vector(pre + "offset", l.minmax.offset);
      doc.set_int(pre + "trainable", l.minmax.trainable ? 1 : 0);
    }
  }
  doc.set_int("frozen", frozen ? 1 : 0);
  if (frozen) {
    doc.set_vector("frozen.min", frozen->min);
    doc.set_vector("frozen.max", frozen->max);
  }
  return doc;
}

FlowStack FlowStack::from_kvdoc(const io::KvDoc& doc) {
  if (doc.get("format") != "arml.flow.v1")
    throw std::runtime_error("flow checkpoint: unknown format");
  BaseDistribution base;
  if (doc.get("base.kind") == "uniform") {
    base = BaseDistribution::uniform_box(doc.get_vector("base.low"),
                                         doc.get_vector("base.high"));
  } else {
    base = BaseDistribution::diagonal_normal(doc.get_vector("base.mean"),
                                             doc.get_vector("base.stddev"));
  }
  std::vector<FlowLayer> layers;
  const long long m = doc.get_int("layers");
  for (long long i = 0; i < m; ++i) {
    std::string pre = "layer." + std::to_string(i) + ".";
    if (doc.get(pre + "kind") == "planar") {
      PlanarLayer p;
      p.w = doc.get_vector(pre + "w");
      p.v = doc.get_vector(pre + "v");
      p.b = doc.get_double(pre + "b");
      p.slope = doc.get_double(pre + "slope");
      layers.push_back(FlowLayer::make_planar(p));
    } else {
      MinMaxLayer mm;
      mm.scale = doc.get_vector(pre + "scale");
      mm.offset = doc.get_vector(pre + "offset");
      mm.trainable = doc.get_int(pre + "trainable") != 0;
      layers.push_back(FlowLayer::make_minmax(mm));
    }
  }
  FlowStack stack(base, layers);
  if (doc.get_int("frozen")) {
    FrozenStats st;
    st.min = doc.get_vector("frozen.min");
    st.max = doc.get_vector("frozen.max");
    stack.frozen = st;
  }
  return stack;
}

void FlowStack::save(const std::string& path) const { to_kvdoc().save(path); }

FlowStack FlowStack::load(const std::string& path) {
  return from_kvdoc(io::KvDoc::load(path));
}

FlowStack make_default_stack(const BaseDistribution& base,
                             const Eigen::VectorXd& box_low,
                             const Eigen::VectorXd& box_high, int n_planar,
                             std::uint64_t seed) {
  Rng rng(seed);
  const int d = base.dim();
  const double r = 1.0 / std::sqrt(static_cast<double>(d));
  const Eigen::VectorXd center = 0.5 * (box_low + box_high);
  std::vector<FlowLayer> layers;
  for (int i = 0; i < n_planar; ++i) {
    PlanarLayer p;
    p.w.resize(d);
    p.v.resize(d);
    for (int j = 0; j < d; ++j) p.w[j] = rng.uniform(-r, r);
    for (int j = 0; j < d; ++j) p.v[j] = rng.uniform(-r, r);
    // hyperplane through the box center, so both leaky branches see samples
    p.b = -p.w.dot(center);
    layers.push_back(FlowLayer::make_planar(p));
  }
  MinMaxLayer mm;
  mm.scale = box_high - box_low;
  mm.offset = box_low;
  layers.push_back(FlowLayer::make_minmax(mm));
  return FlowStack(base, layers);
}

// ---- graph builders ----

FlowGraph make_flow_graph(ad::Graph& g, const FlowStack& stack) {
  FlowGraph fg;
  fg.g = &g;
  fg.planar_index.assign(stack.layers.size(), -1);
  fg.minmax_scale.assign(stack.layers.size(), ad::Value());
  fg.minmax_offset.assign(stack.layers.size(), ad::Value());
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    const auto& l = stack.layers[i];
    std::string pre = "flow." + std::to_string(i) + ".";
    if (l.kind == FlowLayer::Kind::kPlanar) {
      FlowGraph::PlanarNodes pn;
      pn.w = g.leaf(pre + "w", l.planar.w);
      pn.v = g.leaf(pre + "v", l.planar.v);
      pn.b = g.leaf(pre + "b", Eigen::MatrixXd::Constant(1, 1, l.planar.b));
      ad::Value wv = ad::dot(pn.w, pn.v);
      ad::Value target = ad::softplus(wv) + (kPlanarGateFloor - 1.0);
      ad::Value coef =
          (target - wv) / (ad::dot(pn.w, pn.w) + kWNormFloor);
      pn.v_hat = ad::add(pn.v, ad::mul(pn.w, coef));
      pn.w_dot_vhat = ad::dot(pn.w, pn.v_hat);
      fg.planar_index[i] = static_cast<int>(fg.planar_nodes.size());
      fg.planar_nodes.push_back(pn);
      fg.param_leaves.push_back(pn.w);
      fg.param_leaves.push_back(pn.v);
      fg.param_leaves.push_back(pn.b);
    } else {
      ad::Value scale =
          g.leaf(pre + "scale", Eigen::MatrixXd(l.minmax.scale.transpose()));
      ad::Value offset =
          g.leaf(pre + "offset", Eigen::MatrixXd(l.minmax.offset.transpose()));
      fg.minmax_scale[i] = scale;
      fg.minmax_offset[i] = offset;
      fg.param_leaves.push_back(scale);
      fg.param_leaves.push_back(offset);
    }
  }
  return fg;
}

namespace {

// Planar forward on an n x d Value.
ad::Value planar_forward_graph(const FlowGraph::PlanarNodes& pn, ad::Value x,
                               double slope) {
  ad::Value s = ad::add(ad::matmul(x, pn.w), pn.b);  // n x 1 (+ 1x1 broadcast)
  ad::Value hs = ad::leaky_relu(s, slope);
  return ad::add(x, ad::matmul(hs, ad::transpose(pn.v_hat)));
}

}  // namespace

GraphStats graph_stats_from_batch(const FlowGraph& fg, const FlowStack& stack,
                                  const Eigen::MatrixXd& base_batch) {
  ad::Graph& g = *fg.g;
  ad::Value x = g.constant(base_batch);
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    if (stack.layers[i].kind == FlowLayer::Kind::kMinMax) break;
    x = planar_forward_graph(fg.planar_nodes[fg.planar_index[i]], x,
                             stack.layers[i].planar.slope);
  }
  return GraphStats{ad::col_min(x), ad::col_max(x)};
}

GraphStats graph_stats_const(ad::Graph& g, const FrozenStats& stats) {
  return GraphStats{g.constant(Eigen::MatrixXd(stats.min.transpose())),
                    g.constant(Eigen::MatrixXd(stats.max.transpose()))};
}

ad::Value graph_log_prob(const FlowGraph& fg, const FlowStack& stack,
                         const GraphStats* stats, const Eigen::MatrixXd& tasks,
                         bool soft_uniform_boundary) {
  ad::Graph& g = *fg.g;
  const int n = static_cast<int>(tasks.rows());
  ad::Value y = g.constant(tasks);
  ad::Value ld = g.constant(Eigen::MatrixXd::Zero(n, 1));
  for (std::size_t li = stack.layers.size(); li-- > 0;) {
    const auto& l = stack.layers[li];
    if (l.kind == FlowLayer::Kind::kMinMax) {
      if (!stats)
        throw std::runtime_error("graph_log_prob: minmax needs statistics");
      ad::Value diff = ad::sub(stats->max, stats->min);  // 1 x d
      ad::Value eps = g.constant(
          Eigen::MatrixXd::Constant(1, diff.cols(), kMinMaxDenomFloor));
      ad::Value den = ad::where_ge0(ad::sub(diff, eps), diff, eps);
      ad::Value scale = fg.minmax_scale[li];
      ad::Value offset = fg.minmax_offset[li];
      // z = m + (y - offset) / scale * den   (1xd rows broadcast over n)
      y = ad::add(stats->min,
                  ad::mul(ad::divide(ad::sub(y, offset), scale), den));
      ad::Value ld_scalar =
          ad::sum_all(ad::sub(ad::log_v(den), ad::log_v(scale)));
      ld = ad::add(ld, ld_scalar);
    } else {
      const auto& pn = fg.planar_nodes[fg.planar_index[li]];
      const double slope = l.planar.slope;
      ad::Value u = ad::add(ad::matmul(y, pn.w), pn.b);  // n x 1
      ad::Value den_pos = ad::repeat_rows(pn.w_dot_vhat + 1.0, n);
      ad::Value den_neg =
          ad::repeat_rows(pn.w_dot_vhat * slope + 1.0, n);
      ad::Value s = ad::where_ge0(u, ad::divide(u, den_pos),
                                  ad::divide(u, den_neg));
      ad::Value hs = ad::leaky_relu(s, slope);
      y = ad::sub(y, ad::matmul(hs, ad::transpose(pn.v_hat)));
      ad::Value det =
          ad::mul(ad::leaky_relu_grad(s, slope), pn.w_dot_vhat) + 1.0;
      ld = ad::sub(ld, ad::log_v(det));
    }
  }
  // base log-density
  if (stack.base.kind == BaseDistribution::Kind::kUniformBox) {
    double log_vol = 0.0;
    for (Eigen::Index i = 0; i < stack.base.low.size(); ++i)
      log_vol += std::log(stack.base.high[i] - stack.base.low[i]);
    ad::Value lp = ad::add(ld, g.constant(-log_vol));
    if (soft_uniform_boundary) {
      Eigen::RowVectorXd widths =
          (stack.base.high - stack.base.low).transpose();
      ad::Value low = g.constant(Eigen::MatrixXd(stack.base.low.transpose()));
      ad::Value high =
          g.constant(Eigen::MatrixXd(stack.base.high.transpose()));
      ad::Value w = g.constant(Eigen::MatrixXd(widths));
      ad::Value under = ad::relu(ad::divide(ad::sub(low, y), w));
      ad::Value over = ad::relu(ad::divide(ad::sub(y, high), w));
      ad::Value pen = ad::row_sum(
          ad::add(ad::mul(under, under), ad::mul(over, over)));
      lp = ad::sub(lp, ad::mul(pen, g.constant(kSoftBoundaryStiffness)));
    }
    return lp;
  }
  ad::Value mean =
      g.constant(Eigen::MatrixXd(stack.base.mean.transpose()));     // 1 x d
  ad::Value stdv =
      g.constant(Eigen::MatrixXd(stack.base.stddev.transpose()));   // 1 x d
  ad::Value z = ad::divide(ad::sub(y, mean), stdv);
  ad::Value quad = ad::mul(ad::row_sum(ad::mul(z, z)), g.constant(-0.5));
  double c = -0.5 * stack.dim() * std::log(2.0 * 3.14159265358979323846);
  for (Eigen::Index i = 0; i < stack.base.stddev.size(); ++i)
    c -= std::log(stack.base.stddev[i]);
  return ad::add(ld, ad::add(quad, g.constant(c)));
}

ParamVector collect_flow_gradient(const FlowGraph& fg, const FlowStack& stack,
                                  ad::Value objective) {
  ad::Graph& g = *fg.g;
  std::vector<ad::Value> grads = g.gradient(objective, fg.param_leaves);
  std::vector<Eigen::MatrixXd> mats;
  mats.reserve(grads.size());
  for (auto& gv : grads) mats.push_back(g.evaluate(gv));
  ParamVector pv = ParamVector::flatten(mats);
  ParamVector ref = stack.parameters();
  pv.shapes = ref.shapes;  // flat layout matches parameters() ordering
  if (pv.data.size() != ref.data.size())
    throw std::runtime_error("collect_flow_gradient: layout mismatch");
  return pv;
}

}  // namespace arml::flow
