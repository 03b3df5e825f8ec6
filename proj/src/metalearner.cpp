#include "arml/metalearner.hpp"

#include <cmath>

#include "arml/numeric.hpp"
#include "arml/rng.hpp"

namespace arml::meta {

using ad::Graph;
using ad::Value;
using Mat = Eigen::MatrixXd;

namespace {

std::vector<std::pair<int, int>> layer_shapes(const task::BenchmarkSpec& spec,
                                              const MetaConfig& cfg) {
  std::vector<std::pair<int, int>> s;
  auto linear = [&s](int in, int out) {
    s.emplace_back(in, out);  // weight
    s.emplace_back(1, out);   // bias
  };
  if (cfg.variant == Variant::kMaml) {
    linear(spec.input_dim, cfg.hidden);
    for (int i = 1; i < cfg.hidden_layers; ++i) linear(cfg.hidden, cfg.hidden);
    linear(cfg.hidden, spec.raw_output_dim);
  } else {
    linear(spec.input_dim + spec.target_dim, cfg.hidden);
    for (int i = 1; i < cfg.hidden_layers - 1; ++i)
      linear(cfg.hidden, cfg.hidden);
    linear(cfg.hidden, cfg.cnp_rep_dim);
    linear(cfg.cnp_rep_dim + spec.input_dim, cfg.hidden);
    linear(cfg.hidden, spec.raw_output_dim);
  }
  return s;
}

Eigen::VectorXd flatten_values(Graph& g, const std::vector<Value>& vs) {
  std::vector<Mat> mats;
  mats.reserve(vs.size());
  for (const Value& v : vs) mats.push_back(g.evaluate(v));
  return ParamVector::flatten(mats).data;
}

}  // namespace

MetaLearner::MetaLearner(const task::BenchmarkSpec& spec,
                         const MetaConfig& cfg)
    : spec_(spec), cfg_(cfg) {
  shapes_ = layer_shapes(spec, cfg);
  n_params_ = 0;
  for (auto [r, c] : shapes_) n_params_ += r * c;
}

ParamVector MetaLearner::init_params(std::uint64_t seed) const {
  Rng rng(seed);
  std::vector<Mat> mats;
  for (std::size_t i = 0; i < shapes_.size(); i += 2) {
    int fan_in = shapes_[i].first;
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int k = 0; k < 2; ++k) {
      auto [r, c] = shapes_[i + static_cast<std::size_t>(k)];
      Mat m(r, c);
      for (int jj = 0; jj < c; ++jj)
        for (int ii = 0; ii < r; ++ii) m(ii, jj) = rng.uniform(-bound, bound);
      mats.push_back(std::move(m));
    }
  }
  return ParamVector::flatten(mats);
}

std::vector<Value> MetaLearner::make_leaves(Graph& g,
                                            const ParamVector& theta) const {
  if (theta.data.size() != n_params_)
    throw std::invalid_argument("MetaLearner: parameter count mismatch");
  ParamVector pv = theta;
  pv.shapes = shapes_;
  auto mats = pv.unflatten();
  std::vector<Value> leaves;
  leaves.reserve(mats.size());
  for (std::size_t i = 0; i < mats.size(); ++i)
    leaves.push_back(g.leaf("theta." + std::to_string(i), mats[i]));
  return leaves;
}

Value MetaLearner::apply_head(Graph& g, Value raw) const {
  switch (spec_.head) {
    case task::OutputHead::kIdentity:
      return raw;
    case task::OutputHead::kPendulum: {
      Value ang = ad::slice_cols(raw, 0, 1);
      Value vel = ad::slice_cols(raw, 1, 1);
      return ad::concat_cols(
          ad::concat_cols(ad::cos_v(ang), ad::sin_v(ang)), vel);
    }
    case task::OutputHead::kAcrobot: {
      Value a1 = ad::slice_cols(raw, 0, 1);
      Value a2 = ad::slice_cols(raw, 1, 1);
      Value vel = ad::slice_cols(raw, 2, 2);
      Value trig = ad::concat_cols(
          ad::concat_cols(ad::cos_v(a1), ad::sin_v(a1)),
          ad::concat_cols(ad::cos_v(a2), ad::sin_v(a2)));
      return ad::concat_cols(trig, vel);
    }
  }
  throw std::logic_error("unknown output head");
}

Value MetaLearner::mse(Graph& g, Value pred, const Mat& target) const {
  Value err = ad::sub(pred, g.constant(target));
  Value per_point =
      ad::mul(ad::row_sum(ad::mul(err, err)),
              g.constant(1.0 / static_cast<double>(target.cols())));
  return ad::set_mean(per_point);
}

Value MetaLearner::forward_maml(Graph& g, const std::vector<Value>& params,
                                const Mat& X) const {
  Value h = g.constant(X);
  const std::size_t n_linear = params.size() / 2;
  for (std::size_t l = 0; l < n_linear; ++l) {
    h = ad::add(ad::matmul(h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 < n_linear) h = ad::relu(h);
  }
  return apply_head(g, h);
}

Value MetaLearner::forward_cnp(Graph& g, const std::vector<Value>& params,
                               const Mat& support_x, const Mat& support_y,
                               const Mat& query_x) const {
  const int enc_layers = cfg_.hidden_layers;      // linear layers in encoder
  Mat pairs(support_x.rows(), support_x.cols() + support_y.cols());
  pairs.leftCols(support_x.cols()) = support_x;
  pairs.rightCols(support_y.cols()) = support_y;

  Value h = g.constant(pairs);
  for (int l = 0; l < enc_layers; ++l) {
    h = ad::add(ad::matmul(h, params[2 * static_cast<std::size_t>(l)]),
                params[2 * static_cast<std::size_t>(l) + 1]);
    if (l + 1 < enc_layers) h = ad::relu(h);
  }
  // permutation-invariant aggregation of the support representations
  Value z = ad::set_mean(h);
  Value zq = ad::repeat_rows(z, static_cast<int>(query_x.rows()));
  Value dec_in = ad::concat_cols(zq, g.constant(query_x));

  std::size_t off = 2 * static_cast<std::size_t>(enc_layers);
  Value d1 = ad::relu(
      ad::add(ad::matmul(dec_in, params[off]), params[off + 1]));
  Value raw = ad::add(ad::matmul(d1, params[off + 2]), params[off + 3]);
  return apply_head(g, raw);
}

MetaLearner::BuiltLoss MetaLearner::build_task_loss(
    Graph& g, const ParamVector& theta, const task::TaskDataset& t) const {
  BuiltLoss out;
  out.leaves = make_leaves(g, theta);
  if (cfg_.variant == Variant::kCnp) {
    Value self_pred =
        forward_cnp(g, out.leaves, t.support_x, t.support_y, t.support_x);
    out.support_loss_before = mse(g, self_pred, t.support_y).scalar();
    out.loss = mse(g, forward_cnp(g, out.leaves, t.support_x, t.support_y,
                                  t.query_x),
                   t.query_y);
    out.adapted_delta_norm = 0.0;
    return out;
  }

  std::vector<Value> adapted = out.leaves;
  for (int step = 0; step < cfg_.inner_steps; ++step) {
    Value support_loss = mse(g, forward_maml(g, adapted, t.support_x),
                             t.support_y);
    if (step == 0) out.support_loss_before = support_loss.scalar();
    std::vector<Value> grads = g.gradient(support_loss, adapted);
    for (std::size_t i = 0; i < adapted.size(); ++i) {
      Value gi = cfg_.first_order ? g.detach(grads[i]) : grads[i];
      adapted[i] =
          ad::sub(adapted[i], ad::mul(g.constant(cfg_.inner_lr), gi));
    }
  }
  Eigen::VectorXd adapted_flat = flatten_values(g, adapted);
  out.adapted_delta_norm = (adapted_flat - theta.data).norm();
  out.loss = mse(g, forward_maml(g, adapted, t.query_x), t.query_y);
  return out;
}

ParamVector MetaLearner::inner_adapt(const ParamVector& theta,
                                     const Mat& support_x,
                                     const Mat& support_y, double inner_lr,
                                     int steps) const {
  if (cfg_.variant == Variant::kCnp)
    throw std::invalid_argument("inner_adapt: CNP has no inner loop");
  if (steps < 1) throw std::invalid_argument("inner_adapt: steps < 1");
  Graph g;
  std::vector<Value> adapted = make_leaves(g, theta);
  for (int step = 0; step < steps; ++step) {
    Value support_loss = mse(g, forward_maml(g, adapted, support_x),
                             support_y);
    std::vector<Value> grads = g.gradient(support_loss, adapted);
    for (std::size_t i = 0; i < adapted.size(); ++i)
      adapted[i] =
          ad::sub(adapted[i], ad::mul(g.constant(inner_lr), grads[i]));
  }
  ParamVector out;
  out.data = flatten_values(g, adapted);
  out.shapes = shapes_;
  return out;
}

double MetaLearner::task_loss(const ParamVector& theta,
                              const task::TaskDataset& t) const {
  if (t.query_x.rows() == 0)
    throw std::invalid_argument("task_loss: empty query set");
  Graph g;
  return build_task_loss(g, theta, t).loss.scalar();
}

TaskLossRecord MetaLearner::task_loss_record(const ParamVector& theta,
                                             const task::TaskDataset& t) const {
  if (t.query_x.rows() == 0)
    throw std::invalid_argument("task_loss: empty query set");
  Graph g;
  BuiltLoss bl = build_task_loss(g, theta, t);
  TaskLossRecord rec;
  rec.identifier = t.identifier;
  rec.support_loss_before = bl.support_loss_before;
  rec.query_loss = bl.loss.scalar();
  rec.adapted_delta_norm = bl.adapted_delta_norm;
  return rec;
}

MetaLearner::TaskGradient MetaLearner::task_gradient(
    const ParamVector& theta, const task::TaskDataset& t) const {
  if (t.query_x.rows() == 0)
    throw std::invalid_argument("task_gradient: empty query set");
  Graph g;
  BuiltLoss bl = build_task_loss(g, theta, t);
  TaskGradient out;
  out.loss = bl.loss.scalar();
  std::vector<Value> grads = g.gradient(bl.loss, bl.leaves);
  out.grad.data = flatten_values(g, grads);
  out.grad.shapes = shapes_;
  return out;
}

ParamVector MetaLearner::meta_gradient(
    const ParamVector& theta,
    const std::vector<task::TaskDataset>& batch) const {
  if (batch.empty())
    throw std::invalid_argument("meta_gradient: empty batch");
  std::vector<Eigen::VectorXd> grads;
  grads.reserve(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    TaskGradient tg = task_gradient(theta, batch[k]);
    if (!tg.grad.data.allFinite() || !std::isfinite(tg.loss))
      throw std::runtime_error("meta_gradient: non-finite gradient at task " +
                               std::to_string(k));
    grads.push_back(std::move(tg.grad.data));
  }
  ParamVector out;
  out.data = mean_vectors(grads);
  out.shapes = shapes_;
  return out;
}

io::KvDoc MetaLearner::to_kvdoc(const ParamVector& theta) const {
  io::KvDoc doc;
  doc.set("format", "arml.meta.v1");
  doc.set("variant", cfg_.variant == Variant::kMaml ? "maml" : "cnp");
  doc.set("benchmark", spec_.name);
  doc.set_int("hidden", cfg_.hidden);
  doc.set_int("hidden_layers", cfg_.hidden_layers);
  doc.set_int("rep_dim", cfg_.cnp_rep_dim);
  doc.set_double("inner_lr", cfg_.inner_lr);
  doc.set_int("inner_steps", cfg_.inner_steps);
  doc.set_int("first_order", cfg_.first_order ? 1 : 0);
  doc.set_int("params", n_params_);
  doc.set_vector("theta", theta.data);
  return doc;
}

ParamVector MetaLearner::params_from_kvdoc(const io::KvDoc& doc) const {
  if (doc.get("format") != "arml.meta.v1")
    throw std::runtime_error("meta checkpoint: unknown format");
  if (doc.get_int("params") != n_params_)
    throw std::runtime_error("meta checkpoint: parameter count mismatch");
  ParamVector pv;
  pv.data = doc.get_vector("theta");
  pv.shapes = shapes_;
  if (pv.data.size() != n_params_)
    throw std::runtime_error("meta checkpoint: corrupt parameter vector");
  return pv;
}

void MetaLearner::save(const std::string& path,
                       const ParamVector& theta) const {
  to_kvdoc(theta).save(path);
}

ParamVector MetaLearner::load(const std::string& path) const {
  return params_from_kvdoc(io::KvDoc::load(path));
}

}  // namespace arml::meta
