#include "arml/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "arml/numeric.hpp"

namespace arml::ad {

const Mat& Value::val() const {
  if (!g_) throw std::runtime_error("autodiff: empty value handle");
  return g_->evaluate(*this);
}

double Value::scalar() const {
  const Mat& m = val();
  if (m.rows() != 1 || m.cols() != 1)
    throw std::runtime_error("autodiff: scalar() on non 1x1 value");
  return m(0, 0);
}

int Value::rows() const { return g_->node(id_).rows; }
int Value::cols() const { return g_->node(id_).cols; }

namespace {

bool broadcastable(int ar, int ac, int br, int bc, int& orr, int& oc) {
  // same shape | 1x1 vs anything | row vector vs matrix | col vector vs matrix
  auto fits = [](int xr, int xc, int yr, int yc) {
    return (xr == yr && xc == yc) || (xr == 1 && xc == 1) ||
           (xr == 1 && xc == yc) || (xc == 1 && xr == yr);
  };
  if (ar == br && ac == bc) {
    orr = ar;
    oc = ac;
    return true;
  }
  if (fits(ar, ac, br, bc)) {
    orr = br;
    oc = bc;
    return true;
  }
  if (fits(br, bc, ar, ac)) {
    orr = ar;
    oc = ac;
    return true;
  }
  return false;
}

Mat broadcast_to(const Mat& m, int r, int c) {
  if (m.rows() == r && m.cols() == c) return m;
  if (m.rows() == 1 && m.cols() == 1) return Mat::Constant(r, c, m(0, 0));
  if (m.rows() == 1 && m.cols() == c) return m.replicate(r, 1);
  if (m.cols() == 1 && m.rows() == r) return m.replicate(1, c);
  throw std::runtime_error("autodiff: incompatible broadcast");
}

Mat first_min_mask(const Mat& x) {
  Mat mask = Mat::Zero(x.rows(), x.cols());
  for (int j = 0; j < x.cols(); ++j) {
    int best = 0;
    for (int i = 1; i < x.rows(); ++i)
      if (x(i, j) < x(best, j)) best = i;
    mask(best, j) = 1.0;
  }
  return mask;
}

Mat first_max_mask(const Mat& x) {
  Mat mask = Mat::Zero(x.rows(), x.cols());
  for (int j = 0; j < x.cols(); ++j) {
    int best = 0;
    for (int i = 1; i < x.rows(); ++i)
      if (x(i, j) > x(best, j)) best = i;
    mask(best, j) = 1.0;
  }
  return mask;
}

}  // namespace

Value Graph::leaf(const std::string& name, int rows, int cols) {
  Node n;
  n.op = Op::kLeaf;
  n.rows = rows;
  n.cols = cols;
  n.name = name;
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<int>(nodes_.size()) - 1);
}

Value Graph::leaf(const std::string& name, const Mat& v) {
  Value out = leaf(name, static_cast<int>(v.rows()), static_cast<int>(v.cols()));
  nd(out.id()).val = v;
  nd(out.id()).has_val = true;
  return out;
}

Value Graph::constant(const Mat& v) {
  Node n;
  n.op = Op::kConst;
  n.rows = static_cast<int>(v.rows());
  n.cols = static_cast<int>(v.cols());
  n.val = v;
  n.has_val = true;
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<int>(nodes_.size()) - 1);
}

Value Graph::constant(double s) { return constant(Mat::Constant(1, 1, s)); }

void Graph::bind(const Value& leaf_value, const Mat& v) {
  Node& n = nd(leaf_value.id());
  if (n.op != Op::kLeaf) throw std::runtime_error("autodiff: bind on non-leaf");
  if (v.rows() != n.rows || v.cols() != n.cols)
    throw std::runtime_error("autodiff: bind shape mismatch for leaf '" +
                             n.name + "'");
  n.val = v;
  n.has_val = true;
  for (Node& m : nodes_)
    if (m.op != Op::kLeaf && m.op != Op::kConst) m.has_val = false;
}

bool Graph::inputs_ready(const Node& n) const {
  for (int in : {n.a, n.b, n.c})
    if (in >= 0 && !nodes_[static_cast<std::size_t>(in)].has_val) return false;
  return true;
}

Value Graph::make(Op op, int a, int b, int c, double p0, int i0, int i1) {
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.c = c;
  n.p0 = p0;
  n.i0 = i0;
  n.i1 = i1;
  infer_shape(n);
  if (inputs_ready(n)) compute(n);
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<int>(nodes_.size()) - 1);
}

void Graph::infer_shape(Node& n) const {
  auto R = [&](int id) { return nodes_[static_cast<std::size_t>(id)].rows; };
  auto C = [&](int id) { return nodes_[static_cast<std::size_t>(id)].cols; };
  switch (n.op) {
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      if (!broadcastable(R(n.a), C(n.a), R(n.b), C(n.b), n.rows, n.cols))
        throw std::runtime_error("autodiff: shape mismatch in elementwise op");
      break;
    }
    case Op::kNeg:
    case Op::kSin:
    case Op::kCos:
    case Op::kExp:
    case Op::kLog:
    case Op::kSoftplus:
    case Op::kSigmoid:
    case Op::kRelu:
    case Op::kReluGrad:
    case Op::kLeakyRelu:
    case Op::kLeakyReluGrad:
    case Op::kGe0Mask:
    case Op::kArgMinMask:
    case Op::kArgMaxMask:
      n.rows = R(n.a);
      n.cols = C(n.a);
      break;
    case Op::kMatMul:
      if (C(n.a) != R(n.b))
        throw std::runtime_error("autodiff: matmul inner dim mismatch");
      n.rows = R(n.a);
      n.cols = C(n.b);
      break;
    case Op::kTranspose:
      n.rows = C(n.a);
      n.cols = R(n.a);
      break;
    case Op::kRowSum:
      n.rows = R(n.a);
      n.cols = 1;
      break;
    case Op::kColSum:
    case Op::kColMin:
    case Op::kColMax:
    case Op::kSetMean:
      n.rows = 1;
      n.cols = C(n.a);
      break;
    case Op::kSumAll:
      n.rows = 1;
      n.cols = 1;
      break;
    case Op::kRepeatRows:
      if (R(n.a) != 1) throw std::runtime_error("autodiff: repeat_rows needs 1xC");
      n.rows = n.i0;
      n.cols = C(n.a);
      break;
    case Op::kRepeatCols:
      if (C(n.a) != 1) throw std::runtime_error("autodiff: repeat_cols needs Rx1");
      n.rows = R(n.a);
      n.cols = n.i0;
      break;
    case Op::kWhereGe0:
      if (R(n.a) != R(n.b) || C(n.a) != C(n.b) || R(n.a) != R(n.c) ||
          C(n.a) != C(n.c))
        throw std::runtime_error("autodiff: where_ge0 needs equal shapes");
      n.rows = R(n.b);
      n.cols = C(n.b);
      break;
    case Op::kConcatCols:
      if (R(n.a) != R(n.b))
        throw std::runtime_error("autodiff: concat_cols row mismatch");
      n.rows = R(n.a);
      n.cols = C(n.a) + C(n.b);
      break;
    case Op::kSliceCols:
      if (n.i0 < 0 || n.i0 + n.i1 > C(n.a))
        throw std::runtime_error("autodiff: slice_cols out of range");
      n.rows = R(n.a);
      n.cols = n.i1;
      break;
    case Op::kPadCols:
      if (n.i1 < 0 || n.i1 + C(n.a) > n.i0)
        throw std::runtime_error("autodiff: pad_cols out of range");
      n.rows = R(n.a);
      n.cols = n.i0;
      break;
    case Op::kLeaf:
    case Op::kConst:
      break;
  }
}

void Graph::compute(Node& n) {
  auto V = [&](int id) -> const Mat& {
    return nodes_[static_cast<std::size_t>(id)].val;
  };
  switch (n.op) {
    case Op::kLeaf:
      throw std::runtime_error("autodiff: unbound leaf '" + n.name + "'");
    case Op::kConst:
      break;
    case Op::kAdd:
      n.val = broadcast_to(V(n.a), n.rows, n.cols).array() +
              broadcast_to(V(n.b), n.rows, n.cols).array();
      break;
    case Op::kSub:
      n.val = broadcast_to(V(n.a), n.rows, n.cols).array() -
              broadcast_to(V(n.b), n.rows, n.cols).array();
      break;
    case Op::kMul:
      n.val = broadcast_to(V(n.a), n.rows, n.cols).array() *
              broadcast_to(V(n.b), n.rows, n.cols).array();
      break;
    case Op::kDiv:
      n.val = broadcast_to(V(n.a), n.rows, n.cols).array() /
              broadcast_to(V(n.b), n.rows, n.cols).array();
      break;
    case Op::kNeg:
      n.val = -V(n.a);
      break;
    case Op::kMatMul:
      n.val = V(n.a) * V(n.b);
      break;
    case Op::kTranspose:
      n.val = V(n.a).transpose();
      break;
    case Op::kRowSum:
      n.val = V(n.a).rowwise().sum();
      break;
    case Op::kColSum:
      n.val = V(n.a).colwise().sum();
      break;
    case Op::kSumAll:
      n.val = Mat::Constant(1, 1, V(n.a).sum());
      break;
    case Op::kRepeatRows:
      n.val = V(n.a).replicate(n.i0, 1);
      break;
    case Op::kRepeatCols:
      n.val = V(n.a).replicate(1, n.i0);
      break;
    case Op::kSetMean: {
      const Mat& x = V(n.a);
      n.val.resize(1, x.cols());
      std::vector<double> col(static_cast<std::size_t>(x.rows()));
      for (int j = 0; j < x.cols(); ++j) {
        for (int i = 0; i < x.rows(); ++i)
          col[static_cast<std::size_t>(i)] = x(i, j);
        n.val(0, j) = stable_mean(col);
      }
      break;
    }
    case Op::kSin:
      n.val = V(n.a).array().sin();
      break;
    case Op::kCos:
      n.val = V(n.a).array().cos();
      break;
    case Op::kExp:
      n.val = V(n.a).array().exp();
      break;
    case Op::kLog:
      n.val = V(n.a).array().log();
      break;
    case Op::kSoftplus:
      // log(1+e^x) with the usual overflow-safe split
      n.val = V(n.a).unaryExpr([](double x) {
        return x > 30.0 ? x : std::log1p(std::exp(x));
      });
      break;
    case Op::kSigmoid:
      n.val = V(n.a).unaryExpr(
          [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
      break;
    case Op::kRelu:
      n.val = V(n.a).cwiseMax(0.0);
      break;
    case Op::kReluGrad:
      n.val = V(n.a).unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
      break;
    case Op::kLeakyRelu: {
      double s = n.p0;
      n.val = V(n.a).unaryExpr([s](double x) { return x > 0.0 ? x : s * x; });
      break;
    }
    case Op::kLeakyReluGrad: {
      // slope branch at exactly zero, matching the flow inversion convention
      double s = n.p0;
      n.val = V(n.a).unaryExpr([s](double x) { return x > 0.0 ? 1.0 : s; });
      break;
    }
    case Op::kColMin:
      n.val = V(n.a).colwise().minCoeff();
      break;
    case Op::kColMax:
      n.val = V(n.a).colwise().maxCoeff();
      break;
    case Op::kArgMinMask:
      n.val = first_min_mask(V(n.a));
      break;
    case Op::kArgMaxMask:
      n.val = first_max_mask(V(n.a));
      break;
    case Op::kGe0Mask:
      n.val = V(n.a).unaryExpr([](double x) { return x >= 0.0 ? 1.0 : 0.0; });
      break;
    case Op::kWhereGe0: {
      const Mat& c = V(n.a);
      const Mat& x = V(n.b);
      const Mat& y = V(n.c);
      n.val.resize(n.rows, n.cols);
      for (int i = 0; i < n.rows; ++i)
        for (int j = 0; j < n.cols; ++j)
          n.val(i, j) = c(i, j) >= 0.0 ? x(i, j) : y(i, j);
      break;
    }
    case Op::kConcatCols: {
      n.val.resize(n.rows, n.cols);
      n.val.leftCols(V(n.a).cols()) = V(n.a);
      n.val.rightCols(V(n.b).cols()) = V(n.b);
      break;
    }
    case Op::kSliceCols:
      n.val = V(n.a).middleCols(n.i0, n.i1);
      break;
    case Op::kPadCols: {
      n.val = Mat::Zero(n.rows, n.cols);
      n.val.middleCols(n.i1, V(n.a).cols()) = V(n.a);
      break;
    }
  }
  n.has_val = true;
}

const Mat& Graph::evaluate(const Value& v) {
  if (v.graph() != this) throw std::runtime_error("autodiff: foreign value");
  for (int id = 0; id <= v.id(); ++id) {
    Node& n = nd(id);
    if (!n.has_val) compute(n);
  }
  return nd(v.id()).val;
}

Value Graph::detach(const Value& v) { return constant(evaluate(v)); }

namespace {

Value reduce_to_shape(Value v, int rows, int cols) {
  if (v.rows() == rows && v.cols() == cols) return v;
  if (rows == 1 && cols == 1) return sum_all(v);
  if (rows == 1 && cols == v.cols()) return col_sum(v);
  if (cols == 1 && rows == v.rows()) return row_sum(v);
  throw std::runtime_error("autodiff: cannot reduce adjoint to input shape");
}

}  // namespace

std::vector<Value> Graph::gradient(const Value& root,
                                   const std::vector<Value>& wrt) {
  if (root.graph() != this) throw std::runtime_error("autodiff: foreign root");
  if (root.rows() != 1 || root.cols() != 1)
    throw std::runtime_error("autodiff: gradient root must be scalar");
  evaluate(root);

  const int root_id = root.id();
  std::vector<Value> adj(static_cast<std::size_t>(root_id) + 1);
  adj[static_cast<std::size_t>(root_id)] = constant(1.0);

  auto accumulate = [&](int id, Value contrib) {
    if (id < 0 || id > root_id) return;
    const Node& in = node(id);
    Value reduced = reduce_to_shape(contrib, in.rows, in.cols);
    auto& slot = adj[static_cast<std::size_t>(id)];
    slot = slot.valid() ? add(slot, reduced) : reduced;
  };

  for (int id = root_id; id >= 0; --id) {
    Value g = adj[static_cast<std::size_t>(id)];
    if (!g.valid()) continue;
    const Node n = node(id);  // copy: nodes_ may grow below
    Value self(this, id);
    Value va(this, n.a), vb(this, n.b), vc(this, n.c);
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kAdd:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::kSub:
        accumulate(n.a, g);
        accumulate(n.b, neg(g));
        break;
      case Op::kMul:
        accumulate(n.a, mul(g, vb));
        accumulate(n.b, mul(g, va));
        break;
      case Op::kDiv:
        accumulate(n.a, divide(g, vb));
        accumulate(n.b, neg(mul(g, divide(va, mul(vb, vb)))));
        break;
      case Op::kNeg:
        accumulate(n.a, neg(g));
        break;
      case Op::kMatMul:
        accumulate(n.a, matmul(g, transpose(vb)));
        accumulate(n.b, matmul(transpose(va), g));
        break;
      case Op::kTranspose:
        accumulate(n.a, transpose(g));
        break;
      case Op::kRowSum:
        accumulate(n.a, repeat_cols(g, node(n.a).cols));
        break;
      case Op::kColSum:
        accumulate(n.a, repeat_rows(g, node(n.a).rows));
        break;
      case Op::kSumAll: {
        Value ones = constant(Mat::Ones(node(n.a).rows, node(n.a).cols));
        accumulate(n.a, mul(ones, g));
        break;
      }
      case Op::kRepeatRows:
        accumulate(n.a, col_sum(g));
        break;
      case Op::kRepeatCols:
        accumulate(n.a, row_sum(g));
        break;
      case Op::kSetMean: {
        double inv_n = 1.0 / static_cast<double>(node(n.a).rows);
        accumulate(n.a, repeat_rows(mul(g, constant(inv_n)), node(n.a).rows));
        break;
      }
      case Op::kSin:
        accumulate(n.a, mul(g, cos_v(va)));
        break;
      case Op::kCos:
        accumulate(n.a, neg(mul(g, sin_v(va))));
        break;
      case Op::kExp:
        accumulate(n.a, mul(g, self));
        break;
      case Op::kLog:
        accumulate(n.a, divide(g, va));
        break;
      case Op::kSoftplus:
        accumulate(n.a, mul(g, sigmoid(va)));
        break;
      case Op::kSigmoid:
        accumulate(n.a, mul(g, mul(self, sub(constant(1.0), self))));
        break;
      case Op::kRelu:
        accumulate(n.a, mul(g, make(Op::kReluGrad, n.a, -1, -1, 0, 0, 0)));
        break;
      case Op::kLeakyRelu:
        accumulate(n.a,
                   mul(g, make(Op::kLeakyReluGrad, n.a, -1, -1, n.p0, 0, 0)));
        break;
      case Op::kReluGrad:
      case Op::kLeakyReluGrad:
      case Op::kArgMinMask:
      case Op::kArgMaxMask:
      case Op::kGe0Mask:
        break;  // piecewise constant
      case Op::kColMin:
        accumulate(n.a, mul(make(Op::kArgMinMask, n.a, -1, -1, 0, 0, 0),
                            repeat_rows(g, node(n.a).rows)));
        break;
      case Op::kColMax:
        accumulate(n.a, mul(make(Op::kArgMaxMask, n.a, -1, -1, 0, 0, 0),
                            repeat_rows(g, node(n.a).rows)));
        break;
      case Op::kWhereGe0: {
        Value mask = make(Op::kGe0Mask, n.a, -1, -1, 0, 0, 0);
        accumulate(n.b, mul(g, mask));
        accumulate(n.c, mul(g, sub(constant(1.0), mask)));
        break;
      }
      case Op::kConcatCols:
        accumulate(n.a, slice_cols(g, 0, node(n.a).cols));
        accumulate(n.b, slice_cols(g, node(n.a).cols, node(n.b).cols));
        break;
      case Op::kSliceCols:
        accumulate(n.a, make(Op::kPadCols, g.id(), -1, -1, 0, node(n.a).cols,
                             n.i0));
        break;
      case Op::kPadCols:
        accumulate(n.a, slice_cols(g, n.i1, node(n.a).cols));
        break;
    }
  }

  std::vector<Value> out;
  out.reserve(wrt.size());
  for (const Value& w : wrt) {
    if (w.graph() != this) throw std::runtime_error("autodiff: foreign wrt");
    Value g = w.id() <= root_id ? adj[static_cast<std::size_t>(w.id())]
                                : Value();
    if (!g.valid()) g = constant(Mat::Zero(w.rows(), w.cols()));
    out.push_back(g);
  }
  return out;
}

// ---- free-function builders ----

namespace {
Graph* common_graph(Value a, Value b) {
  if (!a.valid() || !b.valid() || a.graph() != b.graph())
    throw std::runtime_error("autodiff: values from different graphs");
  return a.graph();
}
}  // namespace

Value add(Value a, Value b) {
  return common_graph(a, b)->make(Op::kAdd, a.id(), b.id(), -1, 0, 0, 0);
}
Value sub(Value a, Value b) {
  return common_graph(a, b)->make(Op::kSub, a.id(), b.id(), -1, 0, 0, 0);
}
Value mul(Value a, Value b) {
  return common_graph(a, b)->make(Op::kMul, a.id(), b.id(), -1, 0, 0, 0);
}
Value divide(Value a, Value b) {
  return common_graph(a, b)->make(Op::kDiv, a.id(), b.id(), -1, 0, 0, 0);
}
Value neg(Value a) {
  return a.graph()->make(Op::kNeg, a.id(), -1, -1, 0, 0, 0);
}
Value matmul(Value a, Value b) {
  return common_graph(a, b)->make(Op::kMatMul, a.id(), b.id(), -1, 0, 0, 0);
}
Value transpose(Value a) {
  return a.graph()->make(Op::kTranspose, a.id(), -1, -1, 0, 0, 0);
}
Value row_sum(Value a) {
  return a.graph()->make(Op::kRowSum, a.id(), -1, -1, 0, 0, 0);
}
Value col_sum(Value a) {
  return a.graph()->make(Op::kColSum, a.id(), -1, -1, 0, 0, 0);
}
Value sum_all(Value a) {
  return a.graph()->make(Op::kSumAll, a.id(), -1, -1, 0, 0, 0);
}
Value repeat_rows(Value a, int n) {
  return a.graph()->make(Op::kRepeatRows, a.id(), -1, -1, 0, n, 0);
}
Value repeat_cols(Value a, int n) {
  return a.graph()->make(Op::kRepeatCols, a.id(), -1, -1, 0, n, 0);
}
Value set_mean(Value a) {
  return a.graph()->make(Op::kSetMean, a.id(), -1, -1, 0, 0, 0);
}
Value sin_v(Value a) {
  return a.graph()->make(Op::kSin, a.id(), -1, -1, 0, 0, 0);
}
Value cos_v(Value a) {
  return a.graph()->make(Op::kCos, a.id(), -1, -1, 0, 0, 0);
}
Value exp_v(Value a) {
  return a.graph()->make(Op::kExp, a.id(), -1, -1, 0, 0, 0);
}
Value log_v(Value a) {
  return a.graph()->make(Op::kLog, a.id(), -1, -1, 0, 0, 0);
}
Value softplus(Value a) {
  return a.graph()->make(Op::kSoftplus, a.id(), -1, -1, 0, 0, 0);
}
Value sigmoid(Value a) {
  return a.graph()->make(Op::kSigmoid, a.id(), -1, -1, 0, 0, 0);
}
Value relu(Value a) {
  return a.graph()->make(Op::kRelu, a.id(), -1, -1, 0, 0, 0);
}
Value leaky_relu(Value a, double slope) {
  return a.graph()->make(Op::kLeakyRelu, a.id(), -1, -1, slope, 0, 0);
}
Value leaky_relu_grad(Value a, double slope) {
  return a.graph()->make(Op::kLeakyReluGrad, a.id(), -1, -1, slope, 0, 0);
}
Value col_min(Value a) {
  return a.graph()->make(Op::kColMin, a.id(), -1, -1, 0, 0, 0);
}
Value col_max(Value a) {
  return a.graph()->make(Op::kColMax, a.id(), -1, -1, 0, 0, 0);
}
Value where_ge0(Value cond, Value a, Value b) {
  if (cond.graph() != a.graph() || a.graph() != b.graph())
    throw std::runtime_error("autodiff: values from different graphs");
  return a.graph()->make(Op::kWhereGe0, cond.id(), a.id(), b.id(), 0, 0, 0);
}
Value concat_cols(Value a, Value b) {
  return common_graph(a, b)->make(Op::kConcatCols, a.id(), b.id(), -1, 0, 0, 0);
}
Value slice_cols(Value a, int first, int width) {
  return a.graph()->make(Op::kSliceCols, a.id(), -1, -1, 0, first, width);
}
Value dot(Value a, Value b) { return matmul(transpose(a), b); }

Value operator+(Value a, double s) { return add(a, a.graph()->constant(s)); }
Value operator+(double s, Value a) { return add(a.graph()->constant(s), a); }
Value operator-(Value a, double s) { return sub(a, a.graph()->constant(s)); }
Value operator-(double s, Value a) { return sub(a.graph()->constant(s), a); }
Value operator*(Value a, double s) { return mul(a, a.graph()->constant(s)); }
Value operator*(double s, Value a) { return mul(a.graph()->constant(s), a); }
Value operator/(Value a, double s) { return divide(a, a.graph()->constant(s)); }
Value operator/(double s, Value a) { return divide(a.graph()->constant(s), a); }

}  // namespace arml::ad
