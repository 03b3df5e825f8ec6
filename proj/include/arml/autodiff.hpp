#pragma once

#include <Eigen/Dense>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

namespace arml::ad {

using Mat = Eigen::MatrixXd;

enum class Op {
  kLeaf,
  kConst,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kMatMul,
  kTranspose,
  kRowSum,
  kColSum,
  kSumAll,
  kRepeatRows,
  kRepeatCols,
  kSetMean,
  kSin,
  kCos,
  kExp,
  kLog,
  kSoftplus,
  kSigmoid,
  kRelu,
  kReluGrad,
  kLeakyRelu,
  kLeakyReluGrad,
  kColMin,
  kColMax,
  kArgMinMask,
  kArgMaxMask,
  kGe0Mask,
  kWhereGe0,
  kConcatCols,
  kSliceCols,
  kPadCols,
};

class Graph;

// Handle to a node inside a Graph. Cheap to copy; the graph owns the data.
class Value {
 public:
  Value() = default;
  Graph* graph() const { return g_; }
  int id() const { return id_; }
  bool valid() const { return g_ != nullptr; }
  const Mat& val() const;
  double scalar() const;
  int rows() const;
  int cols() const;

 private:
  friend class Graph;
  Value(Graph* g, int id) : g_(g), id_(id) {}
  Graph* g_ = nullptr;
  int id_ = -1;
};

// Reverse-mode expression graph over dense real matrices. Nodes are created
// in topological order and evaluated eagerly when their inputs are bound.
// The reverse pass builds adjoints as ordinary graph nodes, so gradients are
// themselves differentiable (second-order gradients fall out of a second
// reverse pass).
//
// A graph is a single-owner, single-threaded object. Independent graphs may
// live on different threads.
class Graph {
 public:
  struct Node {
    Op op;
    int a = -1, b = -1, c = -1;
    double p0 = 0.0;  // leaky slope, scale, ...
    int i0 = 0, i1 = 0;
    int rows = 0, cols = 0;
    Mat val;
    bool has_val = false;
    std::string name;  // leaves only
  };

  Value leaf(const std::string& name, int rows, int cols);
  Value leaf(const std::string& name, const Mat& v);
  Value constant(const Mat& v);
  Value constant(double s);

  void bind(const Value& leaf_value, const Mat& v);
  // Forward-evaluates every node up to v (in creation order) and returns the
  // cached value. Throws if an unbound leaf is reached, naming the leaf.
  const Mat& evaluate(const Value& v);

  // Reverse pass from a scalar root. Returns one adjoint per entry of `wrt`;
  // leaves that do not influence the root get a zero constant. The adjoints
  // are graph nodes and can be differentiated again.
  std::vector<Value> gradient(const Value& root, const std::vector<Value>& wrt);

  // Constant copy of v's value; blocks any further gradient flow.
  Value detach(const Value& v);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  // Op builders (used by the free-function helpers below).
  Value make(Op op, int a, int b, int c, double p0, int i0, int i1);

 private:
  friend class Value;
  Node& nd(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  void infer_shape(Node& n) const;
  void compute(Node& n);
  bool inputs_ready(const Node& n) const;

  std::deque<Node> nodes_;
};

// ---- builders ----
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value divide(Value a, Value b);
Value neg(Value a);
Value matmul(Value a, Value b);
Value transpose(Value a);
Value row_sum(Value a);
Value col_sum(Value a);
Value sum_all(Value a);
Value repeat_rows(Value a, int n);
Value repeat_cols(Value a, int n);
Value set_mean(Value a);
Value sin_v(Value a);
Value cos_v(Value a);
Value exp_v(Value a);
Value log_v(Value a);
Value softplus(Value a);
Value sigmoid(Value a);
Value relu(Value a);
Value leaky_relu(Value a, double slope);
Value leaky_relu_grad(Value a, double slope);  // piecewise-constant h'(a)
Value col_min(Value a);
Value col_max(Value a);
Value where_ge0(Value cond, Value a, Value b);
Value concat_cols(Value a, Value b);
Value slice_cols(Value a, int first, int width);
Value dot(Value a, Value b);  // column vectors -> 1x1

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }
inline Value operator/(Value a, Value b) { return divide(a, b); }
inline Value operator-(Value a) { return neg(a); }
Value operator+(Value a, double s);
Value operator+(double s, Value a);
Value operator-(Value a, double s);
Value operator-(double s, Value a);
Value operator*(Value a, double s);
Value operator*(double s, Value a);
Value operator/(Value a, double s);
Value operator/(double s, Value a);

}  // namespace arml::ad
