// Dense reverse-mode differentiation over Eigen matrices.
//
// Every quantity is a rank-1 or rank-2 row-major double matrix. A Graph is a
// tape: each op evaluates eagerly, appends a node, and (when any input needs a
// gradient) records a closure that pushes the output gradient back to its
// inputs. Graph::backward walks the tape once in reverse order.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zerommt {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using BoolMask = Eigen::Array<bool, Eigen::Dynamic, 1>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Graph;

/// Handle to a node on a Graph tape.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  [[nodiscard]] double scalar() const;
};

/// Multi-head attention over packed sequences. Each segment maps a block of
/// query rows onto a block of key rows; blocks never see each other.
struct AttentionSegment {
  Eigen::Index q_begin = 0;
  Eigen::Index q_len = 0;
  Eigen::Index k_begin = 0;
  Eigen::Index k_len = 0;
};

struct AttentionLayout {
  std::vector<AttentionSegment> segments;
  int n_heads = 1;
  bool causal = false;  // query i attends to keys j <= i within its segment
  BoolMask key_allowed;  // empty = all keys allowed; else one flag per key row
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Leaf holding a copy of `value`; never receives a gradient.
  Var constant(Matrix value);
  /// Leaf that refers to external storage. `value` must outlive the graph.
  /// Trainable leaves receive a gradient on backward; frozen ones receive none.
  Var leaf(const Matrix& value, bool trainable);

  [[nodiscard]] const Matrix& value(Var v) const;
  /// Gradient of the last backward() target w.r.t. v; nullptr when v is
  /// frozen, constant, or unreachable from the loss.
  [[nodiscard]] const Matrix* grad(Var v) const;
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  void backward(Var loss);

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] bool backward_done() const { return backward_done_; }

  /// Hash of every ReLU activation pattern on the tape. Two evaluations with
  /// equal signatures lie on the same linear piece of every ReLU.
  [[nodiscard]] std::uint64_t relu_signature() const { return relu_signature_; }

  // Op-implementation interface.
  using BackwardFn = std::function<void(Graph&, int self)>;
  Var push(Matrix value, std::string_view op, std::span<const Var> inputs, BackwardFn fn);
  Var push(Matrix value, std::string_view op, std::initializer_list<Var> inputs, BackwardFn fn) {
    return push(std::move(value), op, std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }
  Matrix& grad_buffer(int id);
  [[nodiscard]] const Matrix& grad_of(int id) const { return nodes_[id].grad; }
  void mix_relu_signature(std::uint64_t h);

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix grad;
    BackwardFn backward;
    const char* op = "";
    bool requires_grad = false;
    bool is_leaf = false;
  };
  [[nodiscard]] const Matrix& node_value(const Node& n) const { return n.external ? *n.external : n.owned; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::uint64_t relu_signature_ = 0x9e3779b97f4a7c15ULL;
};

// ---- ops ------------------------------------------------------------------

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// Adds a 1 x cols row vector to every row of `a`.
Var add_bias(Var a, Var bias);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
/// Row-wise softmax with max subtraction.
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Row-wise layer normalization followed by gain and bias (both 1 x cols).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Gathers rows of `table`.
Var embedding(Var table, std::span<const int> ids);
/// Stacks row blocks vertically.
Var concat_rows(std::span<const Var> parts);
Var sum(Var a);
/// Sum over rows of -log softmax(logits)[row, target[row]], each row scaled by
/// `weights[row]` when weights are given.
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights = {});
/// Sum over rows of KL(p_row || softmax(logits_row)); `target_probs` is a
/// constant. log q is floored at log(floor) and terms with p == 0 vanish.
Var kl_divergence_rows(const Matrix& target_probs, Var logits, double floor = 1e-12);
/// Scaled dot-product multi-head attention over packed segments. q is
/// [Nq x d], k and v are [Nk x d]. When `probs_out` is non-null, receives one
/// [Nq x Nk] matrix per head (zero outside each segment block).
Var attention(Var q, Var k, Var v, const AttentionLayout& layout, std::vector<Matrix>* probs_out = nullptr);

// ---- plain (tape-free) helpers ---------------------------------------------

/// Numerically stable softmax of a vector-like Eigen expression.
template <typename Derived>
Vector softmax(const Eigen::MatrixBase<Derived>& logits) {
  Vector x = logits.template cast<double>();
  const double m = x.maxCoeff();
  Vector e = (x.array() - m).exp().matrix();
  return e / e.sum();
}

template <typename Derived>
Vector log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  Vector x = logits.template cast<double>();
  const double m = x.maxCoeff();
  const double lse = m + std::log((x.array() - m).exp().sum());
  return (x.array() - lse).matrix();
}

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
double relative_error(double analytic, double numeric);

struct GradCheckOptions {
  double eps = 1e-4;
  /// Check at most this many coordinates (uniformly spread); 0 = all.
  std::size_t max_coordinates = 0;
};

/// Builds f(point) on a fresh graph, compares the analytic gradient with
/// central differences and returns the max relative error. Coordinates whose
/// +-eps perturbation changes the ReLU pattern are skipped.
double grad_check(const std::function<Var(Graph&, Var)>& op, const Matrix& point, double eps = 1e-4);
double grad_check(const std::function<Var(Graph&, Var)>& op, const Matrix& point, const GradCheckOptions& opts);

std::string shape_string(const Matrix& m);

}  // namespace zerommt
