#pragma once

#include <Eigen/Dense>

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace msadgn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);

namespace detail {

// A value in the differentiation graph. Leaves have no backward function.
struct Node {
  Shape shape;
  Vector value;
  Vector grad;  // size 0 until first populated
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Vector& upstream)> backward;

  Vector& ensure_grad() {
    if (grad.size() != value.size()) grad = Vector::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

// Handle to a reverse-mode differentiable n-d array of doubles (row-major).
// Copies share the underlying node, so optimizer updates through one handle
// are visible through all of them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, Vector data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(const Eigen::Ref<const Matrix>& m, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
  Index size() const { return node_->value.size(); }

  const Vector& data() const { return node_->value; }
  // Direct write access for initializers and optimizers; bypasses the tape.
  Vector& mutable_data() { return node_->value; }
  double item() const;
  double at(std::initializer_list<Index> index) const;

  // Row-major view of a rank-2 tensor.
  Eigen::Map<const RowMatrix> mat() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const Vector& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  // Same values, cut from the graph.
  Tensor detach() const;

  const std::string& op() const { return node_->op; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor make_result(Shape shape, Vector value, std::string op,
                            std::vector<Tensor> inputs,
                            std::function<void(const Vector&)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

// Topologically ordered record of the graph reachable from a loss. Every
// node appears after all of its inputs.
class Tape {
 public:
  static Tape record(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

  // Runs each node's local backward exactly once, last to first. Leaf
  // gradients accumulate across calls; intermediate gradients are reset.
  void run_backward() const;

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

void backward(const Tensor& loss);

// While alive, operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- differentiable operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x[m x n] + bias[n] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor conv1d(const Tensor& x, const Tensor& w, Index stride, Index pad);
// x[batch x channels x len] + bias[channels].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
// Soft or one-hot targets, one row per sample.
Tensor cross_entropy(const Tensor& logits, const Eigen::Ref<const Matrix>& target_rows);
Tensor grad_reverse(const Tensor& x, double lambda);

Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten_rows(const Tensor& x);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& x, std::span<const Index> rows);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Central-difference check of every element of `params` against autodiff.
// Returns max |ad - fd| / max(1e-8, |ad| + |fd|).
double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                         double eps);
// Autodiff of f against central differences of a separate scalar function.
// Needed where the backward pass is deliberately not the derivative of the
// forward value, as with grad_reverse.
double finite_diff_check(const std::function<Tensor()>& f, const std::function<double()>& reference,
                         std::span<Tensor> params, double eps);

}  // namespace msadgn
