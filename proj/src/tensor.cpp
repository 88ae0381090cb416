#include "msadgn/tensor.hpp"

#include "msadgn/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace msadgn {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::from(Shape shape, Vector data, bool requires_grad) {
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                         " values but data has " + std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->op = "leaf";
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const Index n = numel(shape);
  return from(std::move(shape), Vector::Zero(n), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, Vector::Constant(1, value), requires_grad);
}

Tensor Tensor::matrix(const Eigen::Ref<const Matrix>& m, bool requires_grad) {
  RowMatrix rm = m;
  return from({m.rows(), m.cols()}, Eigen::Map<const Vector>(rm.data(), rm.size()), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
  Vector v(static_cast<Index>(values.size()));
  Index i = 0;
  for (double x : values) v[i++] = x;
  const Index n = v.size();  // argument order is unspecified; read before the move
  return from({n}, std::move(v), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<Index> index) const {
  if (static_cast<Index>(index.size()) != rank()) throw DimensionError("index rank mismatch");
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= node_->shape[axis]) throw DimensionError("index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

Eigen::Map<const RowMatrix> Tensor::mat() const {
  if (rank() != 2) throw DimensionError("mat() expects rank 2, got " + to_string(shape()));
  return {node_->value.data(), dim(0), dim(1)};
}

Tensor Tensor::detach() const { return from(shape(), data(), false); }

Tensor Tensor::make_result(Shape shape, Vector value, std::string op, std::vector<Tensor> inputs,
                           std::function<void(const Vector&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::move(op);
  const bool needs = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    for (auto& t : inputs) node->parents.push_back(t.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// ---- Tape ------------------------------------------------------------------

Tape Tape::record(const Tensor& loss) {
  Tape tape;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS: (node, next parent to visit).
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr parent = node->parents[next++];
      if (seen.insert(parent.get()).second) stack.emplace_back(std::move(parent), 0);
      continue;
    }
    tape.nodes_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

void Tape::run_backward() const {
  if (nodes_.empty()) return;
  for (const auto& node : nodes_) {
    if (node->backward) {
      node->grad = Vector::Zero(node->value.size());
    } else if (node->requires_grad) {
      node->ensure_grad();
    }
  }
  const NodePtr& root = nodes_.back();
  root->ensure_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = **it;
    if (node.backward) node.backward(node.grad);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  Tape::record(loss).run_backward();
}

// ---- operations ------------------------------------------------------------

namespace {

void accumulate(const NodePtr& node, const Vector& g) {
  if (node->requires_grad) node->ensure_grad() += g;
}

void require_rank(const Tensor& t, Index rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
  }
}

void require_finite(const Vector& v, const char* op) {
  if (!v.allFinite()) throw NumericError(std::string(op) + ": non-finite input");
}

RowMatrix rows_softmax(const Eigen::Ref<const RowMatrix>& x) {
  RowMatrix y = (x.colwise() - x.rowwise().maxCoeff()).array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

RowMatrix rows_log_softmax(const Eigen::Ref<const RowMatrix>& x) {
  const Eigen::VectorXd mx = x.rowwise().maxCoeff();
  RowMatrix shifted = x.colwise() - mx;
  const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
  shifted.colwise() -= lse;
  return shifted;
}

Vector flat(const RowMatrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  RowMatrix out = a.mat() * b.mat();
  NodePtr an = a.node(), bn = b.node();
  return Tensor::make_result({m, n}, flat(out), "matmul", {a, b}, [an, bn, m, k, n](const Vector& g) {
    Eigen::Map<const RowMatrix> G(g.data(), m, n);
    Eigen::Map<const RowMatrix> A(an->value.data(), m, k);
    Eigen::Map<const RowMatrix> B(bn->value.data(), k, n);
    if (an->requires_grad) {
      Eigen::Map<RowMatrix>(an->ensure_grad().data(), m, k).noalias() += G * B.transpose();
    }
    if (bn->requires_grad) {
      Eigen::Map<RowMatrix>(bn->ensure_grad().data(), k, n).noalias() += A.transpose() * G;
    }
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  if (bias.size() != x.dim(1)) {
    throw DimensionError("add_row_bias: bias " + to_string(bias.shape()) + " vs input " +
                         to_string(x.shape()));
  }
  const Index m = x.dim(0), n = x.dim(1);
  RowMatrix out = x.mat().rowwise() + bias.data().transpose();
  NodePtr xn = x.node(), bn = bias.node();
  return Tensor::make_result(x.shape(), flat(out), "add_row_bias", {x, bias},
                             [xn, bn, m, n](const Vector& g) {
                               accumulate(xn, g);
                               if (bn->requires_grad) {
                                 Eigen::Map<const RowMatrix> G(g.data(), m, n);
                                 bn->ensure_grad() += G.colwise().sum().transpose();
                               }
                             });
}

Tensor conv1d(const Tensor& x, const Tensor& w, Index stride, Index pad) {
  require_rank(x, 3, "conv1d input");
  require_rank(w, 3, "conv1d kernel");
  if (stride < 1 || pad < 0) throw ParameterError("conv1d: stride must be >= 1 and pad >= 0");
  const Index batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const Index cout = w.dim(0), ksz = w.dim(2);
  if (w.dim(1) != cin) {
    throw DimensionError("conv1d: input " + to_string(x.shape()) + " vs kernel " +
                         to_string(w.shape()));
  }
  if (len + 2 * pad < ksz) {
    throw DimensionError("conv1d: padded length " + std::to_string(len + 2 * pad) +
                         " shorter than kernel " + std::to_string(ksz));
  }
  const Index lout = (len + 2 * pad - ksz) / stride + 1;
  const Index patch = cin * ksz;

  // im2col: one column per (sample, output position).
  auto cols = std::make_shared<Matrix>(Matrix::Zero(patch, batch * lout));
  const double* xv = x.data().data();
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < lout; ++t) {
      double* col = cols->col(b * lout + t).data();
      const Index start = t * stride - pad;
      for (Index c = 0; c < cin; ++c) {
        const double* row = xv + (b * cin + c) * len;
        for (Index k = 0; k < ksz; ++k) {
          const Index pos = start + k;
          if (pos >= 0 && pos < len) col[c * ksz + k] = row[pos];
        }
      }
    }
  }
  Eigen::Map<const RowMatrix> W(w.data().data(), cout, patch);
  const Matrix prod = W * (*cols);  // cout x (batch*lout)
  Vector out(batch * cout * lout);
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < cout; ++c) {
      for (Index t = 0; t < lout; ++t) out[(b * cout + c) * lout + t] = prod(c, b * lout + t);
    }
  }

  NodePtr xn = x.node(), wn = w.node();
  return Tensor::make_result(
      {batch, cout, lout}, std::move(out), "conv1d", {x, w},
      [xn, wn, cols, batch, cin, len, cout, ksz, lout, patch, stride, pad](const Vector& g) {
        Matrix G(cout, batch * lout);
        for (Index b = 0; b < batch; ++b) {
          for (Index c = 0; c < cout; ++c) {
            for (Index t = 0; t < lout; ++t) G(c, b * lout + t) = g[(b * cout + c) * lout + t];
          }
        }
        if (wn->requires_grad) {
          Eigen::Map<RowMatrix>(wn->ensure_grad().data(), cout, patch).noalias() +=
              G * cols->transpose();
        }
        if (xn->requires_grad) {
          Eigen::Map<const RowMatrix> W(wn->value.data(), cout, patch);
          const Matrix dcols = W.transpose() * G;
          double* dx = xn->ensure_grad().data();
          for (Index b = 0; b < batch; ++b) {
            for (Index t = 0; t < lout; ++t) {
              const double* col = dcols.col(b * lout + t).data();
              const Index start = t * stride - pad;
              for (Index c = 0; c < cin; ++c) {
                double* row = dx + (b * cin + c) * len;
                for (Index k = 0; k < ksz; ++k) {
                  const Index pos = start + k;
                  if (pos >= 0 && pos < len) row[pos] += col[c * ksz + k];
                }
              }
            }
          }
        }
      });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 3, "add_channel_bias");
  const Index batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  if (bias.size() != ch) {
    throw DimensionError("add_channel_bias: bias " + to_string(bias.shape()) + " vs input " +
                         to_string(x.shape()));
  }
  Vector out = x.data();
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < ch; ++c) out.segment((b * ch + c) * len, len).array() += bias.data()[c];
  }
  NodePtr xn = x.node(), bn = bias.node();
  return Tensor::make_result(x.shape(), std::move(out), "add_channel_bias", {x, bias},
                             [xn, bn, batch, ch, len](const Vector& g) {
                               accumulate(xn, g);
                               if (bn->requires_grad) {
                                 Vector& gb = bn->ensure_grad();
                                 for (Index b = 0; b < batch; ++b) {
                                   for (Index c = 0; c < ch; ++c) {
                                     gb[c] += g.segment((b * ch + c) * len, len).sum();
                                   }
                                 }
                               }
                             });
}

Tensor relu(const Tensor& x) {
  Vector out = x.data().cwiseMax(0.0);
  NodePtr xn = x.node();
  return Tensor::make_result(x.shape(), std::move(out), "relu", {x}, [xn](const Vector& g) {
    if (xn->requires_grad) {
      xn->ensure_grad().array() += (xn->value.array() > 0.0).select(g.array(), 0.0);
    }
  });
}

Tensor softmax(const Tensor& x) {
  require_rank(x, 2, "softmax");
  require_finite(x.data(), "softmax");
  const Index m = x.dim(0), n = x.dim(1);
  auto y = std::make_shared<RowMatrix>(rows_softmax(x.mat()));
  NodePtr xn = x.node();
  return Tensor::make_result(x.shape(), flat(*y), "softmax", {x}, [xn, y, m, n](const Vector& g) {
    if (!xn->requires_grad) return;
    Eigen::Map<const RowMatrix> G(g.data(), m, n);
    const Eigen::VectorXd dot = (G.array() * y->array()).rowwise().sum();
    RowMatrix dx = y->array() * (G.colwise() - dot).array();
    xn->ensure_grad() += flat(dx);
  });
}

Tensor log_softmax(const Tensor& x) {
  require_rank(x, 2, "log_softmax");
  require_finite(x.data(), "log_softmax");
  const Index m = x.dim(0), n = x.dim(1);
  const RowMatrix ls = rows_log_softmax(x.mat());
  auto y = std::make_shared<RowMatrix>(ls.array().exp());
  NodePtr xn = x.node();
  return Tensor::make_result(x.shape(), flat(ls), "log_softmax", {x},
                             [xn, y, m, n](const Vector& g) {
                               if (!xn->requires_grad) return;
                               Eigen::Map<const RowMatrix> G(g.data(), m, n);
                               const Eigen::VectorXd total = G.rowwise().sum();
                               RowMatrix dx = G - (y->array().colwise() * total.array()).matrix();
                               xn->ensure_grad() += flat(dx);
                             });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  const Index m = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(targets.size()) != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " rows");
  }
  Matrix onehot = Matrix::Zero(m, c);
  for (Index i = 0; i < m; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= c) {
      throw LabelError("cross_entropy: target " + std::to_string(t) + " outside [0," +
                       std::to_string(c) + ")");
    }
    onehot(i, t) = 1.0;
  }
  return cross_entropy(logits, onehot);
}

Tensor cross_entropy(const Tensor& logits, const Eigen::Ref<const Matrix>& target_rows) {
  require_rank(logits, 2, "cross_entropy");
  require_finite(logits.data(), "cross_entropy");
  const Index m = logits.dim(0), c = logits.dim(1);
  if (target_rows.rows() != m || target_rows.cols() != c) {
    throw DimensionError("cross_entropy: targets " +
                         to_string({target_rows.rows(), target_rows.cols()}) + " vs logits " +
                         to_string(logits.shape()));
  }
  const RowMatrix ls = rows_log_softmax(logits.mat());
  const double loss = -(ls.array() * target_rows.array()).sum() / static_cast<double>(m);
  auto probs = std::make_shared<RowMatrix>(ls.array().exp());
  auto targets = std::make_shared<RowMatrix>(target_rows);
  NodePtr ln = logits.node();
  return Tensor::make_result({1}, Vector::Constant(1, loss), "cross_entropy", {logits},
                             [ln, probs, targets, m](const Vector& g) {
                               if (!ln->requires_grad) return;
                               const Eigen::VectorXd mass = targets->rowwise().sum();
                               RowMatrix dx = (probs->array().colwise() * mass.array()).matrix() -
                                              *targets;
                               ln->ensure_grad() += flat(dx) * (g[0] / static_cast<double>(m));
                             });
}

Tensor grad_reverse(const Tensor& x, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("grad_reverse: lambda must be >= 0");
  NodePtr xn = x.node();
  return Tensor::make_result(x.shape(), x.data(), "grad_reverse", {x},
                             [xn, lambda](const Vector& g) { accumulate(xn, -lambda * g); });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  }
  NodePtr xn = x.node();
  return Tensor::make_result(std::move(shape), x.data(), "reshape", {x},
                             [xn](const Vector& g) { accumulate(xn, g); });
}

Tensor flatten_rows(const Tensor& x) { return reshape(x, {x.dim(0), x.size() / x.dim(0)}); }

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape shape = parts.front().shape();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<Index>(shape.size()) ||
        !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: " + to_string(shape) + " vs " + to_string(p.shape()));
    }
    rows += p.dim(0);
  }
  shape[0] = rows;
  Vector out(numel(shape));
  std::vector<Index> offsets;
  std::vector<NodePtr> nodes;
  Index offset = 0;
  for (const auto& p : parts) {
    out.segment(offset, p.size()) = p.data();
    offsets.push_back(offset);
    nodes.push_back(p.node());
    offset += p.size();
  }
  return Tensor::make_result(std::move(shape), std::move(out), "concat_rows",
                             std::vector<Tensor>(parts.begin(), parts.end()),
                             [nodes, offsets](const Vector& g) {
                               for (std::size_t i = 0; i < nodes.size(); ++i) {
                                 if (nodes[i]->requires_grad) {
                                   nodes[i]->ensure_grad() +=
                                       g.segment(offsets[i], nodes[i]->value.size());
                                 }
                               }
                             });
}

Tensor gather_rows(const Tensor& x, std::span<const Index> rows) {
  if (rows.empty()) throw DimensionError("gather_rows: empty row set");
  const Index stride = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = static_cast<Index>(rows.size());
  Vector out(numel(shape));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.dim(0)) throw DimensionError("gather_rows: row out of range");
    out.segment(static_cast<Index>(i) * stride, stride) = x.data().segment(rows[i] * stride, stride);
  }
  NodePtr xn = x.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return Tensor::make_result(std::move(shape), std::move(out), "gather_rows", {x},
                             [xn, idx, stride](const Vector& g) {
                               if (!xn->requires_grad) return;
                               Vector& gx = xn->ensure_grad();
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 gx.segment(idx[i] * stride, stride) +=
                                     g.segment(static_cast<Index>(i) * stride, stride);
                               }
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  NodePtr an = a.node(), bn = b.node();
  return Tensor::make_result(a.shape(), a.data() + b.data(), "add", {a, b},
                             [an, bn](const Vector& g) {
                               accumulate(an, g);
                               accumulate(bn, g);
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  NodePtr an = a.node(), bn = b.node();
  return Tensor::make_result(a.shape(), a.data().cwiseProduct(b.data()), "mul", {a, b},
                             [an, bn](const Vector& g) {
                               if (an->requires_grad) an->ensure_grad() += g.cwiseProduct(bn->value);
                               if (bn->requires_grad) bn->ensure_grad() += g.cwiseProduct(an->value);
                             });
}

Tensor scale(const Tensor& x, double factor) {
  NodePtr xn = x.node();
  return Tensor::make_result(x.shape(), x.data() * factor, "scale", {x},
                             [xn, factor](const Vector& g) { accumulate(xn, g * factor); });
}

Tensor sum(const Tensor& x) {
  NodePtr xn = x.node();
  return Tensor::make_result({1}, Vector::Constant(1, x.data().sum()), "sum", {x},
                             [xn](const Vector& g) {
                               if (xn->requires_grad) xn->ensure_grad().array() += g[0];
                             });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
  return finite_diff_check(f, [&f] { return f().item(); }, params, eps);
}

double finite_diff_check(const std::function<Tensor()>& f, const std::function<double()>& reference,
                         std::span<Tensor> params, double eps) {
  if (!(eps > 0.0)) throw ParameterError("finite_diff_check: eps must be > 0");
  for (auto& p : params) p.zero_grad();
  backward(f());
  std::vector<Vector> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.has_grad() ? p.grad() : Vector::Zero(p.size()));

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Vector& values = params[i].mutable_data();
    for (Index j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + eps;
      const double up = reference();
      values[j] = saved - eps;
      const double down = reference();
      values[j] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double ad = analytic[i][j];
      worst = std::max(worst, std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd)));
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace msadgn
